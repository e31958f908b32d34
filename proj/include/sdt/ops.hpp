#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "sdt/tensor.hpp"

namespace sdt {

using Mask = std::vector<std::uint8_t>;

namespace detail {

template <typename T>
using NodeT = typename Tensor<T>::Node;

// C[m,n] = (or +=) op(A) * op(B); row-major buffers.
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, bool ta, const T* b,
          bool tb, T* c, bool accumulate) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const Mat> A(a, ta ? k : m, ta ? m : k);
  Eigen::Map<const Mat> B(b, tb ? n : k, tb ? k : n);
  Eigen::Map<Mat> C(c, m, n);
  if (!ta && !tb) {
    if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (ta && !tb) {
    if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    if (accumulate) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

template <typename T>
std::vector<T> permute_copy(const std::vector<T>& src, const Shape& in_shape,
                            const std::vector<std::size_t>& axes) {
  const std::size_t r = in_shape.size();
  const auto in_strides = row_major_strides(in_shape);
  Shape out_shape(r);
  std::vector<std::size_t> stride_for_out(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride_for_out[i] = in_strides[axes[i]];
  }
  std::vector<T> dst(src.size());
  if (dst.empty()) return dst;
  std::vector<std::size_t> idx(r, 0);
  std::size_t src_off = 0;
  for (std::size_t o = 0; o < dst.size(); ++o) {
    dst[o] = src[src_off];
    for (std::size_t ax = r; ax-- > 0;) {
      ++idx[ax];
      src_off += stride_for_out[ax];
      if (idx[ax] < out_shape[ax]) break;
      src_off -= out_shape[ax] * stride_for_out[ax];
      idx[ax] = 0;
    }
  }
  return dst;
}

}  // namespace detail

/// Matrix product. Supports [m,k]x[k,n], stacked [..,m,k]x[k,n] (shared right
/// operand, gradients summed over the stack), and fully batched products with
/// identical leading dimensions. Anything else is a shape error.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " + shape_str(sa) +
                                " x " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];

  if (sb.size() == 2) {
    if (sb[0] != k) {
      throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(sa) + " x " +
                                  shape_str(sb));
    }
    const std::size_t n = sb[1];
    const std::size_t rows = numel(sa) / k;
    Shape out_shape(sa);
    out_shape.back() = n;
    std::vector<T> out(rows * n);
    detail::gemm(rows, n, k, a.values().data(), false, b.values().data(), false, out.data(),
                 false);
    return detail::make_op<T>(
        "matmul", std::move(out_shape), std::move(out), {a, b},
        [rows, n, k](detail::NodeT<T>& self) {
          auto& pa = *self.parents[0];
          auto& pb = *self.parents[1];
          if (pa.requires_grad) {
            pa.ensure_grad();
            detail::gemm(rows, k, n, self.grad.data(), false, pb.value.data(), true,
                         pa.grad.data(), true);
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            detail::gemm(k, n, rows, pa.value.data(), true, self.grad.data(), false,
                         pb.grad.data(), true);
          }
        });
  }

  if (sb.size() != sa.size()) {
    throw std::invalid_argument("matmul: rank mismatch: " + shape_str(sa) + " x " + shape_str(sb));
  }
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
    if (sa[i] != sb[i]) {
      throw std::invalid_argument("matmul: leading dimensions disagree: " + shape_str(sa) +
                                  " x " + shape_str(sb));
    }
  }
  if (sb[sb.size() - 2] != k) {
    throw std::invalid_argument("matmul: inner dimensions disagree: " + shape_str(sa) + " x " +
                                shape_str(sb));
  }
  const std::size_t n = sb.back();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  Shape out_shape(sa);
  out_shape.back() = n;
  std::vector<T> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(m, n, k, a.values().data() + i * m * k, false, b.values().data() + i * k * n,
                 false, out.data() + i * m * n, false);
  }
  return detail::make_op<T>(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [batch, m, n, k](detail::NodeT<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < batch; ++i) {
          const T* g = self.grad.data() + i * m * n;
          if (pa.requires_grad) {
            pa.ensure_grad();
            detail::gemm(m, k, n, g, false, pb.value.data() + i * k * n, true,
                         pa.grad.data() + i * m * k, true);
          }
          if (pb.requires_grad) {
            pb.ensure_grad();
            detail::gemm(k, n, m, pa.value.data() + i * m * k, true, g, false,
                         pb.grad.data() + i * k * n, true);
          }
        }
      });
}

/// Reorders axes; `axes` must be a permutation of 0..rank-1.
template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> axes) {
  const Shape& s = x.shape();
  if (axes.size() != s.size()) throw std::invalid_argument("permute: axes rank mismatch");
  std::vector<bool> hit(s.size(), false);
  for (auto ax : axes) {
    if (ax >= s.size() || hit[ax]) throw std::invalid_argument("permute: invalid axes");
    hit[ax] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out_shape[i] = s[axes[i]];
  auto out = detail::permute_copy(x.values(), s, axes);

  std::vector<std::size_t> inverse(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
  Shape fwd_shape = out_shape;
  return detail::make_op<T>(
      "permute", std::move(out_shape), std::move(out), {x},
      [inverse, fwd_shape](detail::NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        auto g = detail::permute_copy(self.grad, fwd_shape, inverse);
        for (std::size_t i = 0; i < g.size(); ++i) p.grad[i] += g[i];
      });
}

/// Swaps the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw std::invalid_argument("transpose: rank must be >= 2");
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, std::move(axes));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(shape));
  }
  std::vector<T> out = x.values();
  return detail::make_op<T>("reshape", std::move(shape), std::move(out), {x},
                            [](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                p.grad[i] += self.grad[i];
                            });
}

/// Elementwise sum. Shapes must match, except that a rank-1 right operand of
/// extent equal to the left's trailing dimension broadcasts over leading axes
/// (the bias case).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) {
    std::vector<T> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return detail::make_op<T>("add", sa, std::move(out), {a, b}, [](detail::NodeT<T>& self) {
      for (auto& parent : self.parents) {
        auto& p = *parent;
        if (!p.requires_grad) continue;
        p.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
      }
    });
  }
  if (sb.size() == 1 && !sa.empty() && sb[0] == sa.back()) {
    const std::size_t n = sb[0];
    std::vector<T> out(a.size());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % n];
    return detail::make_op<T>("add", sa, std::move(out), {a, b}, [n](detail::NodeT<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i % n] += self.grad[i];
      }
    });
  }
  throw std::invalid_argument("add: incompatible shapes " + shape_str(sa) + " + " + shape_str(sb));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " - " +
                                shape_str(b.shape()));
  }
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op<T>("sub", a.shape(), std::move(out), {a, b},
                            [](detail::NodeT<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              if (pa.requires_grad) {
                                pa.ensure_grad();
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  pa.grad[i] += self.grad[i];
                              }
                              if (pb.requires_grad) {
                                pb.ensure_grad();
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  pb.grad[i] -= self.grad[i];
                              }
                            });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " * " +
                                shape_str(b.shape()));
  }
  std::vector<T> out(a.size());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op<T>("mul", a.shape(), std::move(out), {a, b},
                            [](detail::NodeT<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              if (pa.requires_grad) {
                                pa.ensure_grad();
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  pa.grad[i] += self.grad[i] * pb.value[i];
                              }
                              if (pb.requires_grad) {
                                pb.ensure_grad();
                                for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  pb.grad[i] += self.grad[i] * pa.value[i];
                              }
                            });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.size());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * factor;
  return detail::make_op<T>("scale", x.shape(), std::move(out), {x},
                            [factor](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                p.grad[i] += self.grad[i] * factor;
                            });
}

/// Stacks `reps` copies of x along a new leading axis.
template <typename T>
Tensor<T> repeat_front(const Tensor<T>& x, std::size_t reps) {
  if (reps == 0) throw std::invalid_argument("repeat_front: reps must be positive");
  Shape out_shape;
  out_shape.reserve(x.rank() + 1);
  out_shape.push_back(reps);
  for (auto d : x.shape()) out_shape.push_back(d);
  const std::size_t n = x.size();
  std::vector<T> out(reps * n);
  for (std::size_t r = 0; r < reps; ++r) {
    std::copy(x.values().begin(), x.values().end(), out.begin() + r * n);
  }
  return detail::make_op<T>("repeat_front", std::move(out_shape), std::move(out), {x},
                            [reps, n](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (std::size_t r = 0; r < reps; ++r) {
                                const T* g = self.grad.data() + r * n;
                                for (std::size_t i = 0; i < n; ++i) p.grad[i] += g[i];
                              }
                            });
}

/// Mean over the leading axis.
template <typename T>
Tensor<T> mean_front(const Tensor<T>& x) {
  if (x.rank() < 1) throw std::invalid_argument("mean_front: rank must be >= 1");
  const std::size_t reps = x.shape()[0];
  const std::size_t n = x.size() / std::max<std::size_t>(reps, 1);
  if (reps == 0) throw std::invalid_argument("mean_front: empty leading axis");
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  std::vector<T> out(n, T(0));
  const auto& xv = x.values();
  for (std::size_t r = 0; r < reps; ++r) {
    const T* src = xv.data() + r * n;
    for (std::size_t i = 0; i < n; ++i) out[i] += src[i];
  }
  const T inv = T(1) / static_cast<T>(reps);
  for (auto& v : out) v *= inv;
  return detail::make_op<T>("mean_front", std::move(out_shape), std::move(out), {x},
                            [reps, n, inv](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (std::size_t r = 0; r < reps; ++r) {
                                T* g = p.grad.data() + r * n;
                                for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * inv;
                              }
                            });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = T(0);
  for (const T v : x.values()) total += v;
  return detail::make_op<T>("sum_all", Shape{}, std::vector<T>{total}, {x},
                            [](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (auto& g : p.grad) g += self.grad[0];
                            });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

/// Row-wise softmax over the last axis. An optional keep-mask (true = keep)
/// may cover either the whole tensor or just its trailing two axes, in which
/// case it is shared by every leading slice. Masked entries come out exactly
/// zero; a fully masked row is an error.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const Mask* mask = nullptr) {
  if (x.rank() < 1) throw std::invalid_argument("softmax_rows: rank must be >= 1");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  std::size_t mask_rows = 0;
  if (mask) {
    if (x.rank() >= 2 && mask->size() == x.shape()[x.rank() - 2] * cols) {
      mask_rows = x.shape()[x.rank() - 2];
    } else if (mask->size() == x.size()) {
      mask_rows = rows;
    } else if (x.rank() == 1 && mask->size() == cols) {
      mask_rows = 1;
    } else {
      throw std::invalid_argument("softmax_rows: mask size does not match input");
    }
  }
  const auto& xv = x.values();
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * cols;
    T* o = out.data() + r * cols;
    const std::uint8_t* keep =
        mask ? mask->data() + (r % mask_rows) * cols : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (!keep || keep[j]) mx = std::max(mx, in[j]);
    }
    if (mx == -std::numeric_limits<T>::infinity()) {
      throw std::invalid_argument("softmax_rows: fully masked row " + std::to_string(r));
    }
    T denom = T(0);
    for (std::size_t j = 0; j < cols; ++j) {
      if (!keep || keep[j]) {
        o[j] = std::exp(in[j] - mx);
        denom += o[j];
      } else {
        o[j] = T(0);
      }
    }
    const T inv = T(1) / denom;
    for (std::size_t j = 0; j < cols; ++j) o[j] *= inv;
  }
  return detail::make_op<T>("softmax_rows", x.shape(), std::move(out), {x},
                            [rows, cols](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (std::size_t r = 0; r < rows; ++r) {
                                const T* y = self.value.data() + r * cols;
                                const T* dy = self.grad.data() + r * cols;
                                T dot = T(0);
                                for (std::size_t j = 0; j < cols; ++j) dot += dy[j] * y[j];
                                T* g = p.grad.data() + r * cols;
                                for (std::size_t j = 0; j < cols; ++j)
                                  g[j] += y[j] * (dy[j] - dot);
                              }
                            });
}

/// Normalizes each trailing-axis vector to zero mean / unit variance
/// (population variance, eps inside the square root) then applies the affine
/// gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.shape().back();
  if (d < 1) throw std::invalid_argument("layer_norm: trailing dimension must be >= 1");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw std::invalid_argument("layer_norm: gain/bias must have shape [" + std::to_string(d) +
                                "]");
  }
  const std::size_t vecs = x.size() / d;
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<T> out(x.size());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(vecs);
  for (std::size_t r = 0; r < vecs; ++r) {
    const T* in = xv.data() + r * d;
    T mean = T(0);
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) {
      const T c = in[j] - mean;
      var += c * c;
    }
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    T* xh = xhat.data() + r * d;
    T* o = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      xh[j] = (in[j] - mean) * inv;
      o[j] = xh[j] * gv[j] + bv[j];
    }
  }
  return detail::make_op<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [vecs, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::NodeT<T>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& gv = pg.value;
        if (px.requires_grad) px.ensure_grad();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t r = 0; r < vecs; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* xh = xhat.data() + r * d;
          if (pg.requires_grad || pb.requires_grad) {
            for (std::size_t j = 0; j < d; ++j) {
              if (pg.requires_grad) pg.grad[j] += dy[j] * xh[j];
              if (pb.requires_grad) pb.grad[j] += dy[j];
            }
          }
          if (px.requires_grad) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = dy[j] * gv[j];
              m1 += dxh;
              m2 += dxh * xh[j];
            }
            m1 /= static_cast<T>(d);
            m2 /= static_cast<T>(d);
            T* g = px.grad.data() + r * d;
            for (std::size_t j = 0; j < d; ++j) {
              const T dxh = dy[j] * gv[j];
              g[j] += (dxh - m1 - xh[j] * m2) * inv_std[r];
            }
          }
        }
      });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  const auto& xv = x.values();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(xv[i]);
    out[i] = static_cast<T>(0.5 * v * (1.0 + std::erf(v * kInvSqrt2)));
  }
  return detail::make_op<T>("gelu", x.shape(), std::move(out), {x},
                            [](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                const double v = static_cast<double>(p.value[i]);
                                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                                p.grad[i] += self.grad[i] * static_cast<T>(cdf + v * pdf);
                              }
                            });
}

/// Derivative of the arctangent surrogate, peaked at width/2 for u == theta.
template <typename T>
T surrogate_grad(T u, T theta, T width) {
  const T c = static_cast<T>(std::numbers::pi / 2) * width * (u - theta);
  return (width / T(2)) / (T(1) + c * c);
}

/// Smooth stand-in for the Heaviside step whose derivative is exactly
/// surrogate_grad; used by gradient-check mode.
template <typename T>
T surrogate_smooth(T u, T theta, T width) {
  const T c = static_cast<T>(std::numbers::pi / 2) * width * (u - theta);
  return static_cast<T>(std::atan(static_cast<double>(c)) / std::numbers::pi + 0.5);
}

/// Threshold spike function: forward emits exactly 1 where u > theta else 0;
/// backward applies the arctangent surrogate derivative elementwise. With
/// smooth=true the forward is replaced by the surrogate's antiderivative so
/// the whole graph becomes differentiable (finite-difference testing).
template <typename T>
Tensor<T> heaviside_surrogate(const Tensor<T>& u, T theta, T width, bool smooth = false) {
  if (!(width > T(0))) throw std::invalid_argument("heaviside_surrogate: width must be positive");
  const auto& uv = u.values();
  std::vector<T> out(u.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = smooth ? surrogate_smooth(uv[i], theta, width) : (uv[i] > theta ? T(1) : T(0));
  }
  return detail::make_op<T>("heaviside_surrogate", u.shape(), std::move(out), {u},
                            [theta, width](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                p.grad[i] +=
                                    self.grad[i] * surrogate_grad(p.value[i], theta, width);
                              }
                            });
}

/// Mean negative log-likelihood over unmasked positions of [B,S,A] logits.
/// Masked positions contribute neither loss nor gradient.
template <typename T>
Tensor<T> cross_entropy_masked(const Tensor<T>& logits, std::span<const int> targets,
                               std::span<const std::uint8_t> mask) {
  if (logits.rank() != 3) {
    throw std::invalid_argument("cross_entropy_masked: logits must be [B,S,A], got " +
                                shape_str(logits.shape()));
  }
  const std::size_t positions = logits.shape()[0] * logits.shape()[1];
  const std::size_t classes = logits.shape()[2];
  if (targets.size() != positions || mask.size() != positions) {
    throw std::invalid_argument("cross_entropy_masked: targets/mask size mismatch");
  }
  const auto& lv = logits.values();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < positions; ++p) {
    if (!mask[p]) continue;
    const int t = targets[p];
    if (t < 0 || static_cast<std::size_t>(t) >= classes) {
      throw std::invalid_argument("cross_entropy_masked: target out of range at position " +
                                  std::to_string(p));
    }
    const T* row = lv.data() + p * classes;
    T mx = row[0];
    for (std::size_t a = 1; a < classes; ++a) mx = std::max(mx, row[a]);
    double denom = 0.0;
    for (std::size_t a = 0; a < classes; ++a) denom += std::exp(static_cast<double>(row[a] - mx));
    total += std::log(denom) + static_cast<double>(mx) - static_cast<double>(row[t]);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy_masked: all positions masked");
  const T loss = static_cast<T>(total / static_cast<double>(count));
  std::vector<int> tcopy(targets.begin(), targets.end());
  std::vector<std::uint8_t> mcopy(mask.begin(), mask.end());
  return detail::make_op<T>(
      "cross_entropy_masked", Shape{}, std::vector<T>{loss}, {logits},
      [positions, classes, count, tcopy = std::move(tcopy),
       mcopy = std::move(mcopy)](detail::NodeT<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T w = self.grad[0] / static_cast<T>(count);
        for (std::size_t pos = 0; pos < positions; ++pos) {
          if (!mcopy[pos]) continue;
          const T* row = p.value.data() + pos * classes;
          T* g = p.grad.data() + pos * classes;
          T mx = row[0];
          for (std::size_t a = 1; a < classes; ++a) mx = std::max(mx, row[a]);
          T denom = T(0);
          for (std::size_t a = 0; a < classes; ++a) denom += std::exp(row[a] - mx);
          for (std::size_t a = 0; a < classes; ++a) {
            T soft = std::exp(row[a] - mx) / denom;
            if (static_cast<std::size_t>(tcopy[pos]) == a) soft -= T(1);
            g[a] += w * soft;
          }
        }
      });
}

/// Embedding lookup: copies table rows at the given indices; gradients
/// scatter-add back into the table.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> indices, Shape lead_shape) {
  if (table.rank() != 2) throw std::invalid_argument("gather_rows: table must be rank 2");
  const std::size_t rows = table.shape()[0];
  const std::size_t d = table.shape()[1];
  if (indices.size() != numel(lead_shape)) {
    throw std::invalid_argument("gather_rows: indices do not match lead shape");
  }
  Shape out_shape = lead_shape;
  out_shape.push_back(d);
  std::vector<T> out(indices.size() * d);
  const auto& tv = table.values();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int idx = indices[i];
    if (idx < 0 || static_cast<std::size_t>(idx) >= rows) {
      throw std::invalid_argument("gather_rows: index " + std::to_string(idx) +
                                  " out of range [0," + std::to_string(rows) + ")");
    }
    std::copy(tv.begin() + idx * d, tv.begin() + (idx + 1) * d, out.begin() + i * d);
  }
  std::vector<int> icopy(indices.begin(), indices.end());
  return detail::make_op<T>("gather_rows", std::move(out_shape), std::move(out), {table},
                            [d, icopy = std::move(icopy)](detail::NodeT<T>& self) {
                              auto& p = *self.parents[0];
                              if (!p.requires_grad) return;
                              p.ensure_grad();
                              for (std::size_t i = 0; i < icopy.size(); ++i) {
                                const T* g = self.grad.data() + i * d;
                                T* dst = p.grad.data() + icopy[i] * d;
                                for (std::size_t j = 0; j < d; ++j) dst[j] += g[j];
                              }
                            });
}

/// Lower-triangular keep-mask for causal attention (row t keeps cols <= t).
inline Mask causal_mask(std::size_t s) {
  Mask mask(s * s, 0);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j <= i; ++j) mask[i * s + j] = 1;
  }
  return mask;
}

template <typename T>
std::size_t argmax_row(std::span<const T> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

}  // namespace sdt
