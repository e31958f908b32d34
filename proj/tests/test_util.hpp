#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

// Oracles shared across test suites. These stay independent of the library's
// autodiff path: plain double arithmetic, scalar loops only.
namespace testutil {

/// Central finite differences of a scalar function.
inline std::vector<double> finite_diff(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
    double h = 1e-5) {
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double fp = f(x);
    x[i] = orig - h;
    const double fm = f(x);
    x[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

/// Relative error with an absolute floor so near-zero gradients compare
/// against finite-difference noise sanely.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({floor, std::abs(a), std::abs(b)});
}

inline double max_rel_err(std::span<const double> a, std::span<const double> b,
                          double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, rel_err(a[i], b[i], floor));
  return worst;
}

}  // namespace testutil
