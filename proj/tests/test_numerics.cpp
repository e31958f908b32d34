#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "sdt/ops.hpp"
#include "sdt/rng.hpp"
#include "sdt/tensor.hpp"
#include "test_util.hpp"

using namespace sdt;

namespace {

// Wraps a tensor op as f: R^n -> R for the finite-difference oracle. The
// scalar output is a fixed random weighting of the op's outputs so every
// output component is exercised.
double weighted_op_output(const std::function<Tensor<double>(const Tensor<double>&)>& op,
                          const Shape& shape, const std::vector<double>& x,
                          const std::vector<double>& weights) {
  auto in = Tensor<double>::from(shape, x);
  auto out = op(in);
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) total += weights[i] * out.values()[i];
  return total;
}

std::vector<double> autodiff_grad(const std::function<Tensor<double>(const Tensor<double>&)>& op,
                                  const Shape& shape, const std::vector<double>& x,
                                  const std::vector<double>& weights) {
  auto in = Tensor<double>::from(shape, x, true);
  auto out = op(in);
  auto w = Tensor<double>::from(out.shape(), weights);
  auto loss = sum_all(mul(out, w));
  loss.backward();
  return in.grad();
}

void check_op_gradient(const std::function<Tensor<double>(const Tensor<double>&)>& op,
                       const Shape& shape, Rng& rng, double tol = 1e-4) {
  std::vector<double> x(numel(shape));
  for (auto& v : x) v = rng.uniform(-1.5, 1.5);
  std::vector<double> w(0);
  {
    auto probe = op(Tensor<double>::from(shape, x));
    w.resize(probe.size());
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  }
  auto ad = autodiff_grad(op, shape, x, w);
  auto fd = testutil::finite_diff(
      [&](const std::vector<double>& xs) { return weighted_op_output(op, shape, xs, w); }, x);
  REQUIRE(testutil::max_rel_err(ad, fd) < tol);
}

}  // namespace

TEST_CASE("matmul computes hand examples") {
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto b = Tensor<double>::from({2, 2}, {3, 4, 5, 6});
  auto c = matmul(eye, b);
  REQUIRE(c.values() == std::vector<double>{3, 4, 5, 6});

  auto row = Tensor<double>::from({1, 2}, {1, 2});
  auto col = Tensor<double>::from({2, 1}, {3, 4});
  REQUIRE(matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul rejects mismatched shapes") {
  auto a = Tensor<double>::from({2, 3}, std::vector<double>(6, 1.0));
  auto b = Tensor<double>::from({2, 2}, std::vector<double>(4, 1.0));
  REQUIRE_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("gradient of sum(matmul(A,B)) wrt A equals ones x B^T") {
  Rng rng(7);
  auto a = Tensor<double>::randn({3, 4}, rng, 1.0, true);
  auto b = Tensor<double>::randn({4, 2}, rng, 1.0);
  auto loss = sum_all(matmul(a, b));
  loss.backward();

  // analytic: ones[3,2] x B^T
  auto expected = matmul(Tensor<double>::ones({3, 2}), transpose(b));
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a.grad()[i] == Catch::Approx(expected.values()[i]).margin(1e-12));
  }

  // and against the finite-difference oracle (h = 1e-5)
  auto fd = testutil::finite_diff(
      [&](const std::vector<double>& xs) {
        auto at = Tensor<double>::from({3, 4}, xs);
        return sum_all(matmul(at, b)).item();
      },
      a.values());
  REQUIRE(testutil::max_rel_err(a.grad(), fd) < 1e-6);
}

TEST_CASE("batched and stacked matmul match per-slice products") {
  Rng rng(11);
  auto a = Tensor<double>::randn({2, 3, 4}, rng, 1.0);
  auto w = Tensor<double>::randn({4, 5}, rng, 1.0);
  auto out = matmul(a, w);
  REQUIRE(out.shape() == Shape{2, 3, 5});
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<double> slice(a.values().begin() + s * 12, a.values().begin() + (s + 1) * 12);
    auto ref = matmul(Tensor<double>::from({3, 4}, slice), w);
    for (std::size_t i = 0; i < 15; ++i) {
      REQUIRE(out.values()[s * 15 + i] == Catch::Approx(ref.values()[i]));
    }
  }

  auto b = Tensor<double>::randn({2, 4, 3}, rng, 1.0);
  auto batched = matmul(a, b);
  REQUIRE(batched.shape() == Shape{2, 3, 3});
}

TEST_CASE("softmax_rows hand examples") {
  auto flat = softmax_rows(Tensor<double>::from({1, 4}, {0, 0, 0, 0}));
  for (auto v : flat.values()) REQUIRE(v == Catch::Approx(0.25));

  auto two = softmax_rows(Tensor<double>::from({1, 2}, {std::log(2.0), 0.0}));
  REQUIRE(two.values()[0] == Catch::Approx(2.0 / 3.0));
  REQUIRE(two.values()[1] == Catch::Approx(1.0 / 3.0));

  Mask keep{1, 0, 1};
  auto masked = softmax_rows(Tensor<double>::from({1, 3}, {5, 1, 3}), &keep);
  const double denom = std::exp(5.0) + std::exp(3.0);
  REQUIRE(masked.values()[0] == Catch::Approx(std::exp(5.0) / denom));
  REQUIRE(masked.values()[1] == 0.0);
  REQUIRE(masked.values()[2] == Catch::Approx(std::exp(3.0) / denom));
}

TEST_CASE("softmax_rows rejects fully masked rows") {
  Mask keep{0, 0};
  auto x = Tensor<double>::from({1, 2}, {1.0, 2.0});
  REQUIRE_THROWS_AS(softmax_rows(x, &keep), std::invalid_argument);
}

TEST_CASE("softmax_rows rows sum to one") {
  Rng rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = Tensor<double>::randn({4, 7}, rng, 3.0);
    auto y = softmax_rows(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 7; ++j) sum += y.values()[r * 7 + j];
      REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
    }
  }
  auto mask = causal_mask(5);
  auto scores = Tensor<double>::randn({2, 5, 5}, rng, 2.0);
  auto attn = softmax_rows(scores, &mask);
  for (std::size_t r = 0; r < 10; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < 5; ++j) sum += attn.values()[r * 5 + j];
    REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("layer_norm hand examples") {
  auto gain = Tensor<double>::ones({3});
  auto bias = Tensor<double>::zeros({3});
  auto constant = layer_norm(Tensor<double>::from({1, 3}, {4.2, 4.2, 4.2}), gain, bias, 1e-5);
  for (auto v : constant.values()) REQUIRE(v == Catch::Approx(0.0).margin(1e-12));

  auto g2 = Tensor<double>::ones({2});
  auto b2 = Tensor<double>::zeros({2});
  auto standardized = layer_norm(Tensor<double>::from({1, 2}, {1.0, -1.0}), g2, b2, 1e-12);
  REQUIRE(standardized.values()[0] == Catch::Approx(1.0).margin(1e-6));
  REQUIRE(standardized.values()[1] == Catch::Approx(-1.0).margin(1e-6));
}

TEST_CASE("heaviside_surrogate thresholds exactly and is binary") {
  auto s = heaviside_surrogate(Tensor<double>::from({2}, {0.5, 1.5}), 1.0, 2.0);
  REQUIRE(s.values() == std::vector<double>{0.0, 1.0});

  Rng rng(5);
  auto u = Tensor<double>::randn({64}, rng, 2.0);
  auto spikes = heaviside_surrogate(u, 1.0, 2.0);
  for (auto v : spikes.values()) REQUIRE((v == 0.0 || v == 1.0));
}

TEST_CASE("surrogate derivative peaks at width/2 and matches analytic form") {
  const double width = 2.0;
  REQUIRE(surrogate_grad(1.0, 1.0, width) == Catch::Approx(width / 2.0));

  Rng rng(9);
  auto u = Tensor<double>::randn({32}, rng, 1.5, true);
  auto loss = sum_all(heaviside_surrogate(u, 1.0, width));
  loss.backward();
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double expected = surrogate_grad(u.values()[i], 1.0, width);
    REQUIRE(std::abs(u.grad()[i] - expected) < 1e-10);
  }
}

TEST_CASE("smooth spike mode matches finite differences") {
  Rng rng(13);
  check_op_gradient(
      [](const Tensor<double>& x) { return heaviside_surrogate(x, 1.0, 2.0, true); }, {12}, rng);
}

TEST_CASE("cross_entropy_masked hand examples") {
  // uniform logits over 4 actions
  auto logits = Tensor<double>::zeros({1, 2, 4});
  std::vector<int> targets{1, 3};
  std::vector<std::uint8_t> mask{1, 1};
  auto loss = cross_entropy_masked(logits, targets, mask);
  REQUIRE(loss.item() == Catch::Approx(std::log(4.0)));

  // strong margin drives the loss to zero
  std::vector<double> sharp(8, 0.0);
  sharp[1] = 50.0;
  sharp[4 + 3] = 50.0;
  auto confident = cross_entropy_masked(Tensor<double>::from({1, 2, 4}, sharp), targets, mask);
  REQUIRE(confident.item() < 1e-12);
}

TEST_CASE("cross_entropy_masked equals unmasked-only loop oracle") {
  Rng rng(17);
  const std::size_t B = 2, S = 6, A = 4;
  auto logits = Tensor<double>::randn({B, S, A}, rng, 1.0);
  std::vector<int> targets(B * S);
  std::vector<std::uint8_t> mask(B * S);
  for (std::size_t i = 0; i < B * S; ++i) {
    targets[i] = static_cast<int>(rng.below(A));
    mask[i] = (i % 2 == 0) ? 1 : 0;  // half the positions masked
  }
  auto loss = cross_entropy_masked(logits, targets, mask);

  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < B * S; ++p) {
    if (!mask[p]) continue;
    double denom = 0.0;
    for (std::size_t a = 0; a < A; ++a) denom += std::exp(logits.values()[p * A + a]);
    total += std::log(denom) - logits.values()[p * A + targets[p]];
    ++count;
  }
  REQUIRE(loss.item() == Catch::Approx(total / count).margin(1e-12));
}

TEST_CASE("cross_entropy_masked error paths") {
  auto logits = Tensor<double>::zeros({1, 2, 4});
  std::vector<int> targets{0, 0};
  std::vector<std::uint8_t> none{0, 0};
  REQUIRE_THROWS_AS(cross_entropy_masked(logits, targets, none), std::invalid_argument);

  std::vector<int> bad{0, 7};
  std::vector<std::uint8_t> all{1, 1};
  REQUIRE_THROWS_AS(cross_entropy_masked(logits, bad, all), std::invalid_argument);
}

TEST_CASE("every differentiable op matches finite differences on random tensors") {
  Rng rng(23);
  auto weights = Tensor<double>::randn({4, 3}, rng, 1.0);
  Mask keep = causal_mask(4);

  for (int trial = 0; trial < 10; ++trial) {
    check_op_gradient([&](const Tensor<double>& x) { return matmul(x, weights); }, {5, 4}, rng);
    check_op_gradient([](const Tensor<double>& x) { return softmax_rows(x); }, {3, 5}, rng);
    check_op_gradient([&](const Tensor<double>& x) { return softmax_rows(x, &keep); }, {4, 4},
                      rng);
    check_op_gradient(
        [](const Tensor<double>& x) {
          auto gain = Tensor<double>::from({4}, {1.1, 0.9, 1.3, 0.7});
          auto bias = Tensor<double>::from({4}, {0.1, -0.2, 0.0, 0.3});
          return layer_norm(x, gain, bias, 1e-5);
        },
        {4, 4}, rng);
    check_op_gradient([](const Tensor<double>& x) { return gelu(x); }, {16}, rng);
    check_op_gradient([](const Tensor<double>& x) { return mean_front(x); }, {4, 6}, rng);
    check_op_gradient([](const Tensor<double>& x) { return repeat_front(x, 3); }, {8}, rng);
    check_op_gradient([](const Tensor<double>& x) { return permute(x, {1, 0}); }, {3, 4}, rng);
    check_op_gradient([](const Tensor<double>& x) { return reshape(x, {2, 6}); }, {3, 4}, rng);
  }

  // layer_norm gain/bias gradients, and CE wrt logits
  std::vector<int> targets{1, 2, 0};
  std::vector<std::uint8_t> mask{1, 0, 1};
  check_op_gradient(
      [&](const Tensor<double>& x) {
        return cross_entropy_masked(reshape(x, {1, 3, 4}), targets, mask);
      },
      {3, 4}, rng, 1e-4);
}

TEST_CASE("composed 3-op chain matches hand-computed Jacobian product") {
  // loss = sum(gelu(x W)); d loss / d x_i = sum_j gelu'(z_j) W[i][j]
  auto x = Tensor<double>::from({1, 2}, {0.4, -0.7}, true);
  auto w = Tensor<double>::from({2, 3}, {0.5, -1.0, 0.25, 1.5, 0.75, -0.5});
  auto z = matmul(x, w);
  auto loss = sum_all(gelu(z));
  loss.backward();

  auto gelu_prime = [](double v) {
    const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + v * pdf;
  };
  for (std::size_t i = 0; i < 2; ++i) {
    double hand = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      hand += gelu_prime(z.values()[j]) * w.values()[i * 3 + j];
    }
    REQUIRE(x.grad()[i] == Catch::Approx(hand).margin(1e-12));
  }
}

TEST_CASE("diamond-shaped graphs accumulate gradients once per node") {
  auto x = Tensor<double>::from({3}, {1.0, -2.0, 0.5}, true);
  auto y = add(x, x);
  auto loss = sum_all(mul(y, y));  // sum((2x)^2), gradient 8x
  loss.backward();
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(x.grad()[i] == Catch::Approx(8.0 * x.values()[i]));
  }
}

TEST_CASE("non-finite values are rejected") {
  REQUIRE_THROWS_AS(Tensor<double>::from({1}, {std::nan("")}), NumericsError);
  auto big = Tensor<float>::full({2}, 3.0e38f);
  REQUIRE_THROWS_AS(scale(big, 100.0f), NumericsError);
}

TEST_CASE("NoGradGuard disables tape recording") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  NoGradGuard guard;
  auto y = sum_all(x);
  REQUIRE_FALSE(y.requires_grad());
  REQUIRE_THROWS_AS(y.backward(), std::logic_error);
}

TEST_CASE("bias broadcast add matches finite differences") {
  Rng rng(29);
  auto bias = Tensor<double>::randn({4}, rng, 1.0, true);
  auto x = Tensor<double>::randn({3, 4}, rng, 1.0);
  auto loss = sum_all(mul(add(x, bias), add(x, bias)));
  loss.backward();
  auto fd = testutil::finite_diff(
      [&](const std::vector<double>& bs) {
        auto bt = Tensor<double>::from({4}, bs);
        return sum_all(mul(add(x, bt), add(x, bt))).item();
      },
      bias.values());
  REQUIRE(testutil::max_rel_err(bias.grad(), fd) < 1e-6);
}
