#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "rsbuilding/gradcheck.hpp"
#include "rsbuilding/ops.hpp"
#include "rsbuilding/random.hpp"
#include "rsbuilding/tensor.hpp"

using rsb::Shape;
using rsb::Tensor;
namespace ops = rsb::ops;

namespace {

Tensor<double> random_tensor(std::uint64_t seed, Shape shape, double lo = -1.0, double hi = 1.0) {
  rsb::RandomSource rng(seed);
  std::vector<double> v(rsb::numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

void expect_values(const Tensor<double>& t, const std::vector<double>& expected, double tol = 0.0) {
  ASSERT_EQ(t.numel(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t[i], expected[i], tol) << "index " << i;
}

}  // namespace

TEST(RandomSource, SameSeedSameSequence) {
  rsb::RandomSource a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs = differs || x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(RandomSource, FrozenFirstDraws) {
  // Pinned so that a platform or refactor change of the generator is caught.
  rsb::RandomSource rng(0);
  const std::uint64_t first = rng.next_u64();
  rsb::RandomSource again(0);
  EXPECT_EQ(first, again.next_u64());
  std::uint64_t sm = 0;
  EXPECT_EQ(rsb::splitmix64(sm), 0xE220A8397B1DCDAFull);
}

TEST(RandomSource, RangesAndTruncation) {
  rsb::RandomSource rng(5);
  for (int i = 0; i < 1000; ++i) {
    const auto k = rng.uniform_int(3, 7);
    EXPECT_GE(k, 3);
    EXPECT_LE(k, 7);
    EXPECT_LE(std::abs(rng.truncated_normal(0.02)), 0.04);
    const double u = rng.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Tensor, RejectsMismatchedDataAndNonFinite) {
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, {1.0, 2.0, 3.0}), rsb::ShapeError);
  EXPECT_THROW(Tensor<double>(Shape{1}, {std::nan("")}), rsb::NumericError);
  Tensor<double> x(Shape{1}, {0.0});
  EXPECT_THROW(ops::log(x), rsb::NumericError);
}

TEST(Matmul, HandArithmetic) {
  Tensor<double> a(Shape{2, 2}, {1, 2, 3, 4});
  Tensor<double> b(Shape{2, 1}, {1, 1});
  expect_values(ops::matmul(a, b), {3, 7});
}

TEST(Matmul, IdentityRightFactor) {
  const auto a = random_tensor(1, {3, 3});
  Tensor<double> eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto c = ops::matmul(a, eye);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(c[i], a[i]);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tensor<double> a = Tensor<double>::zeros({2, 3});
  Tensor<double> b = Tensor<double>::zeros({2, 3});
  try {
    ops::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const rsb::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("and [2x3]"), std::string::npos);
  }
}

TEST(Softmax, SymmetricAndStable) {
  expect_values(ops::softmax_lastdim(Tensor<double>(Shape{2}, {0, 0})), {0.5, 0.5});
  expect_values(ops::softmax_lastdim(Tensor<double>(Shape{2}, {1000, 1000})), {0.5, 0.5});
  const auto y = ops::softmax_lastdim(random_tensor(3, {7, 9}, -30, 30));
  for (std::size_t r = 0; r < 7; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < 9; ++j) total += y[r * 9 + j];
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(LayerNorm, ConstantAndZeroGain) {
  auto ones = Tensor<double>::full({4}, 1.0);
  auto zeros = Tensor<double>::zeros({4});
  expect_values(ops::layer_norm(Tensor<double>(Shape{4}, {5, 5, 5, 5}), ones, zeros, 1e-5), {0, 0, 0, 0});
  Tensor<double> bias(Shape{4}, {0.1, -0.2, 0.3, 0.4});
  const auto y = ops::layer_norm(random_tensor(2, {3, 4}), zeros, bias, 1e-5);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(y[i], bias[i % 4]);
}

TEST(LayerNorm, NormalizedStatistics) {
  const std::size_t n = 16;
  const auto y = ops::layer_norm(random_tensor(9, {5, n}, -3, 3), Tensor<double>::full({n}, 1.0),
                                 Tensor<double>::zeros({n}), 1e-5);
  for (std::size_t r = 0; r < 5; ++r) {
    double mu = 0, var = 0;
    for (std::size_t j = 0; j < n; ++j) mu += y[r * n + j];
    mu /= n;
    for (std::size_t j = 0; j < n; ++j) var += (y[r * n + j] - mu) * (y[r * n + j] - mu);
    var /= n;
    EXPECT_LE(std::abs(mu), 1e-6);
    EXPECT_NEAR(var, 1.0, 1e-4);
  }
}

TEST(Conv2d, IdentityKernels) {
  const auto x = random_tensor(4, {5, 4, 3});
  std::vector<double> eye1(9, 0.0);
  for (int c = 0; c < 3; ++c) eye1[c * 3 + c] = 1.0;
  const auto y1 = ops::conv2d(x, Tensor<double>(Shape{1, 1, 3, 3}, eye1));
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y1[i], x[i]);

  std::vector<double> center(3 * 3 * 3 * 3, 0.0);
  for (int c = 0; c < 3; ++c) center[((1 * 3 + 1) * 3 + c) * 3 + c] = 1.0;
  const auto y3 = ops::conv2d(x, Tensor<double>(Shape{3, 3, 3, 3}, center));
  ASSERT_EQ(y3.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y3[i], x[i]);
}

TEST(Conv2d, CrossCorrelationConvention) {
  // Single channel 3x3 input, kernel with a 1 at top-left tap: output(y,x)
  // reads input(y-1, x-1) (no flip).
  Tensor<double> x(Shape{3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  std::vector<double> k(9, 0.0);
  k[0] = 1.0;
  expect_values(ops::conv2d(x, Tensor<double>(Shape{3, 3, 1, 1}, k)), {0, 0, 0, 0, 1, 2, 0, 4, 5});
}

TEST(Conv2d, UnsupportedKernelIsConfigError) {
  EXPECT_THROW(ops::conv2d(Tensor<double>::zeros({4, 4, 1}), Tensor<double>::zeros({5, 5, 1, 1})),
               rsb::ConfigError);
  EXPECT_THROW(ops::conv2d(Tensor<double>::zeros({4, 4, 1}), Tensor<double>::zeros({3, 3, 1, 1}), 2),
               rsb::ConfigError);
}

TEST(TransposedConv2d, AllOnesKernelAndZeroInput) {
  const auto y = ops::transposed_conv2d(Tensor<double>(Shape{1, 1, 1}, {1}), Tensor<double>::full({2, 2, 1, 1}, 1.0));
  EXPECT_EQ(y.shape(), (Shape{2, 2, 1}));
  expect_values(y, {1, 1, 1, 1});
  const auto z = ops::transposed_conv2d(Tensor<double>::zeros({3, 2, 2}), random_tensor(1, {2, 2, 2, 4}));
  EXPECT_EQ(z.shape(), (Shape{6, 4, 4}));
  for (double v : z.data()) EXPECT_EQ(v, 0.0);
}

TEST(MaxPool2d, Basics) {
  expect_values(ops::max_pool2d(Tensor<double>(Shape{2, 2, 1}, {1, 2, 3, 4})), {4});
  const auto c = ops::max_pool2d(Tensor<double>::full({4, 6, 2}, 2.5));
  EXPECT_EQ(c.shape(), (Shape{2, 3, 2}));
  for (double v : c.data()) EXPECT_EQ(v, 2.5);
  EXPECT_THROW(ops::max_pool2d(Tensor<double>::zeros({3, 4, 1})), rsb::ShapeError);
}

TEST(MaxPool2d, GradientIsOneHotPerWindow) {
  auto x = random_tensor(11, {4, 4, 1});
  x.set_requires_grad(true);
  ops::sum(ops::max_pool2d(x)).backward();
  for (std::size_t wy = 0; wy < 2; ++wy)
    for (std::size_t wx = 0; wx < 2; ++wx) {
      double total = 0;
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) {
          const double g = x.grad()[(2 * wy + a) * 4 + 2 * wx + b];
          EXPECT_TRUE(g == 0.0 || g == 1.0);
          total += g;
        }
      EXPECT_EQ(total, 1.0);
    }
}

TEST(MaxPool2d, TieRoutesToFirstElement) {
  Tensor<double> x(Shape{2, 2, 1}, {3, 3, 3, 1}, true);
  ops::sum(ops::max_pool2d(x)).backward();
  expect_values(Tensor<double>(Shape{4}, std::vector<double>(x.grad().begin(), x.grad().end())), {1, 0, 0, 0});
}

TEST(BilinearResize, ConstantAndIdentity) {
  const auto c = ops::bilinear_resize(Tensor<double>::full({3, 5, 2}, 0.75), 7, 2);
  EXPECT_EQ(c.shape(), (Shape{7, 2, 2}));
  for (double v : c.data()) EXPECT_NEAR(v, 0.75, 1e-15);
  const auto x = random_tensor(6, {4, 3, 2});
  const auto same = ops::bilinear_resize(x, 4, 3);
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(same[i], x[i]);
}

TEST(BilinearResize, HalfPixelCenters) {
  // 1-D row [0, 1] upsampled to 4: centers map to -0.25, 0.25, 0.75, 1.25,
  // clamped to [0, 1].
  const auto y = ops::bilinear_resize(Tensor<double>(Shape{1, 2, 1}, {0, 1}), 1, 4);
  expect_values(y, {0, 0.25, 0.75, 1}, 1e-15);
  // 2x downsample averages each pair.
  const auto d = ops::bilinear_resize(Tensor<double>(Shape{1, 4, 1}, {1, 3, 5, 9}), 1, 2);
  expect_values(d, {2, 7}, 1e-15);
}

TEST(Backward, ScalarExamples) {
  auto x = Tensor<double>::scalar(3.0, true);
  ops::mul(x, x).backward();
  EXPECT_EQ(x.grad()[0], 6.0);

  auto a = random_tensor(3, {2, 3});
  a.set_requires_grad(true);
  ops::sum(a).backward();
  for (double g : a.grad()) EXPECT_EQ(g, 1.0);

  // Accumulates across calls until the caller zeroes.
  ops::sum(a).backward();
  for (double g : a.grad()) EXPECT_EQ(g, 2.0);
  a.zero_grad();
  for (double g : a.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, NonScalarIsContractError) {
  auto a = random_tensor(3, {2, 3});
  a.set_requires_grad(true);
  EXPECT_THROW(ops::scale(a, 2.0).backward(), rsb::ContractError);
}

TEST(Backward, NoGradModeRecordsNothing) {
  auto a = random_tensor(3, {2, 2});
  a.set_requires_grad(true);
  rsb::NoGradGuard guard;
  EXPECT_FALSE(ops::sum(a).requires_grad());
}

TEST(GradCheck, LinearFunctionIsExact) {
  std::vector<Tensor<double>> in{random_tensor(1, {3, 4})};
  const auto w = random_tensor(2, {3, 4});
  const auto report = rsb::grad_check([&](const auto& v) { return ops::sum(ops::mul(v[0], w)); }, in);
  EXPECT_EQ(report.checked, 12u);
  EXPECT_LE(report.max_relative_error, 1e-10);
}

TEST(GradCheck, SoftmaxScalar) {
  std::vector<Tensor<double>> in{random_tensor(5, {4, 6}, -2, 2)};
  const auto w = random_tensor(6, {4, 6});
  const auto report =
      rsb::grad_check([&](const auto& v) { return ops::sum(ops::mul(ops::softmax_lastdim(v[0]), w)); }, in);
  EXPECT_EQ(report.skipped, 0u);
  EXPECT_LE(report.max_relative_error, 1e-6);
}

TEST(GradCheck, MaxPoolTieIsFlaggedAndSkipped) {
  std::vector<Tensor<double>> in{Tensor<double>(Shape{2, 2, 1}, {0.5, 0.5, 0.1, 0.2})};
  const auto report = rsb::grad_check([](const auto& v) { return ops::sum(ops::max_pool2d(v[0])); }, in);
  EXPECT_EQ(report.skipped, 2u);
  EXPECT_EQ(report.checked, 2u);
  EXPECT_LE(report.max_relative_error, 1e-10);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // exp routed through a deliberately wrong derivative.
  std::vector<Tensor<double>> in{random_tensor(8, {5}, 0.1, 1.0)};
  auto bad_square = [](const Tensor<double>& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
    return rsb::make_result<double>("bad_square", x.shape(), std::move(out), {&x}, [](rsb::detail::Node<double>& self) {
      if (auto* g = rsb::parent_grad(self, 0))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * self.parents[0]->data[i];
    });
  };
  const auto report = rsb::grad_check([&](const auto& v) { return ops::sum(bad_square(v[0])); }, in);
  EXPECT_NEAR(report.max_relative_error, 0.5, 1e-6);
}

TEST(GradientSuite, EveryPrimitiveWithinTolerance) {
  const auto results = rsb::numerics_gradient_suite(100, 7, 1e-6);
  for (const auto& r : results) {
    EXPECT_TRUE(r.passed()) << r.name << ": max rel err " << r.max_relative_error << " over " << r.checked
                            << " elements (" << r.skipped << " skipped)";
    // Only the piecewise-linear primitives may hit kinks at all.
    if (r.name != "relu" && r.name != "abs" && r.name != "clamp" && r.name != "max_pool2d") {
      EXPECT_EQ(r.skipped, 0u) << r.name;
    }
  }
}

TEST(Determinism, ForwardIsBitIdentical) {
  const auto x = random_tensor(1, {6, 6, 3});
  const auto k = random_tensor(2, {3, 3, 3, 4});
  const auto a = ops::bilinear_resize(ops::gelu(ops::conv2d(x, k)), 9, 11);
  const auto b = ops::bilinear_resize(ops::gelu(ops::conv2d(x, k)), 9, 11);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Structural, ConcatSliceSplit) {
  Tensor<double> a(Shape{2, 2}, {1, 2, 3, 4});
  Tensor<double> b(Shape{2, 1}, {5, 6});
  expect_values(ops::concat(std::vector<Tensor<double>>{a, b}, 1), {1, 2, 5, 3, 4, 6});
  expect_values(ops::concat(std::vector<Tensor<double>>{a, a}, 0), {1, 2, 3, 4, 1, 2, 3, 4});
  expect_values(ops::slice(a, 1, 1, 1), {2, 4});
  const auto parts = ops::split(Tensor<double>(Shape{4, 1}, {1, 2, 3, 4}), 0, {1, 3});
  expect_values(parts[1], {2, 3, 4});
  EXPECT_THROW(ops::split(a, 0, {1, 2}), rsb::ShapeError);
}
