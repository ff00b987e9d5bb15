#include <cmath>

#include "test_util.hpp"
#include "tint/tensor.hpp"

namespace tint {
namespace {

TEST(Tensor, RejectsNonFiniteAndMismatchedData) {
  EXPECT_THROW(Tensor({2}, {1.0f, NAN}), DimensionError);
  EXPECT_THROW(Tensor({2}, {1.0f, INFINITY}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, {1.0f, 2.0f, 3.0f}), DimensionError);
}

TEST(Matmul, IdentityIsBitwiseExact) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  EXPECT_TRUE(matmul(Tensor::identity(2), a).bitwise_equal(a));
}

TEST(Matmul, HandProduct) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{1}, {1}});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (std::vector<std::size_t>{2, 1}));
  EXPECT_EQ(c[0], 3.0f);
  EXPECT_EQ(c[1], 7.0f);
}

TEST(Matmul, ZeroLeftOperand) {
  std::mt19937_64 rng(1);
  const Tensor c = matmul(Tensor::zeros(2, 3), testing::random_tensor(3, 2, rng));
  EXPECT_EQ(max_abs(c), 0.0f);
  EXPECT_EQ(c.shape(), (std::vector<std::size_t>{2, 2}));
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros(2, 3), Tensor::zeros(2, 3)), DimensionError);
}

TEST(Matmul, TransposedVariantsAgree) {
  std::mt19937_64 rng(2);
  const Tensor a = testing::random_tensor(3, 4, rng);
  const Tensor b = testing::random_tensor(4, 5, rng);
  EXPECT_TRUE(matmul_a_bt(a, transpose(b)).bitwise_equal(matmul(a, b)));
  EXPECT_TRUE(matmul_at_b(transpose(a), b).bitwise_equal(matmul(a, b)));
}

TEST(Matmul, RepeatedRunsAreBitwiseIdentical) {
  std::mt19937_64 rng(3);
  const Tensor a = testing::random_tensor(16, 16, rng);
  const Tensor b = testing::random_tensor(16, 16, rng);
  EXPECT_TRUE(matmul(a, b).bitwise_equal(matmul(a, b)));
}

TEST(Softmax, SymmetricRow) {
  const Tensor s = softmax_rows(Tensor::row({0.0f, 0.0f}));
  EXPECT_FLOAT_EQ(s[0], 0.5f);
  EXPECT_FLOAT_EQ(s[1], 0.5f);
}

TEST(Softmax, ClosedForm) {
  const Tensor s = softmax_rows(Tensor::row({std::log(2.0f), 0.0f}));
  EXPECT_NEAR(s[0], 2.0f / 3.0f, 1e-6f);
  EXPECT_NEAR(s[1], 1.0f / 3.0f, 1e-6f);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  const Tensor s = softmax_rows(Tensor::row({1000.0f, 0.0f}));
  EXPECT_NEAR(s[0], 1.0f, 1e-6f);
  EXPECT_NEAR(s[1], 0.0f, 1e-6f);
}

TEST(Softmax, RowsSumToOneAtExtremes) {
  std::mt19937_64 rng(4);
  Tensor a = testing::random_tensor(20, 7, rng, 1e4f);
  a(0, 0) = 1e4f;
  a(0, 1) = -1e4f;
  const Tensor s = softmax_rows(a);
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double total = 0.0;
    for (float v : s.row_span(i)) {
      EXPECT_GE(v, 0.0f);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(Softmax, MaskedEntriesAreExactlyZero) {
  Mask m = Mask::causal(3);
  const Tensor s = masked_softmax_rows(Tensor::zeros(3, 3), m);
  EXPECT_EQ(s(0, 1), 0.0f);
  EXPECT_EQ(s(0, 0), 1.0f);
  EXPECT_NEAR(s(2, 0), 1.0f / 3.0f, 1e-7f);
  Mask none(1, 2, false);
  EXPECT_EQ(max_abs(masked_softmax_rows(Tensor::zeros(1, 2), none)), 0.0f);
}

TEST(Activation, ReluValuesAndDerivativeAtZero) {
  const Tensor r = activation_eval(Tensor::row({-1.0f, 2.0f}), Activation::relu, false);
  EXPECT_EQ(r[0], 0.0f);
  EXPECT_EQ(r[1], 2.0f);
  const Tensor d = activation_eval(Tensor::row({0.0f}), Activation::relu, true);
  EXPECT_EQ(d[0], 1.0f);
}

TEST(Activation, GeluAtZero) {
  EXPECT_EQ(activation_eval(Tensor::row({0.0f}), Activation::gelu, false)[0], 0.0f);
}

TEST(Activation, GeluDerivativeMatchesCentralDifference) {
  const float step = 1e-4f;
  for (float x = -4.0f; x <= 4.0f; x += 0.125f) {
    const double numeric =
        (static_cast<double>(gelu(x + step)) - gelu(x - step)) /
        (static_cast<double>(x + step) - static_cast<double>(x - step));
    // 1e-5 plus the float32 resolution of the two outputs divided by the step.
    const float y = std::fabs(gelu(x)) + 1e-30f;
    const double resolution = 2.0 * (std::nextafter(y, 2 * y) - y) / (2.0 * step);
    EXPECT_NEAR(gelu_derivative(x), numeric, 1e-5 + resolution) << "x=" << x;
  }
}

TEST(Activation, GeluDerivativeMatchesDoubleCentralDifference) {
  auto g = [](double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); };
  for (float x = -4.0f; x <= 4.0f; x += 0.125f) {
    const double numeric = (g(x + 1e-4) - g(x - 1e-4)) / 2e-4;
    EXPECT_NEAR(gelu_derivative(x), numeric, 1e-5) << "x=" << x;
  }
}

TEST(Activation, UnknownKindIsConfigError) {
  EXPECT_THROW(parse_activation("swish"), ConfigError);
  EXPECT_EQ(parse_activation("gelu"), Activation::gelu);
}

TEST(Tensor, SliceAndWriteRoundtrip) {
  std::mt19937_64 rng(5);
  const Tensor a = testing::random_tensor(4, 6, rng);
  Tensor b({4, 6});
  write_cols(b, 0, slice_cols(a, 0, 2));
  write_cols(b, 2, slice_cols(a, 2, 6));
  EXPECT_TRUE(a.bitwise_equal(b));
  Tensor c({4, 6});
  write_rows(c, 1, slice_rows(a, 1, 4));
  write_rows(c, 0, slice_rows(a, 0, 1));
  EXPECT_TRUE(a.bitwise_equal(c));
}

}  // namespace
}  // namespace tint
