#include <cmath>

#include "test_util.hpp"
#include "tint/aux_ops.hpp"

namespace tint {
namespace {

using testing::dot;
using testing::expect_close;
using testing::numeric_gradient;
using testing::random_tensor;

AttnParams random_attn(std::size_t D, std::size_t H, std::mt19937_64& rng, float scale = 0.5f) {
  AttnParams p;
  for (LinearParams* l : {&p.q, &p.k, &p.v, &p.o}) {
    l->W = random_tensor(D, D, rng, scale);
    l->b = random_tensor(1, D, rng, 0.1f);
  }
  p.alibi_slopes = Tensor({1, H});
  return p;
}

// ---- linear ----------------------------------------------------------------

TEST(Linear, ForwardHandValues) {
  EXPECT_TRUE(linear_fwd({Tensor::identity(2), Tensor({1, 2})}, Tensor::row({3, 5}))
                  .bitwise_equal(Tensor::row({3, 5})));
  const Tensor y = linear_fwd({Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::row({1, -1})},
                              Tensor::row({1, 1}));
  EXPECT_EQ(y[0], 4.0f);
  EXPECT_EQ(y[1], 6.0f);
  const Tensor c = linear_fwd({Tensor({1, 3}), Tensor::row({7})}, Tensor::row({1, 2, 3}));
  EXPECT_EQ(c[0], 7.0f);
}

TEST(Linear, ForwardShapeMismatch) {
  EXPECT_THROW(linear_fwd({Tensor({2, 3}), Tensor({1, 2})}, Tensor::row({1, 2})),
               DimensionError);
}

TEST(Linear, BackwardHandValues) {
  EXPECT_TRUE(linear_bwd(Tensor::identity(2), Tensor::row({1, 2})).bitwise_equal(Tensor::row({1, 2})));
  const Tensor swap = linear_bwd(Tensor::from_rows({{0, 1}, {1, 0}}), Tensor::row({3, 9}));
  EXPECT_EQ(swap[0], 9.0f);
  EXPECT_EQ(swap[1], 3.0f);
  const Tensor col = linear_bwd(Tensor::from_rows({{1, 2}, {3, 4}}), Tensor::row({1, 0}));
  EXPECT_EQ(col[0], 1.0f);
  EXPECT_EQ(col[1], 2.0f);
}

TEST(Linear, DescentHandValues) {
  LinearParams p{Tensor({2, 2}), Tensor({1, 2})};
  const LinearParams same = linear_desc(p, Tensor::row({1, 2}), Tensor::row({3, 4}), 0.0f);
  EXPECT_TRUE(same.W.bitwise_equal(p.W));
  EXPECT_TRUE(same.b.bitwise_equal(p.b));

  const LinearParams one = linear_desc(p, Tensor::row({1, 0}), Tensor::row({1, 0}), 1.0f);
  EXPECT_TRUE(one.W.bitwise_equal(Tensor::from_rows({{-1, 0}, {0, 0}})));
  EXPECT_TRUE(one.b.bitwise_equal(Tensor::row({-1, 0})));

  const LinearParams two = linear_desc(p, Tensor::from_rows({{1, 0}, {1, 0}}),
                                       Tensor::from_rows({{1, 0}, {1, 0}}), 1.0f);
  EXPECT_TRUE(two.W.bitwise_equal(scale(one.W, 2.0f)));
}

TEST(Linear, BackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  const LinearParams p{random_tensor(8, 8, rng), random_tensor(1, 8, rng)};
  const Tensor x = random_tensor(3, 8, rng);
  const Tensor dy = random_tensor(3, 8, rng);
  auto loss = [&](const Tensor& xi) { return dot(dy, linear_fwd(p, xi)); };
  expect_close(linear_bwd(p.W, dy), numeric_gradient(x, loss), 1e-4);
}

// ---- attention ---------------------------------------------------------------

TEST(Attention, ZeroQueryKeyGivesUniformMean) {
  std::mt19937_64 rng(11);
  AttnParams p = random_attn(4, 1, rng);
  p.q = {Tensor({4, 4}), Tensor({1, 4})};
  p.k = {Tensor({4, 4}), Tensor({1, 4})};
  const Tensor x = random_tensor(3, 4, rng);
  const AttnForward f = attn_fwd(p, 1, x, Mask::causal(3));
  const Tensor v = linear_fwd(p.v, x);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_NEAR(f.y(2, c), (v(0, c) + v(1, c) + v(2, c)) / 3.0f, 1e-6f);
    EXPECT_NEAR(f.y(1, c), (v(0, c) + v(1, c)) / 2.0f, 1e-6f);
    EXPECT_EQ(f.y(0, c), v(0, c));
  }
}

TEST(Attention, TwoTokenHandMixture) {
  AttnParams p;
  p.q = {Tensor::identity(2), Tensor({1, 2})};
  p.k = {Tensor::identity(2), Tensor({1, 2})};
  p.v = {Tensor::identity(2), Tensor({1, 2})};
  p.o = {Tensor::identity(2), Tensor({1, 2})};
  p.alibi_slopes = Tensor({1, 1});
  const Tensor x = Tensor::from_rows({{1, 0}, {0, 2}});
  const AttnForward f = attn_fwd(p, 1, x, Mask::full(2, 2));
  // Row 0 logits: [1, 0]; row 1 logits: [0, 4].
  const double a0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
  const double a1 = 1.0 / (1.0 + std::exp(4.0));
  EXPECT_NEAR(f.y(0, 0), a0 * 1.0, 1e-6);
  EXPECT_NEAR(f.y(0, 1), (1 - a0) * 2.0, 1e-6);
  EXPECT_NEAR(f.y(1, 0), a1 * 1.0, 1e-6);
  EXPECT_NEAR(f.y(1, 1), (1 - a1) * 2.0, 1e-6);
}

TEST(Attention, ZeroSlopeAlibiIsBitwiseVanilla) {
  std::mt19937_64 rng(12);
  AttnParams p = random_attn(8, 2, rng);
  const Tensor x = random_tensor(5, 8, rng);
  const AttnForward plain = attn_fwd(p, 2, x, Mask::causal(5));
  p.alibi_slopes = Tensor({1, 2});
  const AttnForward zero = attn_fwd(p, 2, x, Mask::causal(5));
  EXPECT_TRUE(plain.y.bitwise_equal(zero.y));
}

TEST(Attention, AlibiShiftsScoresTowardRecentKeys) {
  std::mt19937_64 rng(13);
  AttnParams p = random_attn(4, 1, rng);
  p.q = {Tensor({4, 4}), Tensor({1, 4})};
  p.k = {Tensor({4, 4}), Tensor({1, 4})};
  p.alibi_slopes = Tensor::row({std::log(2.0f)});
  const AttnForward f = attn_fwd(p, 1, random_tensor(2, 4, rng), Mask::causal(2));
  // Logits for row 1: [-ln 2, 0] -> [1/3, 2/3].
  EXPECT_NEAR(f.cache.scores[0](1, 0), 1.0f / 3.0f, 1e-6f);
  EXPECT_NEAR(f.cache.scores[0](1, 1), 2.0f / 3.0f, 1e-6f);
}

TEST(Attention, HeadCountMustDivideWidth) {
  std::mt19937_64 rng(14);
  const AttnParams p = random_attn(6, 4, rng);
  EXPECT_THROW(attn_fwd(p, 4, random_tensor(2, 6, rng), Mask::causal(2)), DimensionError);
}

TEST(Attention, ExactBackwardMatchesFiniteDifferences) {
  for (std::size_t heads : {1u, 2u}) {
    std::mt19937_64 rng(15 + heads);
    AttnParams p = random_attn(8, heads, rng);
    if (heads == 2) p.alibi_slopes = Tensor::row({0.5f, 0.25f});
    const Tensor x = random_tensor(3, 8, rng);
    const Tensor dy = random_tensor(3, 8, rng);
    const Mask mask = Mask::causal(3);
    const AttnForward f = attn_fwd(p, heads, x, mask);
    const AttnGrads g = attn_bwd_exact(p, f.cache, dy);
    auto loss = [&](const Tensor& xi) { return dot(dy, attn_fwd(p, heads, xi, mask).y); };
    expect_close(g.dx, numeric_gradient(x, loss), 1e-3);

    // Parameter gradients: perturb W_Q and check ⟨dq, ·⟩ chain via linear_grads.
    const LinearParams gq = linear_grads(x, g.dq);
    auto loss_wq = [&](const Tensor& wq) {
      AttnParams pp = p;
      pp.q.W = wq;
      return dot(dy, attn_fwd(pp, heads, x, mask).y);
    };
    expect_close(gq.W, numeric_gradient(p.q.W, loss_wq), 1e-3);
  }
}

TEST(Attention, ExactBackwardOfZeroGradientIsZero) {
  std::mt19937_64 rng(16);
  const AttnParams p = random_attn(8, 2, rng);
  const AttnForward f = attn_fwd(p, 2, random_tensor(4, 8, rng), Mask::causal(4));
  const AttnGrads g = attn_bwd_exact(p, f.cache, Tensor({4, 8}));
  EXPECT_EQ(max_abs(g.dx), 0.0f);
  EXPECT_EQ(max_abs(g.dq), 0.0f);
  EXPECT_EQ(max_abs(g.dv), 0.0f);
}

// Builds a cache whose scores are one-hot (the diagonal) by using huge query/key gains.
AttnForward hard_attention(const AttnParams& base, const Tensor& x, float gain,
                           AttnParams& out_params) {
  out_params = base;
  out_params.q = {scale(Tensor::identity(x.cols()), gain), Tensor({1, x.cols()})};
  out_params.k = {Tensor::identity(x.cols()), Tensor({1, x.cols()})};
  return attn_fwd(out_params, 1, x, Mask::full(x.rows(), x.rows()));
}

TEST(Attention, HardScoresMakeApproxEqualExact) {
  std::mt19937_64 rng(17);
  const AttnParams base = random_attn(4, 1, rng);
  // Orthogonal unit-ish tokens so that the diagonal dominates.
  const Tensor x = Tensor::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
  AttnParams p;
  const AttnForward f = hard_attention(base, x, 200.0f, p);
  EXPECT_EQ(epsilon_hardness(f.cache.scores), 0.0f);
  const Tensor dy = random_tensor(3, 4, rng);
  const AttnGrads exact = attn_bwd_exact(p, f.cache, dy);
  const AttnGrads approx = attn_bwd_approx(p, f.cache.scores, dy);
  EXPECT_EQ(max_abs(exact.dq), 0.0f);
  EXPECT_EQ(max_abs(exact.dk), 0.0f);
  EXPECT_TRUE(approx.dx.bitwise_equal(exact.dx));
  EXPECT_TRUE(approx.dx.bitwise_equal(linear_bwd(p.v.W, dy)));
}

TEST(Attention, UniformScoresAverageGradients) {
  const Tensor half = Tensor::from_rows({{0.5f, 0.5f}, {0.5f, 0.5f}});
  const Tensor dy = Tensor::from_rows({{1, 2}, {3, 6}});
  const Tensor dv = attn_value_grad({half}, dy);
  EXPECT_TRUE(dv.bitwise_equal(Tensor::from_rows({{2, 4}, {2, 4}})));
}

TEST(Attention, ValueGradientUsesScoreTranspose) {
  const Tensor a = Tensor::from_rows({{1.0f, 0.0f}, {0.25f, 0.75f}});
  const Tensor dy = Tensor::from_rows({{1}, {2}});
  const Tensor dv = attn_value_grad({a}, dy);
  EXPECT_FLOAT_EQ(dv[0], 1.0f * 1 + 0.25f * 2);
  EXPECT_FLOAT_EQ(dv[1], 0.75f * 2);
}

TEST(Attention, ValueDescent) {
  std::mt19937_64 rng(18);
  const AttnParams p = random_attn(4, 1, rng);
  const Tensor x = random_tensor(2, 4, rng);
  const Tensor dy = random_tensor(2, 4, rng);
  const Tensor eye = Tensor::identity(2);
  const AttnParams same = attn_value_desc(p, x, {eye}, dy, 0.0f);
  EXPECT_TRUE(same.v.W.bitwise_equal(p.v.W));
  const AttnParams upd = attn_value_desc(p, x, {eye}, dy, 0.1f);
  const LinearParams lin = linear_desc(p.v, x, dy, 0.1f);
  EXPECT_TRUE(upd.v.W.bitwise_equal(lin.W));
  EXPECT_TRUE(upd.v.b.bitwise_equal(lin.b));
  EXPECT_TRUE(upd.q.W.bitwise_equal(p.q.W));
  EXPECT_TRUE(upd.k.W.bitwise_equal(p.k.W));

  const Tensor half = Tensor::from_rows({{0.5f, 0.5f}, {0.5f, 0.5f}});
  const AttnParams avg = attn_value_desc(p, x, {half}, dy, 1.0f);
  const Tensor mean_dy = scale(add(dy.row_copy(0), dy.row_copy(1)), 0.5f);
  Tensor want = p.v.W;
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) want(i, j) -= mean_dy[i] * x(t, j);
  testing::expect_tensor_near(avg.v.W, want, 1e-6f);
}

TEST(Attention, ApproxGapShrinksLinearlyWithHardness) {
  // A steep positional slope makes every causal row nearly one-hot on its own
  // position while the projection weights stay fixed.
  std::mt19937_64 rng(19);
  AttnParams p = random_attn(8, 1, rng, 0.3f);
  const Tensor x = random_tensor(5, 8, rng);
  const Tensor dy = random_tensor(5, 8, rng);
  std::vector<double> gaps, eps;
  for (double target : {1e-2, 1e-3}) {
    p.alibi_slopes = Tensor::row({static_cast<float>(std::log(1.0 / target))});
    const AttnForward f = attn_fwd(p, 1, x, Mask::causal(5));
    eps.push_back(epsilon_hardness(f.cache.scores));
    const AttnGrads exact = attn_bwd_exact(p, f.cache, dy);
    const AttnGrads approx = attn_bwd_approx(p, f.cache.scores, dy);
    gaps.push_back(l2_norm(sub(exact.dx, approx.dx)));
  }
  const double eps_ratio = eps[0] / eps[1];
  EXPECT_GT(eps_ratio, 8.0);
  EXPECT_NEAR(gaps[0] / gaps[1], eps_ratio, 0.15 * eps_ratio);
}

TEST(Attention, EpsilonHardnessExamples) {
  EXPECT_EQ(epsilon_hardness({Tensor::identity(3)}), 0.0f);
  Tensor uniform({4, 4});
  for (std::size_t i = 0; i < 16; ++i) uniform[i] = 0.25f;
  EXPECT_FLOAT_EQ(epsilon_hardness({uniform}), 0.75f);
  const Tensor mixed = Tensor::from_rows({{0.9f, 0.1f}, {0.0f, 1.0f}});
  EXPECT_NEAR(epsilon_hardness({mixed}), 0.1f, 1e-7f);
}

// ---- normalization --------------------------------------------------------------

NormParams unit_norm(std::size_t D) {
  NormParams p{Tensor({1, D}), Tensor({1, D})};
  for (std::size_t i = 0; i < D; ++i) p.gamma[i] = 1.0f;
  return p;
}

TEST(Norm, ForwardHandValues) {
  const NormForward f = norm_fwd(unit_norm(2), Tensor::row({1, -1}), NormKind::layernorm);
  EXPECT_EQ(f.z[0], 1.0f);
  EXPECT_EQ(f.z[1], -1.0f);
  EXPECT_EQ(f.mu[0], 0.0f);
  EXPECT_EQ(f.sigma[0], 1.0f);
  EXPECT_TRUE(f.y.bitwise_equal(f.z));

  const NormForward r = norm_fwd(unit_norm(2), Tensor::row({3, 4}), NormKind::rmsnorm);
  const double rms = 5.0 / std::sqrt(2.0);
  EXPECT_NEAR(r.z[0], 3.0 / rms, 1e-6);
  EXPECT_NEAR(r.z[1], 4.0 / rms, 1e-6);
  EXPECT_NEAR(r.z[0], 0.8485281, 1e-6);
  EXPECT_NEAR(r.z[1], 1.1313708, 1e-6);
}

TEST(Norm, ConstantInputIsDegenerate) {
  EXPECT_THROW(norm_fwd(unit_norm(3), Tensor::row({2, 2, 2}), NormKind::layernorm),
               DegenerateInput);
  EXPECT_THROW(norm_fwd(unit_norm(3), Tensor::row({0, 0, 0}), NormKind::rmsnorm),
               DegenerateInput);
}

TEST(Norm, ExactBackwardMatchesFiniteDifferences) {
  for (NormKind kind : {NormKind::layernorm, NormKind::rmsnorm}) {
    std::mt19937_64 rng(20);
    NormParams p{random_tensor(1, 8, rng), random_tensor(1, 8, rng)};
    const Tensor x = random_tensor(3, 8, rng);
    const Tensor dy = random_tensor(3, 8, rng);
    const NormForward f = norm_fwd(p, x, kind);
    auto loss = [&](const Tensor& xi) { return dot(dy, norm_fwd(p, xi, kind).y); };
    expect_close(ln_bwd_exact(p.gamma, dy, f.z, f.sigma, kind), numeric_gradient(x, loss), 1e-3);
  }
}

TEST(Norm, TwoDimensionalExampleHasZeroGradient) {
  // For D = 2 the normalized output is ±1 and locally constant in x.
  const Tensor x = Tensor::row({1, -1});
  const NormForward f = norm_fwd(unit_norm(2), x, NormKind::layernorm);
  const Tensor dx = ln_bwd_exact(unit_norm(2).gamma, Tensor::row({1, 0}), f.z, f.sigma,
                                 NormKind::layernorm);
  EXPECT_NEAR(dx[0], 0.0f, 1e-7f);
  EXPECT_NEAR(dx[1], 0.0f, 1e-7f);
  auto loss = [&](const Tensor& xi) {
    return dot(Tensor::row({1, 0}), norm_fwd(unit_norm(2), xi, NormKind::layernorm).y);
  };
  expect_close(dx, numeric_gradient(x, loss), 1e-4);
  const Tensor approx = ln_bwd_approx(unit_norm(2).gamma, Tensor::row({1, 0}), x, 1e-3f,
                                      NormKind::layernorm);
  EXPECT_NEAR(approx[0], 0.0f, 2e-3f);
  EXPECT_NEAR(approx[1], 0.0f, 2e-3f);
}

TEST(Norm, ExactBackwardIsMeanFree) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    NormParams p{random_tensor(1, 8, rng), random_tensor(1, 8, rng)};
    const Tensor x = random_tensor(1, 8, rng);
    const NormForward f = norm_fwd(p, x, NormKind::layernorm);
    const Tensor dx = ln_bwd_exact(p.gamma, random_tensor(1, 8, rng), f.z, f.sigma,
                                   NormKind::layernorm);
    double total = 0.0;
    for (float v : dx.values()) total += v;
    EXPECT_NEAR(total, 0.0, 1e-5);
  }
  const Tensor zero = ln_bwd_exact(unit_norm(4).gamma, Tensor({1, 4}), Tensor::row({1, -1, 1, -1}),
                                   Tensor::row({1}), NormKind::layernorm);
  EXPECT_EQ(max_abs(zero), 0.0f);
}

TEST(Norm, ApproxBackwardOfZeroIsExactlyZero) {
  std::mt19937_64 rng(22);
  const Tensor x = random_tensor(2, 8, rng);
  EXPECT_EQ(max_abs(ln_bwd_approx(unit_norm(8).gamma, Tensor({2, 8}), x, 1e-3f,
                                  NormKind::layernorm)),
            0.0f);
}

TEST(Norm, ApproxBackwardConvergesToExact) {
  std::mt19937_64 rng(23);
  NormParams p{random_tensor(1, 8, rng), random_tensor(1, 8, rng)};
  const Tensor x = random_tensor(1, 8, rng);
  const Tensor dy = random_tensor(1, 8, rng);
  const NormForward f = norm_fwd(p, x, NormKind::layernorm);
  const Tensor exact = ln_bwd_exact(p.gamma, dy, f.z, f.sigma, NormKind::layernorm);
  const Tensor approx = ln_bwd_approx(p.gamma, dy, x, 1e-3f, NormKind::layernorm);
  EXPECT_LT(max_abs_diff(approx, exact), 2e-2f * std::max(1.0f, max_abs(exact)));
}

TEST(Norm, DescentHandValues) {
  NormParams p{Tensor::row({1, 1}), Tensor::row({0.5f, 0.5f})};
  const NormParams same = ln_desc(p, Tensor::row({1, -1}), Tensor::row({1, 1}), 0.0f, true);
  EXPECT_TRUE(same.beta.bitwise_equal(p.beta));
  const NormParams bias = ln_desc(p, Tensor::row({1, -1}), Tensor::row({1, 1}), 1.0f, false);
  EXPECT_TRUE(bias.beta.bitwise_equal(Tensor::row({-0.5f, -0.5f})));
  EXPECT_TRUE(bias.gamma.bitwise_equal(p.gamma));
  const NormParams both = ln_desc(p, Tensor::row({1, -1}), Tensor::row({1, 1}), 1.0f, true);
  EXPECT_TRUE(both.gamma.bitwise_equal(Tensor::row({0, 2})));
}

// ---- activations -------------------------------------------------------------------

TEST(ActivationGrad, ApproxOfZeroIsZero) {
  std::mt19937_64 rng(24);
  const Tensor x = random_tensor(2, 5, rng);
  EXPECT_EQ(max_abs(act_bwd_approx(Tensor({2, 5}), x, 1e-3f, Activation::gelu)), 0.0f);
}

TEST(ActivationGrad, GeluApproxMatchesDerivative) {
  const Tensor g = act_bwd_approx(Tensor::row({1}), Tensor::row({0.3f}), 1e-4f, Activation::gelu);
  EXPECT_NEAR(g[0], gelu_derivative(0.3f), 1e-3f);
}

TEST(ActivationGrad, AlignedReluHasNoGap) {
  std::mt19937_64 rng(25);
  Tensor x = random_tensor(4, 8, rng);
  Tensor dy = random_tensor(4, 8, rng);
  const float eps = 1e-3f;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (std::fabs(x[i]) <= 2 * eps * std::fabs(dy[i])) x[i] = x[i] >= 0 ? 1.0f : -1.0f;
  }
  const Tensor approx = act_bwd_approx(dy, x, eps, Activation::relu);
  const Tensor exact = act_bwd_exact(dy, x, Activation::relu);
  EXPECT_LT(max_abs_diff(approx, exact), 1e-3f * max_abs(dy));
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (x[i] < 0) EXPECT_EQ(approx[i], 0.0f);
  }
}

TEST(ActivationGrad, ExactMatchesFiniteDifferences) {
  std::mt19937_64 rng(26);
  const Tensor x = random_tensor(2, 8, rng);
  const Tensor dy = random_tensor(2, 8, rng);
  auto loss = [&](const Tensor& xi) { return dot(dy, activation_eval(xi, Activation::gelu, false)); };
  expect_close(act_bwd_exact(dy, x, Activation::gelu), numeric_gradient(x, loss), 2e-3);
}

// ---- GLU -------------------------------------------------------------------------------

FfnParams random_glu(std::size_t D, std::mt19937_64& rng) {
  FfnParams p;
  for (LinearParams* l : {&p.gate_w, &p.gate_v, &p.gate_o}) {
    l->W = random_tensor(D, D, rng, 0.5f);
    l->b = random_tensor(1, D, rng, 0.1f);
  }
  return p;
}

TEST(Glu, SaturatedGateReducesToLinear) {
  std::mt19937_64 rng(27);
  FfnParams p = random_glu(3, rng);
  p.gate_v.W = Tensor({3, 3});
  p.gate_v.b = Tensor::row({1, 1, 1});
  const Tensor x = random_tensor(2, 3, rng);
  const GluForward f = glu_fwd(p, x, Activation::relu);
  const Tensor want = linear_fwd(p.gate_o, linear_fwd(p.gate_w, x));
  testing::expect_tensor_near(f.out, want, 1e-6f);
}

TEST(Glu, ZeroLinearBranchGivesOutputBias) {
  std::mt19937_64 rng(28);
  FfnParams p = random_glu(3, rng);
  p.gate_w.W = Tensor({3, 3});
  p.gate_w.b = Tensor({1, 3});
  const GluForward f = glu_fwd(p, random_tensor(2, 3, rng), Activation::gelu);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(f.out(t, i), p.gate_o.b[i]);
}

TEST(Glu, TwoDimensionalHandInstance) {
  FfnParams p;
  p.gate_w = {Tensor::from_rows({{1, 0}, {0, 2}}), Tensor::row({0, 1})};
  p.gate_v = {Tensor::from_rows({{0, 1}, {1, 0}}), Tensor::row({0.5f, 0})};
  p.gate_o = {Tensor::identity(2), Tensor({1, 2})};
  const Tensor x = Tensor::row({0.5f, -1.0f});
  const GluForward f = glu_fwd(p, x, Activation::gelu);
  auto g = [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); };
  EXPECT_NEAR(f.out[0], 0.5 * g(-1.0 + 0.5), 1e-6);
  EXPECT_NEAR(f.out[1], (-2.0 + 1.0) * g(0.5), 1e-6);
}

TEST(Glu, ExactBackwardMatchesFiniteDifferences) {
  std::mt19937_64 rng(29);
  const FfnParams p = random_glu(8, rng);
  const Tensor x = random_tensor(2, 8, rng);
  const Tensor dout = random_tensor(2, 8, rng);
  const GluGrads g = glu_bwd_exact(p, glu_fwd(p, x, Activation::gelu), dout, Activation::gelu);
  auto loss = [&](const Tensor& xi) { return dot(dout, glu_fwd(p, xi, Activation::gelu).out); };
  expect_close(g.dx, numeric_gradient(x, loss), 2e-3);
}

TEST(Glu, ApproxOfZeroIsZero) {
  std::mt19937_64 rng(30);
  const FfnParams p = random_glu(4, rng);
  const GluForward f = glu_fwd(p, random_tensor(2, 4, rng), Activation::gelu);
  EXPECT_EQ(max_abs(glu_bwd_approx(p, f, Tensor({2, 4}), 1e-3f, Activation::gelu).dx), 0.0f);
}

TEST(Glu, AlignedReluGateMatchesExact) {
  std::mt19937_64 rng(31);
  FfnParams p = random_glu(4, rng);
  const Tensor x = random_tensor(3, 4, rng);
  const Tensor dout = random_tensor(3, 4, rng);
  const float eps = 1e-3f;
  GluForward f = glu_fwd(p, x, Activation::relu);
  const Tensor dy = linear_bwd(p.gate_o.W, dout);
  // Push gate pre-activations away from zero relative to eps·dy.
  for (std::size_t i = 0; i < f.gate.numel(); ++i) {
    if (std::fabs(f.gate[i]) <= 2 * eps * std::fabs(dy[i])) {
      p.gate_v.b[i % 4] += 1.0f;
      f = glu_fwd(p, x, Activation::relu);
    }
  }
  const GluGrads exact = glu_bwd_exact(p, f, dout, Activation::relu);
  const GluGrads approx = glu_bwd_approx(p, f, dout, eps, Activation::relu);
  EXPECT_LT(max_abs_diff(approx.dx, exact.dx), 1e-3f * std::max(1.0f, max_abs(exact.dx)));
}

TEST(Glu, DescentUsesSurrogateGradients) {
  std::mt19937_64 rng(32);
  const FfnParams p = random_glu(4, rng);
  const Tensor x = random_tensor(2, 4, rng);
  const Tensor dout = random_tensor(2, 4, rng);
  const GluForward f = glu_fwd(p, x, Activation::gelu);
  const GluGrads g = glu_bwd_approx(p, f, dout, 1e-3f, Activation::gelu);
  const FfnParams upd = glu_desc(p, x, f, g, dout, 0.1f);
  EXPECT_TRUE(upd.gate_v.W.bitwise_equal(linear_desc(p.gate_v, x, g.d_gate, 0.1f).W));
  EXPECT_TRUE(upd.gate_w.W.bitwise_equal(linear_desc(p.gate_w, x, g.d_linear, 0.1f).W));
  EXPECT_TRUE(upd.gate_o.W.bitwise_equal(linear_desc(p.gate_o, f.y, dout, 0.1f).W));
}

// ---- output head -----------------------------------------------------------------------

TEST(LmHead, UniformSoftmaxExample) {
  const Tensor g = lm_head_grad(Tensor::identity(2), Tensor::row({0, 0}), Tensor::row({1, 0}));
  EXPECT_FLOAT_EQ(g[0], -0.5f);
  EXPECT_FLOAT_EQ(g[1], 0.5f);
}

TEST(LmHead, GradientVanishesAtOptimum) {
  std::mt19937_64 rng(33);
  const Tensor E = random_tensor(4, 3, rng);
  const Tensor x = random_tensor(1, 3, rng);
  const Tensor q = softmax_rows(matmul_a_bt(x, E));
  EXPECT_LT(max_abs(lm_head_grad(E, x, q)), 1e-6f);
}

TEST(LmHead, UnnormalizedTargetRejected) {
  EXPECT_THROW(lm_head_grad(Tensor::identity(2), Tensor::row({0, 0}), Tensor::row({1, 1})),
               PreconditionError);
}

TEST(LmHead, MatchesFiniteDifferencesOfLoss) {
  std::mt19937_64 rng(34);
  const Tensor E = random_tensor(4, 6, rng);
  const Tensor x = random_tensor(1, 6, rng);
  const Tensor q = Tensor::row({0, 0, 1, 0});
  auto loss = [&](const Tensor& xi) { return lm_head_loss(E, xi, q); };
  expect_close(lm_head_grad(E, x, q), numeric_gradient(x, loss), 1e-4);
}

}  // namespace
}  // namespace tint
