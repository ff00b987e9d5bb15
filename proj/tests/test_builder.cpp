#include <random>

#include "test_util.hpp"
#include "tint/errors.hpp"
#include "tint/tint_builder.hpp"

namespace tint {
namespace {

AuxConfig toy_config(std::size_t d, std::size_t layers) {
  AuxConfig c;
  c.d_aux = d;
  c.h_aux = 4;
  c.layers = layers;
  c.t_aux = 16;
  c.vocab = 12;
  return c;
}

std::vector<std::uint32_t> random_tokens(std::size_t T, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(vocab - 1));
  std::vector<std::uint32_t> out(T);
  for (auto& t : out) t = pick(rng);
  return out;
}

double worst_relative(const AuxModel& got, const AuxModel& want, std::string* where) {
  std::vector<std::pair<std::string, const Tensor*>> ref;
  want.for_each_tensor([&](const std::string& n, const Tensor& t) { ref.emplace_back(n, &t); });
  double worst = 0.0;
  std::size_t i = 0;
  got.for_each_tensor([&](const std::string& n, const Tensor& t) {
    const Tensor& w = *ref[i++].second;
    EXPECT_EQ(t.shape(), w.shape()) << n;
    if (t.shape() != w.shape() || w.empty()) return;
    const double r = max_abs_diff(t, w) / std::max(1e-6f, max_abs(w));
    if (r > worst) {
      worst = r;
      *where = n;
    }
  });
  return worst;
}

// ---- configuration and counting ------------------------------------------------------

TEST(TinTConfig, DerivedSizes) {
  TinTConfig cfg;
  const AuxConfig aux = toy_config(16, 2);
  EXPECT_EQ(cfg.d_sim(aux), 64u);
  EXPECT_EQ(cfg.h_sim(aux), 4u);
  EXPECT_EQ(cfg.prefix_tokens(aux), 5u);
  EXPECT_EQ(cfg.t_sim(aux), 21u);
  cfg.bias_token = false;
  EXPECT_EQ(cfg.prefix_tokens(aux), 4u);
  cfg.steps = 40;
  cfg.max_depth = 64;
  EXPECT_THROW(cfg.validate(aux), ConfigError);
  cfg.top_layers = 1;
  EXPECT_NO_THROW(cfg.validate(aux));
}

TEST(CountParams, ToyHandFormula) {
  const AuxConfig aux = toy_config(16, 2);
  TinTConfig cfg;
  const ParamCount c = count_params(aux, cfg);
  EXPECT_EQ(c.q_split, 1280u);  // 64²/4 + 4·64
  const std::uint64_t q = 4 * 1280 + 3 * 21 * 64 / 4;
  EXPECT_EQ(c.q, q);
  EXPECT_EQ(c.rows[0].count.total(), 3 * q);
  EXPECT_EQ(c.rows[1].count.total(), 3 * q + 2 * 64 * 4);
  EXPECT_EQ(c.rows[2].count.total(), 6 * q);
  EXPECT_EQ(c.rows[3].count.total(), 1280u + 2 * 64 * 4);
  EXPECT_EQ(c.block.total(), 21 * q + 6 * 64 * 4 + 1280);
  EXPECT_EQ(c.model.total(), 2 * c.block.total());
  EXPECT_EQ(c.closed_form, c.model.total());
  EXPECT_LT(c.c1, 150u);
  EXPECT_LT(c.c2, 150u);
  EXPECT_LT(c.c3, 150u);
}

TEST(CountParams, DegenerateStack) {
  const AuxConfig aux = toy_config(16, 1);
  TinTConfig cfg;
  cfg.stack = 1;
  const ParamCount c = count_params(aux, cfg);
  EXPECT_EQ(c.d_sim, 16u);
  EXPECT_EQ(c.h_sim, 1u);
  EXPECT_EQ(c.q_split, 16u * 16 + 16);
  EXPECT_EQ(c.closed_form, c.model.total());
}

TEST(CountParams, GatedBlockUsesThreeLinears) {
  AuxConfig aux = toy_config(16, 1);
  aux.ffn_kind = FfnKind::glu;
  const ParamCount c = count_params(aux, TinTConfig{});
  EXPECT_EQ(c.block.total(), 24 * c.q + 6 * 64 * 4 + c.q_split);
  EXPECT_EQ(c.closed_form, c.model.total());
}

// ---- stack structure -------------------------------------------------------------------

TEST(BuildTint, StructureForOneStep) {
  const AuxModel model = make_random_model(toy_config(16, 2), 1);
  TinTConfig cfg;
  const TinTStack s = build_tint(model, cfg);
  const std::size_t L = 2;
  EXPECT_EQ(s.count(StackOp::forward), 2 * (4 * L + 1));  // train chain and eval chain
  EXPECT_EQ(s.count(StackOp::loss_grad), 1u);
  EXPECT_EQ(s.count(StackOp::backward), 1 + 4 * L);
  EXPECT_EQ(s.count(StackOp::descent), 4 * L);
  EXPECT_EQ(s.count(StackOp::readout), 1u);
  EXPECT_EQ(s.entries.back().op, StackOp::readout);
  EXPECT_EQ(s.charged_parameters(), count_params(model.config, cfg).model.total());
  const std::string dump = s.dump();
  EXPECT_EQ(static_cast<std::size_t>(std::count(dump.begin(), dump.end(), '\n')),
            s.entries.size() + 1);
}

TEST(BuildTint, TopLayerScheduleTwoSteps) {
  const AuxModel model = make_random_model(toy_config(16, 2), 2);
  TinTConfig cfg;
  cfg.top_layers = 1;
  cfg.steps = 2;
  const TinTStack s = build_tint(model, cfg);
  std::vector<std::size_t> steps;
  for (const StackEntry& e : s.entries) {
    if (e.op != StackOp::descent) continue;
    EXPECT_EQ(e.layer, 1u);
    steps.push_back(e.step);
  }
  EXPECT_EQ(steps, (std::vector<std::size_t>{0, 0, 0, 0, 1, 1, 1, 1}));
  const ParamCount c = count_params(model.config, cfg);
  EXPECT_EQ(s.charged_parameters(),
            c.model.forward + c.block.backward + c.block.descent);
}

TEST(BuildTint, LengthIsAffineInSteps) {
  const AuxModel model = make_random_model(toy_config(8, 2), 3);
  std::vector<std::size_t> len;
  for (std::size_t n : {1, 2, 3}) {
    TinTConfig cfg;
    cfg.steps = n;
    len.push_back(build_tint(model, cfg).entries.size());
  }
  EXPECT_EQ(len[1] - len[0], len[2] - len[1]);
}

TEST(BuildTint, RejectsUnrealizableLayers) {
  const AuxModel model = make_random_model(toy_config(16, 1), 4);
  TinTConfig cfg;
  cfg.stack = 1;  // one simulator head cannot host four auxiliary heads
  EXPECT_THROW(build_tint(model, cfg), ConstructionError);
  cfg.stack = 4;
  cfg.steps = 100;
  EXPECT_THROW(build_tint(model, cfg), ConfigError);
}

// ---- input formatting ------------------------------------------------------------------

TEST(FormatInput, SingleLabelPosition) {
  LossSpec spec;
  spec.mode = LossMode::label;
  const FormattedInput in = format_input(random_tokens(10, 12, 1), 9, spec, AuxMaskKind::causal);
  EXPECT_EQ(std::count(in.loss_flags.begin(), in.loss_flags.end(), 1), 1);
  EXPECT_EQ(in.loss_flags.size(), 10u);
}

TEST(FormatInput, MultiExemplarLabelSpans) {
  LossSpec spec;
  spec.mode = LossMode::label;
  spec.format = LossFormat::multi;
  spec.exemplar_lengths = {3, 3, 3};
  spec.label_len = 1;
  const FormattedInput in = format_input(random_tokens(12, 12, 2), 9, spec, AuxMaskKind::causal);
  const std::vector<std::uint8_t> want = {0, 1, 0, 0, 1, 0, 0, 1, 0, 0, 0, 0};
  EXPECT_EQ(in.loss_flags, want);
}

TEST(FormatInput, EvalMaskAndSegments) {
  LossSpec spec;
  const FormattedInput in = format_input(random_tokens(8, 12, 3), 5, spec, AuxMaskKind::bidirectional);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(in.mask(5, j), j <= 5) << j;
  EXPECT_TRUE(in.mask(0, 4));  // training block is bidirectional here
  EXPECT_EQ(in.segments[4], Segment::train);
  EXPECT_EQ(in.segments[5], Segment::eval);
  EXPECT_THROW(format_input(random_tokens(8, 12, 3), 8, spec, AuxMaskKind::causal), ConfigError);
  EXPECT_THROW(format_input(random_tokens(8, 12, 3), 0, spec, AuxMaskKind::causal), ConfigError);
}

// ---- end-to-end ---------------------------------------------------------------------------

struct E2ECase {
  std::size_t d, layers, steps, T, r, top;
  LossMode mode;
  LossFormat format;
  std::vector<std::size_t> exemplars;
  FfnKind ffn = FfnKind::mlp;
  NormKind norm = NormKind::layernorm;
  PosBias pos = PosBias::none;
  Activation act = Activation::gelu;
  AuxMaskKind aux_mask = AuxMaskKind::causal;
};

void check_against_oracle(const E2ECase& c, std::uint64_t seed) {
  AuxConfig aux = toy_config(c.d, c.layers);
  aux.ffn_kind = c.ffn;
  aux.ln_kind = c.norm;
  aux.pos_bias = c.pos;
  aux.activation = c.act;
  const AuxModel model = make_random_model(aux, seed);
  TinTConfig cfg;
  cfg.eta = 0.05f;
  cfg.steps = c.steps;
  cfg.top_layers = c.top;
  cfg.loss.mode = c.mode;
  cfg.loss.format = c.format;
  cfg.loss.exemplar_lengths = c.exemplars;
  cfg.aux_mask = c.aux_mask;
  const auto tokens = random_tokens(c.T, aux.vocab, seed + 100);

  const SimulationResult sim =
      run_simulation(build_tint(model, cfg), format_input(tokens, c.r, cfg.loss, cfg.aux_mask));
  const FinetuneResult ref = finetune_eval(model, tokens, c.r, cfg.loss, cfg.finetune_options());
  EXPECT_LE(max_abs_diff(sim.eval_logits, ref.eval_logits), 1e-3f);
  std::string where;
  EXPECT_LE(worst_relative(sim.model, ref.model, &where), 1e-4) << where;
}

TEST(RunSimulation, MatchesOracleToyReference) {
  check_against_oracle({16, 2, 1, 12, 8, 0, LossMode::full_context, LossFormat::multi, {}}, 11);
}

TEST(RunSimulation, MatchesOracleAcrossVariants) {
  check_against_oracle({8, 1, 2, 8, 5, 0, LossMode::label, LossFormat::multi, {}}, 12);
  check_against_oracle({8, 2, 1, 8, 6, 1, LossMode::label, LossFormat::single, {3, 3},
                        FfnKind::glu, NormKind::rmsnorm, PosBias::alibi, Activation::relu},
                       13);
  check_against_oracle({16, 2, 2, 10, 6, 0, LossMode::full_context, LossFormat::single, {2, 4},
                        FfnKind::mlp, NormKind::layernorm, PosBias::alibi, Activation::gelu,
                        AuxMaskKind::bidirectional},
                       14);
}

TEST(RunSimulation, ZeroStepSizeIsPlainForward) {
  const AuxModel model = make_random_model(toy_config(16, 2), 21);
  TinTConfig cfg;
  cfg.eta = 0.0f;
  const auto tokens = random_tokens(12, 12, 22);
  const FormattedInput in = format_input(tokens, 8, cfg.loss, cfg.aux_mask);
  const SimulationResult sim = run_simulation(build_tint(model, cfg), in);
  const ModelTrace plain = model_forward(model, tokens, in.mask);
  EXPECT_LE(max_abs_diff(sim.eval_logits, slice_rows(plain.logits, 8, 12)), 1e-4f);
  std::string where;
  EXPECT_EQ(worst_relative(sim.model, model, &where), 0.0) << where;
}

TEST(RunSimulation, Deterministic) {
  const AuxModel model = make_random_model(toy_config(8, 2), 31);
  TinTConfig cfg;
  cfg.eta = 0.1f;
  const auto tokens = random_tokens(8, 12, 32);
  const TinTStack s = build_tint(model, cfg);
  const FormattedInput in = format_input(tokens, 5, cfg.loss, cfg.aux_mask);
  const SimulationResult a = run_simulation(s, in), b = run_simulation(s, in);
  EXPECT_TRUE(a.eval_logits.bitwise_equal(b.eval_logits));
  EXPECT_EQ(a.executed, s.entries.size());
}

}  // namespace
}  // namespace tint
