#include "tint/tint_builder.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <tuple>

#include "tint/errors.hpp"

namespace tint {

// ---- configuration -------------------------------------------------------------------

std::size_t TinTConfig::h_sim(const AuxConfig& aux) const {
  return std::min(stack * stack, aux.h_aux);
}

std::size_t TinTConfig::prefix_tokens(const AuxConfig& aux) const {
  return (aux.d_aux + stack - 1) / stack + (bias_token ? 1 : 0);
}

std::size_t TinTConfig::lowest_layer(const AuxConfig& aux) const {
  return lowest_updated_layer(aux, top_layers);
}

void TinTConfig::validate(const AuxConfig& aux) const {
  aux.validate();
  if (stack < 1) throw ConfigError("tint config: stack S must be at least 1");
  if (d_sim(aux) % h_sim(aux) != 0) {
    throw ConfigError("tint config: H_sim=" + std::to_string(h_sim(aux)) +
                      " does not divide D_sim=" + std::to_string(d_sim(aux)));
  }
  if (steps < 1) throw ConfigError("tint config: at least one step is required");
  if (top_layers > aux.layers) {
    throw ConfigError("tint config: top_layers=" + std::to_string(top_layers) + " exceeds " +
                      std::to_string(aux.layers) + " layers");
  }
  for (float e : {eps_ln, eps_act, eps_glu}) {
    if (!(e > 0.0f)) throw ConfigError("tint config: epsilons must be positive");
  }
  const std::size_t depth = steps * (aux.layers - lowest_layer(aux));
  if (depth > max_depth) {
    throw ConfigError("tint config: " + std::to_string(steps) + " steps x " +
                      std::to_string(aux.layers - lowest_layer(aux)) +
                      " updated layers exceeds depth budget " + std::to_string(max_depth));
  }
}

PrefixLayout TinTConfig::layout(const AuxConfig& aux) const {
  return PrefixLayout::make(aux.d_aux, stack, h_sim(aux), bias_token);
}

FinetuneOptions TinTConfig::finetune_options() const {
  FinetuneOptions o;
  o.eta = eta;
  o.steps = steps;
  o.regime = Regime::simulated;
  o.top_layers = top_layers;
  o.eps_ln = eps_ln;
  o.eps_act = eps_act;
  o.eps_glu = eps_glu;
  o.aux_mask = aux_mask;
  o.max_depth = max_depth;
  return o;
}

// ---- parameter counting --------------------------------------------------------------

PhaseCount& PhaseCount::operator+=(const PhaseCount& o) {
  forward += o.forward;
  backward += o.backward;
  descent += o.descent;
  return *this;
}

namespace {

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

PhaseCount scaled(const PhaseCount& c, std::uint64_t k) {
  return {c.forward * k, c.backward * k, c.descent * k};
}

struct Units {
  std::uint64_t q_split, q, dh;
};

Units units(const AuxConfig& aux, const TinTConfig& cfg) {
  const std::uint64_t D = cfg.d_sim(aux), H = cfg.h_sim(aux), T = cfg.t_sim(aux);
  Units u;
  u.q_split = ceil_div(D * D, H) + H * D;
  u.q = 4 * u.q_split + ceil_div(3 * T * D, H);
  u.dh = D * H;
  return u;
}

PhaseCount linear_cost(const Units& u) { return {u.q, u.q, u.q}; }
PhaseCount norm_cost(const Units& u) { return {u.q, u.q + 2 * u.dh, u.q}; }
PhaseCount self_attention_cost(const Units& u) { return {2 * u.q, 2 * u.q, 2 * u.q}; }
PhaseCount activation_cost(const Units& u) { return {u.q_split, 2 * u.dh, 0}; }

// Self-attention plus its output projection.
PhaseCount attention_module_cost(const Units& u) {
  PhaseCount c = self_attention_cost(u);
  c += linear_cost(u);
  return c;
}

std::uint64_t ffn_linears(const AuxConfig& aux) { return aux.ffn_kind == FfnKind::glu ? 3 : 2; }

PhaseCount ffn_module_cost(const AuxConfig& aux, const Units& u) {
  PhaseCount c = scaled(linear_cost(u), ffn_linears(aux));
  c += activation_cost(u);
  return c;
}

}  // namespace

ParamCount count_params(const AuxConfig& aux, const TinTConfig& cfg) {
  cfg.validate(aux);
  const Units u = units(aux, cfg);
  ParamCount out;
  out.d_sim = cfg.d_sim(aux);
  out.h_sim = cfg.h_sim(aux);
  out.t_sim = cfg.t_sim(aux);
  out.prefix_tokens = cfg.prefix_tokens(aux);
  out.q_split = u.q_split;
  out.q = u.q;
  out.rows = {{"linear", linear_cost(u)},
              {"layernorm", norm_cost(u)},
              {"self-attention", self_attention_cost(u)},
              {"activation", activation_cost(u)}};

  out.block = norm_cost(u);
  out.block += attention_module_cost(u);
  out.block += norm_cost(u);
  out.block += ffn_module_cost(aux, u);
  out.model = scaled(out.block, aux.layers);

  // The block holds nq copies of Q, 6 D_sim H_sim and one Q_split, so expanding
  // Q and Q_split gives the closed-form coefficients.
  const std::uint64_t nq = 3 + 3 + 6 + 3 + 3 * ffn_linears(aux);
  out.c1 = 4 * nq + 1;
  out.c2 = 4 * nq + 1 + 6;
  out.c3 = 3 * nq;
  const std::uint64_t D = out.d_sim, H = out.h_sim, T = out.t_sim;
  out.closed_form = aux.layers * (out.c1 * ceil_div(D * D, H) + out.c2 * D * H +
                                  out.c3 * ceil_div(T * D, H));
  return out;
}

// ---- stack --------------------------------------------------------------------------------

std::string_view to_string(StackOp op) {
  switch (op) {
    case StackOp::embed: return "embed";
    case StackOp::save_band: return "save";
    case StackOp::add_band: return "add";
    case StackOp::forward: return "forward";
    case StackOp::backward: return "backward";
    case StackOp::descent: return "descent";
    case StackOp::loss_grad: return "loss_grad";
    case StackOp::readout: return "readout";
  }
  return "?";
}

std::string_view to_string(StackPhase phase) {
  switch (phase) {
    case StackPhase::train_forward: return "train_forward";
    case StackPhase::loss: return "loss";
    case StackPhase::train_backward: return "train_backward";
    case StackPhase::descent: return "descent";
    case StackPhase::eval_forward: return "eval_forward";
    case StackPhase::readout: return "readout";
  }
  return "?";
}

std::uint64_t TinTStack::charged_parameters() const {
  std::uint64_t total = 0;
  for (const StackEntry& e : entries) total += e.charge;
  return total;
}

std::size_t TinTStack::count(StackOp op) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [op](const StackEntry& e) { return e.op == op; }));
}

namespace {

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const std::string& x : v) s += (s.empty() ? "" : ",") + x;
  return s.empty() ? "-" : s;
}

}  // namespace

std::string TinTStack::dump() const {
  std::ostringstream os;
  const AuxConfig& aux = initial.config;
  os << "# tint stack: D_aux=" << aux.d_aux << " L=" << aux.layers << " S=" << layout.stack
     << " S'=" << layout.shards << " D_sim=" << layout.d_sim() << " H_sim=" << layout.heads()
     << " K=" << layout.tokens() << " steps=" << config.steps
     << " lowest_layer=" << config.lowest_layer(aux) << " entries=" << entries.size()
     << " charged=" << charged_parameters() << "\n";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const StackEntry& e = entries[i];
    os << i << "\t" << to_string(e.phase) << "\tstep=" << e.step << "\t" << to_string(e.op);
    if (e.op == StackOp::forward || e.op == StackOp::backward || e.op == StackOp::descent) {
      os << "\t" << to_string(e.kind) << "\t" << e.tag;
    } else {
      os << "\t-\t-";
    }
    os << "\treads=" << join(e.reads) << "\twrites=" << join(e.writes) << "\tcharge=" << e.charge
       << "\n";
  }
  return os.str();
}

namespace {

enum Slot : std::size_t { kLn1 = 0, kAttn = 1, kLn2 = 2, kFfn = 3 };
const char* const kSlotNames[] = {"ln1", "attn", "ln2", "ffn"};

class StackBuilder {
 public:
  StackBuilder(TinTStack& s, const Units& u) : s_(s), u_(u) {}

  void op(StackOp op, StackPhase phase, std::size_t step, std::vector<std::string> reads,
          std::vector<std::string> writes) {
    StackEntry e;
    e.op = op;
    e.phase = phase;
    e.step = step;
    e.reads = std::move(reads);
    e.writes = std::move(writes);
    s_.entries.push_back(std::move(e));
  }

  void module(StackOp op, StackPhase phase, std::size_t step, std::size_t layer, Slot slot,
              const std::string& tag) {
    const ModuleParams& m = s_.modules[layer][slot];
    StackEntry e;
    e.op = op;
    e.phase = phase;
    e.step = step;
    e.layer = layer;
    e.slot = kSlotNames[slot];
    e.kind = m.kind;
    e.tag = tag;
    plan_bands(e, m);
    // Weights are shared across unrolled steps and with the eval pass.
    const auto key = std::make_tuple(op, layer, static_cast<std::size_t>(slot));
    if (charged_.insert(key).second) e.charge = charge(op, m.kind);
    s_.entries.push_back(std::move(e));
  }

  void head(StackOp op, StackPhase phase, std::size_t step, const std::string& tag) {
    StackEntry e;
    e.op = op;
    e.phase = phase;
    e.step = step;
    e.slot = "ln_f";
    e.kind = s_.ln_f.kind;
    e.tag = tag;
    plan_bands(e, s_.ln_f);
    s_.entries.push_back(std::move(e));
  }

 private:
  std::uint64_t charge(StackOp op, ModuleKind kind) const {
    PhaseCount c;
    const AuxConfig& aux = s_.initial.config;
    switch (kind) {
      case ModuleKind::layernorm:
      case ModuleKind::rmsnorm: c = norm_cost(u_); break;
      case ModuleKind::attention: c = attention_module_cost(u_); break;
      case ModuleKind::ffn:
      case ModuleKind::glu: c = ffn_module_cost(aux, u_); break;
      default: break;
    }
    if (op == StackOp::forward) return c.forward;
    if (op == StackOp::backward) return c.backward;
    return c.descent;
  }

  static void plan_bands(StackEntry& e, const ModuleParams& m) {
    const std::string& t = e.tag;
    std::vector<std::string> fwd = {t + ".x"};
    switch (m.kind) {
      case ModuleKind::attention:
        for (const char* n : {".q", ".k", ".v", ".o"}) fwd.push_back(t + n);
        break;
      case ModuleKind::glu:
        for (const char* n : {".linear", ".gate", ".y"}) fwd.push_back(t + n);
        break;
      case ModuleKind::ffn:
        for (std::size_t k = 0; k < kFfnParts; ++k) {
          fwd.push_back(t + ".up." + std::to_string(k));
          fwd.push_back(t + ".act." + std::to_string(k));
        }
        break;
      default: break;
    }
    std::vector<std::string> bwd = {t + ".dy"};
    if (m.kind == ModuleKind::attention) bwd.push_back(t + ".dv");
    if (m.kind == ModuleKind::glu) {
      bwd.push_back(t + ".dlinear");
      bwd.push_back(t + ".dgate");
    }
    if (m.kind == ModuleKind::ffn)
      for (std::size_t k = 0; k < kFfnParts; ++k) bwd.push_back(t + ".dup." + std::to_string(k));

    switch (e.op) {
      case StackOp::forward:
        e.reads = {"main"};
        e.writes = fwd;
        e.writes.push_back("main");
        break;
      case StackOp::backward:
        e.reads = fwd;
        e.reads.push_back("main");
        e.writes = bwd;
        e.writes.push_back("main");
        break;
      case StackOp::descent:
        e.reads = fwd;
        e.reads.insert(e.reads.end(), bwd.begin(), bwd.end());
        e.writes = {"prefix:" + std::string(e.slot) + (e.layer == kNoLayer ? "" : "@" + std::to_string(e.layer))};
        break;
      default: break;
    }
  }

  TinTStack& s_;
  Units u_;
  std::set<std::tuple<StackOp, std::size_t, std::size_t>> charged_;
};

std::size_t slot_index(const StackEntry& e) {
  for (std::size_t i = 0; i < 4; ++i)
    if (e.slot == kSlotNames[i]) return i;
  throw ConstructionError("run_simulation: unknown slot " + e.slot);
}

std::string layer_tag(const std::string& pass, std::size_t layer, Slot slot) {
  return pass + ".L" + std::to_string(layer) + "." + kSlotNames[slot];
}

void forward_chain(StackBuilder& b, const AuxConfig& aux, StackPhase phase, std::size_t step,
                   const std::string& pass) {
  b.op(StackOp::embed, phase, step, {"x_un"}, {"main"});
  for (std::size_t l = 0; l < aux.layers; ++l) {
    const std::string base = pass + ".L" + std::to_string(l);
    b.op(StackOp::save_band, phase, step, {"main"}, {base + ".x_in"});
    b.module(StackOp::forward, phase, step, l, kLn1, layer_tag(pass, l, kLn1));
    b.module(StackOp::forward, phase, step, l, kAttn, layer_tag(pass, l, kAttn));
    b.op(StackOp::add_band, phase, step, {base + ".x_in", "main"}, {"main"});
    b.op(StackOp::save_band, phase, step, {"main"}, {base + ".x_mid"});
    b.module(StackOp::forward, phase, step, l, kLn2, layer_tag(pass, l, kLn2));
    b.module(StackOp::forward, phase, step, l, kFfn, layer_tag(pass, l, kFfn));
    b.op(StackOp::add_band, phase, step, {base + ".x_mid", "main"}, {"main"});
  }
  b.head(StackOp::forward, phase, step, pass + ".ln_f");
}

}  // namespace

TinTStack build_tint(const AuxModel& model, const TinTConfig& cfg) {
  const AuxConfig& aux = model.config;
  cfg.validate(aux);
  if (model.layers.size() != aux.layers) {
    throw ConstructionError("build_tint: model has " + std::to_string(model.layers.size()) +
                            " layers but its config declares " + std::to_string(aux.layers));
  }

  TinTStack s;
  s.initial = model;
  s.config = cfg;
  s.layout = cfg.layout(aux);
  s.layout.validate();
  const NormKind nk = aux.ln_kind;
  for (const LayerParams& layer : model.layers) {
    s.modules.push_back({encode_norm_module(layer.ln1, nk, s.layout),
                         encode_attention_module(layer.attn, aux.h_aux, s.layout),
                         encode_norm_module(layer.ln2, nk, s.layout),
                         encode_ffn_module(layer.ffn, aux.ffn_kind, aux.activation, s.layout)});
  }
  s.ln_f = encode_norm_module(model.ln_f, nk, s.layout);

  const Units u = units(aux, cfg);
  StackBuilder b(s, u);
  const std::size_t lowest = cfg.lowest_layer(aux);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const std::string pass = "s" + std::to_string(step);
    forward_chain(b, aux, StackPhase::train_forward, step, pass);
    b.op(StackOp::loss_grad, StackPhase::loss, step, {"main", "x_un"}, {"main"});
    b.head(StackOp::backward, StackPhase::train_backward, step, pass + ".ln_f");
    for (std::size_t l = aux.layers; l-- > lowest;) {
      const std::string base = pass + ".L" + std::to_string(l);
      const StackPhase ph = StackPhase::train_backward;
      b.op(StackOp::save_band, ph, step, {"main"}, {base + ".dx_out"});
      b.module(StackOp::backward, ph, step, l, kFfn, layer_tag(pass, l, kFfn));
      b.module(StackOp::backward, ph, step, l, kLn2, layer_tag(pass, l, kLn2));
      b.op(StackOp::add_band, ph, step, {base + ".dx_out", "main"}, {"main"});
      b.op(StackOp::save_band, ph, step, {"main"}, {base + ".d_mid"});
      b.module(StackOp::backward, ph, step, l, kAttn, layer_tag(pass, l, kAttn));
      b.module(StackOp::backward, ph, step, l, kLn1, layer_tag(pass, l, kLn1));
      b.op(StackOp::add_band, ph, step, {base + ".d_mid", "main"}, {"main"});
    }
    for (std::size_t l = lowest; l < aux.layers; ++l) {
      for (Slot slot : {kAttn, kLn1, kLn2, kFfn})
        b.module(StackOp::descent, StackPhase::descent, step, l, slot, layer_tag(pass, l, slot));
    }
  }
  forward_chain(b, aux, StackPhase::eval_forward, cfg.steps, "eval");
  b.op(StackOp::readout, StackPhase::readout, cfg.steps, {"main"}, {"logits"});

  // Every band a step reads must have been written by an earlier entry.
  std::set<std::string> written = {"main", "x_un"};
  for (const StackEntry& e : s.entries) {
    for (const std::string& r : e.reads) {
      if (!written.count(r)) {
        throw ConstructionError("build_tint: entry " + std::string(to_string(e.op)) + " " + e.tag +
                                " reads band " + r + " before it is written");
      }
    }
    written.insert(e.writes.begin(), e.writes.end());
  }
  return s;
}

// ---- input formatting and execution ----------------------------------------------------

FormattedInput format_input(const std::vector<std::uint32_t>& tokens, std::size_t r,
                            const LossSpec& spec, AuxMaskKind aux_mask) {
  const std::size_t T = tokens.size();
  if (r < 1 || r >= T) {
    throw ConfigError("format_input: split r=" + std::to_string(r) + " must satisfy 1 <= r < " +
                      std::to_string(T));
  }
  FormattedInput in;
  in.tokens = tokens;
  in.split = r;
  in.segments.assign(T, Segment::eval);
  std::fill(in.segments.begin(), in.segments.begin() + static_cast<std::ptrdiff_t>(r),
            Segment::train);
  in.mask = eval_mask(T, r, spec, aux_mask);
  in.loss_flags = spec.loss_positions(r);
  in.loss_flags.resize(T, 0);
  return in;
}

SimulationResult run_simulation(const TinTStack& stack, const FormattedInput& input) {
  const AuxModel& model = stack.initial;
  const AuxConfig& aux = model.config;
  const std::size_t T = input.tokens.size();
  if (input.segments.size() != T || input.loss_flags.size() != T) {
    throw DimensionError("run_simulation: formatted input is inconsistent");
  }

  std::vector<std::vector<ModuleParams>> modules = stack.modules;
  const Tensor x_un = embed_tokens(model, input.tokens);
  SimSequence seq = SimSequence::make(stack.layout, x_un, input.segments, input.mask,
                                      stack.config.t_sim(aux));
  seq.declare_band("x_un", x_un);
  const SimEpsilons eps = stack.config.epsilons();

  SimulationResult result;
  for (const StackEntry& e : stack.entries) {
    switch (e.op) {
      case StackOp::embed:
        seq.set_main(seq.band("x_un"));
        break;
      case StackOp::save_band:
        seq.declare_band(e.writes.front(), seq.main());
        break;
      case StackOp::add_band:
        seq.set_main(add(seq.band(e.reads.front()), seq.main()));
        break;
      case StackOp::forward: {
        const ModuleParams& m = e.layer == kNoLayer ? stack.ln_f : modules[e.layer][slot_index(e)];
        simulate_forward(m, seq, e.tag, false);
        break;
      }
      case StackOp::backward: {
        const ModuleParams& m = e.layer == kNoLayer ? stack.ln_f : modules[e.layer][slot_index(e)];
        simulate_backward(m, seq, e.tag, eps);
        break;
      }
      case StackOp::descent:
        simulate_descent(modules[e.layer][slot_index(e)], seq, e.tag, stack.config.eta);
        break;
      case StackOp::loss_grad:
        lm_head_grad_module(model.embedding, seq, input.loss_flags);
        break;
      case StackOp::readout:
        result.eval_logits =
            matmul_a_bt(slice_rows(seq.main(), input.split, T), model.embedding);
        break;
    }
    ++result.executed;
  }

  result.model = model;
  for (std::size_t l = 0; l < aux.layers; ++l) {
    LayerParams& layer = result.model.layers[l];
    layer.ln1 = decode_norm_module(modules[l][kLn1]);
    const Tensor slopes = layer.attn.alibi_slopes;
    layer.attn = decode_attention_module(modules[l][kAttn]);
    layer.attn.alibi_slopes = slopes;
    layer.ln2 = decode_norm_module(modules[l][kLn2]);
    layer.ffn = decode_ffn_module(modules[l][kFfn]);
  }
  return result;
}

}  // namespace tint
