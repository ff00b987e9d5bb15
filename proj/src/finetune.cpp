#include "tint/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace tint {

Regime parse_regime(std::string_view name) {
  if (name == "exact") return Regime::exact;
  if (name == "simulated") return Regime::simulated;
  throw ConfigError("unknown regime '" + std::string(name) + "'");
}

LossMode parse_loss_mode(std::string_view name) {
  if (name == "label") return LossMode::label;
  if (name == "full_context") return LossMode::full_context;
  throw ConfigError("unknown loss mode '" + std::string(name) + "'");
}

LossFormat parse_loss_format(std::string_view name) {
  if (name == "single") return LossFormat::single;
  if (name == "multi") return LossFormat::multi;
  throw ConfigError("unknown loss format '" + std::string(name) + "'");
}

AuxMaskKind parse_aux_mask(std::string_view name) {
  if (name == "causal") return AuxMaskKind::causal;
  if (name == "bidirectional") return AuxMaskKind::bidirectional;
  throw ConfigError("unknown aux mask '" + std::string(name) + "'");
}

std::string_view to_string(Regime v) { return v == Regime::exact ? "exact" : "simulated"; }
std::string_view to_string(LossMode v) { return v == LossMode::label ? "label" : "full_context"; }
std::string_view to_string(LossFormat v) { return v == LossFormat::single ? "single" : "multi"; }
std::string_view to_string(AuxMaskKind v) {
  return v == AuxMaskKind::causal ? "causal" : "bidirectional";
}

// ---- loss specification ---------------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> LossSpec::exemplars(std::size_t r) const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (exemplar_lengths.empty()) {
    out.emplace_back(0, r);
    return out;
  }
  std::size_t begin = 0;
  for (std::size_t len : exemplar_lengths) {
    if (len == 0) throw ConfigError("loss spec: exemplar lengths must be positive");
    out.emplace_back(begin, begin + len);
    begin += len;
  }
  if (begin != r) {
    throw ConfigError("loss spec: exemplar lengths sum to " + std::to_string(begin) +
                      " but the training segment has " + std::to_string(r) + " tokens");
  }
  return out;
}

std::vector<std::uint8_t> LossSpec::loss_positions(std::size_t r) const {
  if (label_len == 0) throw ConfigError("loss spec: label_len must be positive");
  std::vector<std::uint8_t> flags(r, 0);
  for (auto [begin, end] : exemplars(r)) {
    if (mode == LossMode::label) {
      const std::size_t label_begin = end - std::min(label_len, end - begin);
      // Targets are the label tokens; the first token of an exemplar has no
      // in-exemplar predecessor in single format.
      for (std::size_t target = label_begin; target < end; ++target) {
        if (target == 0) continue;
        if (format == LossFormat::single && target == begin) continue;
        flags[target - 1] = 1;
      }
    } else if (format == LossFormat::single) {
      for (std::size_t p = begin; p + 1 < end; ++p) flags[p] = 1;
    }
  }
  if (mode == LossMode::full_context && format == LossFormat::multi) {
    for (std::size_t p = 0; p + 1 < r; ++p) flags[p] = 1;
  }
  return flags;
}

namespace {

void fill_train_block(Mask& m, std::size_t r, const LossSpec& spec, AuxMaskKind kind) {
  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  if (spec.format == LossFormat::single) {
    blocks = spec.exemplars(r);
  } else {
    blocks.emplace_back(0, r);
  }
  for (auto [begin, end] : blocks) {
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t last = kind == AuxMaskKind::causal ? i + 1 : end;
      for (std::size_t j = begin; j < last; ++j) m.set(i, j, true);
    }
  }
}

}  // namespace

Mask train_mask(std::size_t r, const LossSpec& spec, AuxMaskKind kind) {
  Mask m(r, r, false);
  fill_train_block(m, r, spec, kind);
  return m;
}

Mask eval_mask(std::size_t T, std::size_t r, const LossSpec& spec, AuxMaskKind kind) {
  if (r == 0 || r >= T) throw ConfigError("eval_mask: split must satisfy 1 <= r < T");
  Mask m(T, T, false);
  fill_train_block(m, r, spec, kind);
  for (std::size_t i = r; i < T; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

// ---- forward ---------------------------------------------------------------------------

Tensor embed_tokens(const AuxModel& model, const std::vector<std::uint32_t>& tokens) {
  const std::size_t D = model.config.d_aux;
  Tensor x({tokens.size(), D});
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= model.config.vocab) {
      throw ConfigError("token id " + std::to_string(tokens[t]) + " outside vocabulary of " +
                        std::to_string(model.config.vocab));
    }
    x.set_row(t, model.embedding.row_span(tokens[t]));
  }
  return x;
}

ModelTrace model_forward(const AuxModel& model, const std::vector<std::uint32_t>& tokens,
                         const Mask& mask) {
  const AuxConfig& cfg = model.config;
  ModelTrace trace;
  trace.embeddings = embed_tokens(model, tokens);
  Tensor x = trace.embeddings;
  for (const LayerParams& layer : model.layers) {
    LayerTrace lt;
    lt.x_in = x;
    lt.ln1 = norm_fwd(layer.ln1, x, cfg.ln_kind);
    lt.attn = attn_fwd(layer.attn, cfg.h_aux, lt.ln1.y, mask);
    lt.attn_out = linear_fwd(layer.attn.o, lt.attn.y);
    lt.x_mid = add(x, lt.attn_out);
    lt.ln2 = norm_fwd(layer.ln2, lt.x_mid, cfg.ln_kind);
    if (cfg.ffn_kind == FfnKind::mlp) {
      lt.up = linear_fwd(layer.ffn.up, lt.ln2.y);
      lt.act = activation_eval(lt.up, cfg.activation, false);
      lt.ffn_out = linear_fwd(layer.ffn.down, lt.act);
    } else {
      lt.glu = glu_fwd(layer.ffn, lt.ln2.y, cfg.activation);
      lt.ffn_out = lt.glu.out;
    }
    lt.x_out = add(lt.x_mid, lt.ffn_out);
    x = lt.x_out;
    trace.layers.push_back(std::move(lt));
  }
  trace.ln_f = norm_fwd(model.ln_f, x, cfg.ln_kind);
  trace.logits = matmul_a_bt(trace.ln_f.y, model.embedding);
  return trace;
}

// ---- backward --------------------------------------------------------------------------

namespace {

Tensor next_token_targets(const AuxModel& model, const std::vector<std::uint32_t>& tokens,
                          const std::vector<std::uint8_t>& loss_positions) {
  const std::size_t T = tokens.size();
  Tensor q({T, model.config.vocab});
  for (std::size_t p = 0; p < T; ++p) {
    if (p < loss_positions.size() && loss_positions[p] && p + 1 < T) {
      q(p, tokens[p + 1]) = 1.0f;
    }
  }
  return q;
}

Tensor norm_backward(const NormParams& p, const NormForward& f, const Tensor& x,
                     const Tensor& dy, NormKind kind, const BackwardOptions& o) {
  if (o.regime == Regime::exact) return ln_bwd_exact(p.gamma, dy, f.z, f.sigma, kind);
  return ln_bwd_approx(p.gamma, dy, x, o.eps_ln, kind);
}

}  // namespace

GradSet model_backward(const AuxModel& model, const ModelTrace& trace,
                       const std::vector<std::uint32_t>& tokens,
                       const std::vector<std::uint8_t>& loss_positions,
                       const BackwardOptions& o) {
  const AuxConfig& cfg = model.config;
  const std::size_t T = tokens.size();
  const bool simulated = o.regime == Regime::simulated;
  GradSet gs = make_zero_grads(cfg, T);

  // Loss gradient at the final hidden state; rows outside the loss are zero.
  const Tensor q = next_token_targets(model, tokens, loss_positions);
  Tensor dz({T, cfg.d_aux});
  {
    std::vector<std::size_t> rows;
    for (std::size_t p = 0; p < T; ++p) {
      if (p < loss_positions.size() && loss_positions[p] && p + 1 < T) rows.push_back(p);
    }
    Tensor xs({rows.size(), cfg.d_aux});
    Tensor qs({rows.size(), cfg.vocab});
    for (std::size_t i = 0; i < rows.size(); ++i) {
      xs.set_row(i, trace.ln_f.y.row_span(rows[i]));
      qs.set_row(i, q.row_span(rows[i]));
    }
    if (!rows.empty()) {
      const Tensor g = lm_head_grad(model.embedding, xs, qs);
      for (std::size_t i = 0; i < rows.size(); ++i) dz.set_row(rows[i], g.row_span(i));
    }
  }
  const Tensor& x_final = trace.layers.empty() ? trace.embeddings : trace.layers.back().x_out;
  Tensor dx = norm_backward(model.ln_f, trace.ln_f, x_final, dz, cfg.ln_kind, o);

  for (std::size_t li = cfg.layers; li-- > o.lowest_layer;) {
    const LayerParams& layer = model.layers[li];
    const LayerTrace& lt = trace.layers[li];
    LayerParams& g = gs.grads.layers[li];

    // Feed-forward block.
    Tensor d_ln2;
    if (cfg.ffn_kind == FfnKind::mlp) {
      g.ffn.down = linear_grads(lt.act, dx);
      const Tensor d_act = linear_bwd(layer.ffn.down.W, dx);
      const Tensor d_up = simulated ? act_bwd_approx(d_act, lt.up, o.eps_act, cfg.activation)
                                    : act_bwd_exact(d_act, lt.up, cfg.activation);
      g.ffn.up = linear_grads(lt.ln2.y, d_up);
      d_ln2 = linear_bwd(layer.ffn.up.W, d_up);
    } else {
      const GluGrads gg =
          simulated ? glu_bwd_approx(layer.ffn, lt.glu, dx, o.eps_glu, cfg.activation)
                    : glu_bwd_exact(layer.ffn, lt.glu, dx, cfg.activation);
      g.ffn.gate_o = linear_grads(lt.glu.y, dx);
      g.ffn.gate_w = linear_grads(lt.ln2.y, gg.d_linear);
      g.ffn.gate_v = linear_grads(lt.ln2.y, gg.d_gate);
      d_ln2 = gg.dx;
    }
    g.ln2 = norm_grads(lt.ln2.z, d_ln2);
    Tensor d_mid = add(dx, norm_backward(layer.ln2, lt.ln2, lt.x_mid, d_ln2, cfg.ln_kind, o));

    // Attention block.
    g.attn.o = linear_grads(lt.attn.y, d_mid);
    const Tensor d_attn = linear_bwd(layer.attn.o.W, d_mid);
    const AttnGrads ag = simulated ? attn_bwd_approx(layer.attn, lt.attn.cache.scores, d_attn)
                                   : attn_bwd_exact(layer.attn, lt.attn.cache, d_attn);
    g.attn.v = linear_grads(lt.ln1.y, ag.dv);
    if (!simulated) {
      g.attn.q = linear_grads(lt.ln1.y, ag.dq);
      g.attn.k = linear_grads(lt.ln1.y, ag.dk);
    }
    g.ln1 = norm_grads(lt.ln1.z, ag.dx);
    dx = add(d_mid, norm_backward(layer.ln1, lt.ln1, lt.x_in, ag.dx, cfg.ln_kind, o));
  }
  if (o.lowest_layer == 0) gs.input_grad = dx;

  // Clear slots that the regime never updates.
  gs.grads.for_each_tensor([&](const std::string& name, Tensor& t) {
    if (is_frozen_slot(name, simulated)) t = Tensor(t.shape());
  });
  return gs;
}

double sequence_loss(const ModelTrace& trace, const AuxModel& model,
                     const std::vector<std::uint32_t>& tokens,
                     const std::vector<std::uint8_t>& loss_positions) {
  const Tensor q = next_token_targets(model, tokens, loss_positions);
  double loss = 0.0;
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    if (p >= loss_positions.size() || !loss_positions[p] || p + 1 >= tokens.size()) continue;
    loss += lm_head_loss(model.embedding, trace.ln_f.y.row_copy(p), q.row_copy(p));
  }
  return loss;
}

// ---- fine-tuning --------------------------------------------------------------------------

std::size_t lowest_updated_layer(const AuxConfig& config, std::size_t top_layers) {
  if (top_layers > config.layers) {
    throw ConfigError("schedule updates " + std::to_string(top_layers) + " layers but the model has " +
                      std::to_string(config.layers));
  }
  return top_layers == 0 ? 0 : config.layers - top_layers;
}

GradSet training_gradients(const AuxModel& model, const std::vector<std::uint32_t>& tokens,
                           std::size_t r, const LossSpec& spec, const FinetuneOptions& options,
                           double* loss_out) {
  BackwardOptions bo;
  bo.regime = options.regime;
  bo.eps_ln = options.eps_ln;
  bo.eps_act = options.eps_act;
  bo.eps_glu = options.eps_glu;
  bo.lowest_layer = lowest_updated_layer(model.config, options.top_layers);

  const std::vector<std::uint8_t> flags = spec.loss_positions(r);
  std::vector<std::pair<std::size_t, std::size_t>> pieces;
  if (spec.format == LossFormat::single) {
    pieces = spec.exemplars(r);
  } else {
    pieces.emplace_back(0, r);
  }

  GradSet total = make_zero_grads(model.config, r);
  double loss = 0.0;
  for (auto [begin, end] : pieces) {
    std::vector<std::uint32_t> seq(tokens.begin() + begin, tokens.begin() + end);
    std::vector<std::uint8_t> seq_flags(flags.begin() + begin, flags.begin() + end);
    const std::size_t n = seq.size();
    const Mask mask = options.aux_mask == AuxMaskKind::causal ? Mask::causal(n) : Mask::full(n, n);
    const ModelTrace trace = model_forward(model, seq, mask);
    const GradSet g = model_backward(model, trace, seq, seq_flags, bo);
    loss += sequence_loss(trace, model, seq, seq_flags);

    std::vector<Tensor*> dst;
    total.grads.for_each_tensor([&](const std::string&, Tensor& t) { dst.push_back(&t); });
    std::size_t i = 0;
    g.grads.for_each_tensor([&](const std::string&, const Tensor& t) { add_inplace(*dst[i++], t); });
    if (!g.input_grad.empty()) {
      for (std::size_t row = 0; row < n; ++row)
        total.input_grad.set_row(begin + row, g.input_grad.row_span(row));
    }
  }
  if (loss_out) *loss_out = loss;
  return total;
}

AuxModel apply_gradients(const AuxModel& model, const GradSet& grads, float eta,
                         std::size_t lowest, Regime regime) {
  AuxModel out = model;
  std::vector<const Tensor*> src;
  grads.grads.for_each_tensor([&](const std::string&, const Tensor& t) { src.push_back(&t); });
  std::size_t i = 0;
  out.for_each_tensor([&](const std::string& name, Tensor& t) {
    const Tensor& g = *src[i++];
    if (is_frozen_slot(name, regime == Regime::simulated)) return;
    if (name.starts_with("layers.")) {
      const std::size_t layer = std::stoul(name.substr(7));
      if (layer < lowest) return;
    }
    axpy_inplace(t, -eta, g);
  });
  return out;
}

FinetuneResult finetune_eval(const AuxModel& model, const std::vector<std::uint32_t>& tokens,
                             std::size_t r, const LossSpec& spec,
                             const FinetuneOptions& options) {
  const std::size_t T = tokens.size();
  if (r < 1 || r >= T) {
    throw ConfigError("finetune_eval: split r=" + std::to_string(r) + " must satisfy 1 <= r < " +
                      std::to_string(T));
  }
  if (options.steps < 1) throw ConfigError("finetune_eval: at least one step is required");
  const std::size_t lowest = lowest_updated_layer(model.config, options.top_layers);
  const std::size_t depth = options.steps * (model.config.layers - lowest);
  if (depth > options.max_depth) {
    throw ConfigError("finetune_eval: " + std::to_string(options.steps) + " steps x " +
                      std::to_string(model.config.layers - lowest) + " layers exceeds depth cap " +
                      std::to_string(options.max_depth));
  }

  FinetuneResult result;
  result.model = model;
  for (std::size_t step = 0; step < options.steps; ++step) {
    double loss = 0.0;
    const GradSet g = training_gradients(result.model, tokens, r, spec, options, &loss);
    result.train_losses.push_back(loss);
    result.model = apply_gradients(result.model, g, options.eta, lowest, options.regime);
  }

  const ModelTrace trace =
      model_forward(result.model, tokens, eval_mask(T, r, spec, options.aux_mask));
  result.eval_logits = slice_rows(trace.logits, r, T);
  return result;
}

double eval_loss(const Tensor& eval_logits, const std::vector<std::uint32_t>& tokens,
                 std::size_t r) {
  double loss = 0.0;
  for (std::size_t i = 0; i + 1 < eval_logits.rows(); ++i) {
    auto row = eval_logits.row_span(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (float v : row) z += std::exp(v - mx);
    loss -= row[tokens[r + i + 1]] - (mx + std::log(z));
  }
  return loss;
}

}  // namespace tint
