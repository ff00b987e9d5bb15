#include "tint/tint_modules.hpp"

#include <algorithm>

#include "tint/aux_ops.hpp"

namespace tint {

// ---- prefix layout ---------------------------------------------------------------

PrefixLayout PrefixLayout::make(std::size_t d_aux, std::size_t stack, std::size_t heads,
                                bool bias_token) {
  if (stack == 0 || heads % stack != 0) {
    throw ConstructionError("prefix layout: " + std::to_string(heads) +
                            " heads are not a multiple of S=" + std::to_string(stack));
  }
  PrefixLayout l{d_aux, stack, heads / stack, bias_token};
  l.validate();
  return l;
}

void PrefixLayout::validate() const {
  if (d_aux < 2 || stack == 0 || shards == 0) {
    throw ConstructionError("prefix layout: D_aux=" + std::to_string(d_aux) + ", S=" +
                            std::to_string(stack) + ", S'=" + std::to_string(shards));
  }
  if (d_aux % shards != 0) {
    throw ConstructionError("prefix layout: D_aux=" + std::to_string(d_aux) +
                            " is not divisible into S'=" + std::to_string(shards) + " shards");
  }
  if (row_tokens() > head_dim()) {
    throw ConstructionError("prefix layout: " + std::to_string(row_tokens()) +
                            " row tokens exceed head width " + std::to_string(head_dim()));
  }
}

Tensor encode_prefix(const LinearParams& p, const PrefixLayout& layout) {
  layout.validate();
  const std::size_t D = layout.d_aux;
  if (p.W.rows() != D || p.W.cols() != D || p.b.numel() != D) {
    throw DimensionError("encode_prefix: W " + p.W.shape_str() + " and b " + p.b.shape_str() +
                         " do not match D_aux=" + std::to_string(D));
  }
  if (!layout.bias_token) throw ConstructionError("encode_prefix: layout has no bias token");
  Tensor prefix({layout.tokens(), layout.d_sim()});
  for (std::size_t i = 0; i < D; ++i) {
    const std::size_t tok = layout.token_of(i), off = layout.band_of(i) * D;
    for (std::size_t c = 0; c < D; ++c) prefix(tok, off + c) = p.W(i, c);
  }
  for (std::size_t c = 0; c < D; ++c) prefix(layout.bias_index(), c) = p.b[c];
  return prefix;
}

LinearParams decode_prefix(const Tensor& prefix, const PrefixLayout& layout) {
  layout.validate();
  if (prefix.rank() != 2 || prefix.rows() != layout.tokens() || prefix.cols() != layout.d_sim()) {
    throw DimensionError("decode_prefix: prefix " + prefix.shape_str() + " does not match layout " +
                         std::to_string(layout.tokens()) + "x" + std::to_string(layout.d_sim()));
  }
  const std::size_t D = layout.d_aux;
  LinearParams p{Tensor({D, D}), Tensor({1, D})};
  for (std::size_t i = 0; i < D; ++i) {
    const std::size_t tok = layout.token_of(i), off = layout.band_of(i) * D;
    for (std::size_t c = 0; c < D; ++c) p.W(i, c) = prefix(tok, off + c);
  }
  for (std::size_t c = 0; c < D; ++c) p.b[c] = prefix(layout.bias_index(), c);
  return p;
}

// ---- simulator sequence ------------------------------------------------------------------

SimSequence SimSequence::make(const PrefixLayout& layout, const Tensor& x,
                              std::vector<Segment> segments, Mask mask,
                              std::size_t max_position) {
  layout.validate();
  const std::size_t T = x.rows();
  if (x.cols() != layout.d_aux) {
    throw DimensionError("sim sequence: activations " + x.shape_str() + " vs D_aux=" +
                         std::to_string(layout.d_aux));
  }
  if (segments.size() != T || mask.rows != T || mask.cols != T) {
    throw DimensionError("sim sequence: segments or mask do not match " + std::to_string(T) +
                         " tokens");
  }
  if (T + layout.tokens() > max_position) {
    throw PreconditionError("sim sequence: " + std::to_string(T) + " tokens plus " +
                            std::to_string(layout.tokens()) + " prefix tokens exceed T_sim=" +
                            std::to_string(max_position));
  }
  SimSequence s;
  s.layout = layout;
  s.tokens = Tensor({T, layout.d_sim()});
  write_cols(s.tokens, 0, x);
  s.segments = std::move(segments);
  s.mask = std::move(mask);
  s.max_position = max_position;
  return s;
}

Tensor SimSequence::main() const { return slice_cols(tokens, 0, layout.d_aux); }

void SimSequence::set_main(const Tensor& x) {
  if (x.rows() != length() || x.cols() != layout.d_aux) {
    throw DimensionError("sim sequence: main band update " + x.shape_str());
  }
  write_cols(tokens, 0, x);
}

bool SimSequence::scratch_clean() const {
  for (std::size_t t = 0; t < tokens.rows(); ++t)
    for (std::size_t c = layout.d_aux; c < tokens.cols(); ++c)
      if (tokens(t, c) != 0.0f) return false;
  return true;
}

const Tensor& SimSequence::band(const std::string& name) const {
  auto it = bands.find(name);
  if (it == bands.end()) {
    throw ConstructionError("sim sequence: residual band '" + name + "' was never written");
  }
  return it->second;
}

void SimSequence::declare_band(const std::string& name, Tensor value) {
  if (value.rows() != length()) {
    throw DimensionError("sim sequence: band '" + name + "' has " + std::to_string(value.rows()) +
                         " rows for " + std::to_string(length()) + " tokens");
  }
  if (!bands.emplace(name, std::move(value)).second) {
    throw ConstructionError("sim sequence: band '" + name + "' collides with an existing band");
  }
}

void SimSequence::replace_band(const std::string& name, Tensor value) {
  bands[name] = std::move(value);
}

void SimSequence::drop_bands_with_prefix(std::string_view prefix) {
  for (auto it = bands.begin(); it != bands.end();) {
    it = it->first.starts_with(prefix) ? bands.erase(it) : std::next(it);
  }
}

// ---- module parameters ---------------------------------------------------------------------

std::string_view to_string(ModuleKind kind) {
  switch (kind) {
    case ModuleKind::linear: return "linear";
    case ModuleKind::attention: return "attention";
    case ModuleKind::layernorm: return "layernorm";
    case ModuleKind::rmsnorm: return "rmsnorm";
    case ModuleKind::activation: return "activation";
    case ModuleKind::glu: return "glu";
    case ModuleKind::ffn: return "ffn";
  }
  return "?";
}

ModuleKind parse_module_kind(std::string_view name) {
  for (ModuleKind k : {ModuleKind::linear, ModuleKind::attention, ModuleKind::layernorm,
                       ModuleKind::rmsnorm, ModuleKind::activation, ModuleKind::glu,
                       ModuleKind::ffn}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown module kind '" + std::string(name) + "'");
}

const Tensor& ModuleParams::prefix(const std::string& slot) const {
  auto it = prefixes.find(slot);
  if (it == prefixes.end()) {
    throw ConstructionError(std::string(to_string(kind)) + " module has no prefix slot '" + slot +
                            "'");
  }
  return it->second;
}

std::size_t ModuleParams::prefix_tokens() const {
  std::size_t n = 0;
  for (const auto& [slot, p] : prefixes) n += p.rows();
  return n;
}

ModuleParams encode_linear_module(const LinearParams& p, const PrefixLayout& layout) {
  ModuleParams m;
  m.kind = ModuleKind::linear;
  m.layout = layout;
  m.prefixes["W"] = encode_prefix(p, layout);
  return m;
}

ModuleParams encode_attention_module(const AttnParams& p, std::size_t heads,
                                     const PrefixLayout& layout) {
  if (heads == 0 || layout.d_aux % heads != 0) {
    throw ConstructionError("attention module: " + std::to_string(heads) +
                            " heads do not divide D_aux=" + std::to_string(layout.d_aux));
  }
  if (heads > layout.heads()) {
    throw ConstructionError("attention module: " + std::to_string(heads) +
                            " auxiliary heads exceed H_sim=" + std::to_string(layout.heads()));
  }
  ModuleParams m;
  m.kind = ModuleKind::attention;
  m.layout = layout;
  m.heads = heads;
  m.alibi_slopes = p.alibi_slopes;
  m.prefixes["q"] = encode_prefix(p.q, layout);
  m.prefixes["k"] = encode_prefix(p.k, layout);
  m.prefixes["v"] = encode_prefix(p.v, layout);
  m.prefixes["o"] = encode_prefix(p.o, layout);
  return m;
}

ModuleParams encode_norm_module(const NormParams& p, NormKind kind, const PrefixLayout& layout) {
  ModuleParams m;
  m.kind = kind == NormKind::layernorm ? ModuleKind::layernorm : ModuleKind::rmsnorm;
  m.layout = layout;
  m.prefixes["norm"] =
      encode_prefix(LinearParams{Tensor::diag(p.gamma.values()), p.beta}, layout);
  return m;
}

ModuleParams encode_activation_module(Activation act, const PrefixLayout& layout) {
  ModuleParams m;
  m.kind = ModuleKind::activation;
  m.layout = layout;
  m.activation = act;
  return m;
}

ModuleParams encode_ffn_module(const FfnParams& p, FfnKind ffn, Activation act,
                               const PrefixLayout& layout) {
  ModuleParams m;
  m.layout = layout;
  m.activation = act;
  const std::size_t D = layout.d_aux;
  if (ffn == FfnKind::glu) {
    m.kind = ModuleKind::glu;
    m.prefixes["gate_w"] = encode_prefix(p.gate_w, layout);
    m.prefixes["gate_v"] = encode_prefix(p.gate_v, layout);
    m.prefixes["gate_o"] = encode_prefix(p.gate_o, layout);
    return m;
  }
  m.kind = ModuleKind::ffn;
  if (p.up.W.rows() != kFfnParts * D || p.down.W.cols() != kFfnParts * D) {
    throw DimensionError("ffn module: hidden width must be " + std::to_string(kFfnParts) +
                         " x D_aux");
  }
  for (std::size_t k = 0; k < kFfnParts; ++k) {
    const std::string n = std::to_string(k);
    LinearParams up{slice_rows(p.up.W, k * D, (k + 1) * D),
                    slice_cols(p.up.b, k * D, (k + 1) * D)};
    LinearParams down{slice_cols(p.down.W, k * D, (k + 1) * D),
                      k == 0 ? p.down.b : Tensor({1, D})};
    m.prefixes["up." + n] = encode_prefix(up, layout);
    m.prefixes["down." + n] = encode_prefix(down, layout);
  }
  return m;
}

LinearParams decode_linear_module(const ModuleParams& m) {
  return decode_prefix(m.prefix("W"), m.layout);
}

AttnParams decode_attention_module(const ModuleParams& m) {
  AttnParams p;
  p.q = decode_prefix(m.prefix("q"), m.layout);
  p.k = decode_prefix(m.prefix("k"), m.layout);
  p.v = decode_prefix(m.prefix("v"), m.layout);
  p.o = decode_prefix(m.prefix("o"), m.layout);
  p.alibi_slopes = m.alibi_slopes;
  return p;
}

NormParams decode_norm_module(const ModuleParams& m) {
  const LinearParams lp = decode_prefix(m.prefix("norm"), m.layout);
  const std::size_t D = m.layout.d_aux;
  NormParams p{Tensor({1, D}), lp.b};
  for (std::size_t i = 0; i < D; ++i) p.gamma[i] = lp.W(i, i);
  return p;
}

FfnParams decode_ffn_module(const ModuleParams& m) {
  FfnParams p;
  if (m.kind == ModuleKind::glu) {
    p.gate_w = decode_prefix(m.prefix("gate_w"), m.layout);
    p.gate_v = decode_prefix(m.prefix("gate_v"), m.layout);
    p.gate_o = decode_prefix(m.prefix("gate_o"), m.layout);
    return p;
  }
  const std::size_t D = m.layout.d_aux;
  p.up = {Tensor({kFfnParts * D, D}), Tensor({1, kFfnParts * D})};
  p.down = {Tensor({D, kFfnParts * D}), Tensor({1, D})};
  for (std::size_t k = 0; k < kFfnParts; ++k) {
    const std::string n = std::to_string(k);
    const LinearParams up = decode_prefix(m.prefix("up." + n), m.layout);
    const LinearParams down = decode_prefix(m.prefix("down." + n), m.layout);
    write_rows(p.up.W, k * D, up.W);
    write_cols(p.up.b, k * D, up.b);
    write_cols(p.down.W, k * D, down.W);
    if (k == 0) p.down.b = down.b;
  }
  return p;
}

// ---- linear modules --------------------------------------------------------------------------

namespace {

// [top; bottom] with `top` rows of zeros when `top` is empty.
Tensor stack_sources(const Tensor& top, std::size_t top_rows, const Tensor& bottom) {
  const std::size_t width = bottom.cols();
  Tensor out({top_rows + bottom.rows(), width});
  if (!top.empty()) {
    if (top.rows() != top_rows || top.cols() != width) {
      throw DimensionError("source stacking: " + top.shape_str() + " over " + bottom.shape_str());
    }
    write_rows(out, 0, top);
  }
  write_rows(out, top_rows, bottom);
  return out;
}

std::vector<std::size_t> combined_positions(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  return p;
}

void check_module_input(const PrefixLayout& layout, const Tensor& prefix, const Tensor& x,
                        const SimSequence& seq, const char* where) {
  if (!layout.bias_token) throw ConstructionError(std::string(where) + ": layout needs a bias token");
  if (prefix.rows() != layout.tokens() || prefix.cols() != layout.d_sim()) {
    throw DimensionError(std::string(where) + ": prefix " + prefix.shape_str());
  }
  if (x.rows() != seq.length() || x.cols() != layout.d_aux) {
    throw DimensionError(std::string(where) + ": activations " + x.shape_str());
  }
  if (seq.layout.tokens() != layout.tokens()) {
    throw ConstructionError(std::string(where) + ": sequence built for another prefix length");
  }
}

// Per head (s, s′), coordinate c: shard s′ of a D_aux vector.
Tensor shard_select(const PrefixLayout& l, float value) {
  const std::size_t d = l.head_dim();
  Tensor W({l.d_sim(), l.d_aux});
  for (std::size_t s = 0; s < l.stack; ++s)
    for (std::size_t sp = 0; sp < l.shards; ++sp)
      for (std::size_t c = 0; c < d; ++c) W((s * l.shards + sp) * d + c, sp * d + c) = value;
  return W;
}

// Per head (s, s′), coordinate j: entry jS + s of a D_aux vector.
Tensor row_gather(const PrefixLayout& l) {
  const std::size_t d = l.head_dim();
  Tensor W({l.d_sim(), l.d_aux});
  for (std::size_t s = 0; s < l.stack; ++s)
    for (std::size_t sp = 0; sp < l.shards; ++sp)
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = j * l.stack + s;
        if (i < l.d_aux) W((s * l.shards + sp) * d + j, i) = 1.0f;
      }
  return W;
}

PositionalMap prefix_one_hot(std::size_t row_tokens) {
  return [row_tokens](std::size_t pos, std::span<float> out) {
    if (pos < row_tokens) out[pos] = 1.0f;
  };
}

PositionalMap constant_one() {
  return [](std::size_t, std::span<float> out) { out[0] = 1.0f; };
}

PositionalMap position_equals(std::size_t target) {
  return [target](std::size_t pos, std::span<float> out) { out[0] = pos == target ? 1.0f : 0.0f; };
}

// Linear attention whose heads all read the same gates.
TintAttnParams linear_heads(std::size_t heads, std::size_t qk_dim, std::size_t v_dim,
                            std::size_t max_position) {
  TintAttnParams p;
  p.heads = heads;
  p.qk_dim = qk_dim;
  p.v_dim = v_dim;
  p.score = ScoreFn::linear;
  p.max_position = max_position;
  return p;
}

Tensor bias_copy(const PrefixLayout& l, const Tensor& prefix, std::size_t T,
                 std::size_t max_position) {
  const std::size_t K = l.tokens(), N = K + T, H = l.heads();
  TintAttnParams p = linear_heads(H, H, l.d_sim(), max_position);
  p.pos_q = constant_one();
  p.pos_k = position_equals(l.bias_index());
  p.lambda_q.assign(H, 1.0f);
  p.lambda_k.assign(H, 1.0f);
  p.Wv = Tensor({l.d_sim(), l.d_sim()});
  for (std::size_t c = 0; c < l.d_aux; ++c) p.Wv(c, c) = 1.0f;
  Mask mask(N, N, false);
  for (std::size_t t = K; t < N; ++t) mask.set(t, l.bias_index(), true);
  const Tensor src = stack_sources(prefix, K, Tensor({T, l.d_sim()}));
  const Tensor out = tint_attention(p, src, src, src, combined_positions(N), mask);
  return slice_cols(slice_rows(out, K, N), 0, l.d_aux);
}

}  // namespace

Tensor linear_forward_module(const PrefixLayout& l, const Tensor& prefix, const Tensor& x,
                             const SimSequence& seq) {
  check_module_input(l, prefix, x, seq, "linear forward");
  const std::size_t K = l.tokens(), T = x.rows(), N = K + T, Ds = l.d_sim();
  TintAttnParams p = linear_heads(l.heads(), Ds, Ds, seq.max_position);
  p.Wq = shard_select(l, 1.0f);
  p.Wk = Tensor::identity(Ds);
  p.pos_v = prefix_one_hot(l.row_tokens());
  p.lambda_v.assign(l.heads(), 1.0f);
  Mask mask(N, N, false);
  for (std::size_t t = K; t < N; ++t)
    for (std::size_t j = 0; j < l.row_tokens(); ++j) mask.set(t, j, true);
  const Tensor q_src = stack_sources(Tensor(), K, x);
  const Tensor k_src = stack_sources(prefix, K, Tensor({T, Ds}));
  const Tensor heads = slice_rows(
      tint_attention(p, q_src, k_src, k_src, combined_positions(N), mask), K, N);
  const RowAggregation agg = make_row_aggregation(l.stack, l.shards, l.head_dim(), l.d_aux);
  const Tensor wx = slice_cols(agg.apply(heads), 0, l.d_aux);
  return add(wx, bias_copy(l, prefix, T, seq.max_position));
}

Tensor linear_backward_module(const PrefixLayout& l, const Tensor& prefix, const Tensor& dy,
                              const SimSequence& seq) {
  check_module_input(l, prefix, dy, seq, "linear backward");
  const std::size_t K = l.tokens(), T = dy.rows(), N = K + T, Ds = l.d_sim();
  TintAttnParams p = linear_heads(l.heads(), Ds, Ds, seq.max_position);
  p.Wq = row_gather(l);
  p.pos_k = prefix_one_hot(l.row_tokens());
  p.lambda_k.assign(l.heads(), 1.0f);
  p.Wv = Tensor::identity(Ds);
  Mask mask(N, N, false);
  for (std::size_t t = K; t < N; ++t)
    for (std::size_t j = 0; j < l.row_tokens(); ++j) mask.set(t, j, true);
  const Tensor q_src = stack_sources(Tensor(), K, dy);
  const Tensor v_src = stack_sources(prefix, K, Tensor({T, Ds}));
  const Tensor heads = slice_rows(
      tint_attention(p, q_src, q_src, v_src, combined_positions(N), mask), K, N);
  const DimwiseParams sum = make_shard_sum(l.stack, l.shards, l.head_dim());
  return slice_cols(hsplit_dimwise(sum, heads), 0, l.d_aux);
}

Tensor linear_descent_module(const PrefixLayout& l, const Tensor& prefix, const Tensor& x,
                             const Tensor& dy, const SimSequence& seq, float eta,
                             bool update_weight, bool update_bias) {
  check_module_input(l, prefix, x, seq, "linear descent");
  check_module_input(l, prefix, dy, seq, "linear descent");
  const std::size_t K = l.tokens(), T = x.rows(), N = K + T, Ds = l.d_sim();
  const auto positions = combined_positions(N);
  Tensor updated = prefix;
  auto train_cols = [&](Mask& mask, std::size_t row) {
    for (std::size_t t = 0; t < T; ++t)
      if (seq.segments[t] == Segment::train) mask.set(row, K + t, true);
  };
  if (update_weight) {
    TintAttnParams p = linear_heads(l.heads(), Ds, Ds, seq.max_position);
    p.pos_q = prefix_one_hot(l.row_tokens());
    p.lambda_q.assign(l.heads(), 1.0f);
    p.Wk = row_gather(l);
    p.Wv = shard_select(l, -eta);
    Mask mask(N, N, false);
    for (std::size_t j = 0; j < l.row_tokens(); ++j) train_cols(mask, j);
    const Tensor k_src = stack_sources(Tensor(), K, dy);
    const Tensor v_src = stack_sources(Tensor(), K, x);
    const Tensor out = tint_attention(p, k_src, k_src, v_src, positions, mask);
    add_inplace(updated, slice_rows(out, 0, K));
  }
  if (update_bias) {
    const std::size_t H = l.heads();
    TintAttnParams p = linear_heads(H, H, Ds, seq.max_position);
    p.pos_q = position_equals(l.bias_index());
    p.pos_k = constant_one();
    p.lambda_q.assign(H, 1.0f);
    p.lambda_k.assign(H, 1.0f);
    p.Wv = Tensor({Ds, l.d_aux});
    for (std::size_t c = 0; c < l.d_aux; ++c) p.Wv(c, c) = -eta;
    Mask mask(N, N, false);
    train_cols(mask, l.bias_index());
    const Tensor src = stack_sources(Tensor(), K, dy);
    const Tensor out = tint_attention(p, src, src, src, positions, mask);
    add_inplace(updated, slice_rows(out, 0, K));
  }
  return updated;
}

// ---- layer modules ----------------------------------------------------------------------------

namespace {

struct AttnGeometry {
  std::size_t heads, dh_aux, dh_sim;
  bool alibi;
};

AttnGeometry attn_geometry(const ModuleParams& m) {
  const std::size_t D = m.layout.d_aux, Ds = m.layout.d_sim();
  AttnGeometry g{m.heads, D / m.heads, Ds / m.heads, false};
  for (std::size_t h = 0; h < m.alibi_slopes.numel(); ++h)
    if (m.alibi_slopes[h] != 0.0f) g.alibi = true;
  if (g.dh_sim < g.dh_aux + (g.alibi ? 2 : 0)) {
    throw ConstructionError("attention module: head width " + std::to_string(g.dh_sim) +
                            " cannot hold " + std::to_string(g.dh_aux) +
                            " coordinates plus the positional pair");
  }
  return g;
}

// Head h of the simulator reads coordinates [h·dh_aux, (h+1)·dh_aux) of a
// D_aux band into its first dh_aux coordinates.
Tensor head_embed(const AttnGeometry& g, std::size_t d_sim, std::size_t d_aux) {
  Tensor W({d_sim, d_aux});
  for (std::size_t h = 0; h < g.heads; ++h)
    for (std::size_t c = 0; c < g.dh_aux; ++c) W(h * g.dh_sim + c, h * g.dh_aux + c) = 1.0f;
  return W;
}

Tensor head_extract(const AttnGeometry& g, const Tensor& out, std::size_t d_aux) {
  Tensor y({out.rows(), d_aux});
  for (std::size_t t = 0; t < out.rows(); ++t)
    for (std::size_t h = 0; h < g.heads; ++h)
      for (std::size_t c = 0; c < g.dh_aux; ++c) y(t, h * g.dh_aux + c) = out(t, h * g.dh_sim + c);
  return y;
}

// Softmax attention of the auxiliary heads with ALiBi realized through the
// positional pair (1, t)·(m_h j, −m_h) = m_h (j − t).
TintAttnParams aux_softmax_params(const ModuleParams& m, const AttnGeometry& g,
                                  std::size_t max_position) {
  const std::size_t D = m.layout.d_aux, Ds = m.layout.d_sim();
  TintAttnParams p;
  p.heads = g.heads;
  p.qk_dim = Ds;
  p.v_dim = Ds;
  p.score = ScoreFn::softmax;
  p.max_position = max_position;
  p.Wq = head_embed(g, Ds, D);
  p.Wk = p.Wq;
  if (g.alibi) {
    const std::size_t a = g.dh_aux;
    p.pos_q = [a](std::size_t pos, std::span<float> out) {
      out[a] = 1.0f;
      out[a + 1] = static_cast<float>(pos);
    };
    p.pos_k = [a](std::size_t pos, std::span<float> out) {
      out[a] = static_cast<float>(pos);
      out[a + 1] = -1.0f;
    };
    p.lambda_q.assign(g.heads, 1.0f);
    p.lambda_k.assign(m.alibi_slopes.values().begin(),
                      m.alibi_slopes.values().begin() + static_cast<std::ptrdiff_t>(g.heads));
  }
  return p;
}

Mask token_mask(const SimSequence& seq, bool transpose) {
  const std::size_t K = seq.offset(), T = seq.length(), N = K + T;
  Mask mask(N, N, false);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < T; ++j)
      if (transpose ? seq.mask(j, t) : seq.mask(t, j)) mask.set(K + t, K + j, true);
  return mask;
}

// Attention probabilities of every auxiliary head deposited as a band: head h
// block holds a_{t,j} at coordinate j.
Tensor score_band(const ModuleParams& m, const AttnGeometry& g, const SimSequence& seq,
                  const Tensor& q, const Tensor& k) {
  const std::size_t K = seq.offset(), T = seq.length(), N = K + T;
  if (T > g.dh_sim) {
    throw ConstructionError("attention module: " + std::to_string(T) +
                            " tokens exceed the score band width " + std::to_string(g.dh_sim));
  }
  TintAttnParams p = aux_softmax_params(m, g, seq.max_position);
  p.pos_v = [K](std::size_t pos, std::span<float> out) {
    if (pos >= K) out[pos - K] = 1.0f;
  };
  p.lambda_v.assign(g.heads, 1.0f);
  const Tensor qs = stack_sources(Tensor(), K, q), ks = stack_sources(Tensor(), K, k);
  return slice_rows(tint_attention(p, qs, ks, ks, combined_positions(N), token_mask(seq, false)),
                    K, N);
}

// Group-wise first-order normalization difference over groups of d_aux coordinates.
Tensor first_order_group(const Tensor& x, const Tensor& g, float eps, std::size_t d_aux,
                         NormKind kind) {
  require_same_shape(x, g, "norm module backward");
  Tensor out({x.rows(), x.cols()});
  for (std::size_t t = 0; t < x.rows(); ++t) {
    for (std::size_t c = 0; c + d_aux <= x.cols(); c += d_aux) {
      if (!first_order_normalize_span(x.row_span(t).subspan(c, d_aux),
                                      g.row_span(t).subspan(c, d_aux), eps,
                                      out.row_span(t).subspan(c, d_aux), kind)) {
        throw DegenerateInput("norm module backward: token " + std::to_string(t) +
                              " has spread below the degenerate floor");
      }
    }
  }
  return out;
}

NormKind norm_kind(ModuleKind k) {
  return k == ModuleKind::layernorm ? NormKind::layernorm : NormKind::rmsnorm;
}

std::string part(const std::string& tag, const char* name) { return tag + "." + name; }
std::string part(const std::string& tag, const char* name, std::size_t k) {
  return tag + "." + name + "." + std::to_string(k);
}

}  // namespace

void simulate_forward(const ModuleParams& m, SimSequence& seq, const std::string& tag,
                      bool record_scores) {
  const PrefixLayout& l = m.layout;
  const Tensor x = seq.main();
  seq.declare_band(part(tag, "x"), x);
  switch (m.kind) {
    case ModuleKind::linear:
      seq.set_main(linear_forward_module(l, m.prefix("W"), x, seq));
      return;
    case ModuleKind::attention: {
      const AttnGeometry g = attn_geometry(m);
      const Tensor q = linear_forward_module(l, m.prefix("q"), x, seq);
      const Tensor k = linear_forward_module(l, m.prefix("k"), x, seq);
      const Tensor v = linear_forward_module(l, m.prefix("v"), x, seq);
      const std::size_t K = seq.offset(), N = K + seq.length();
      TintAttnParams p = aux_softmax_params(m, g, seq.max_position);
      p.Wv = head_embed(g, l.d_sim(), l.d_aux);
      const Tensor out = tint_attention(p, stack_sources(Tensor(), K, q),
                                        stack_sources(Tensor(), K, k),
                                        stack_sources(Tensor(), K, v), combined_positions(N),
                                        token_mask(seq, false));
      const Tensor o = head_extract(g, slice_rows(out, K, N), l.d_aux);
      seq.declare_band(part(tag, "q"), q);
      seq.declare_band(part(tag, "k"), k);
      seq.declare_band(part(tag, "v"), v);
      if (record_scores) seq.declare_band(part(tag, "scores"), score_band(m, g, seq, q, k));
      seq.declare_band(part(tag, "o"), o);
      seq.set_main(linear_forward_module(l, m.prefix("o"), o, seq));
      return;
    }
    case ModuleKind::layernorm:
    case ModuleKind::rmsnorm: {
      const Tensor one = Tensor::row(std::vector<float>(l.d_aux, 1.0f));
      const GroupNormResult gn = group_norm(one, Tensor({1, l.d_aux}), seq.tokens, l.d_aux,
                                            norm_kind(m.kind), GroupPolicy::zero_group);
      const std::size_t groups = l.stack;
      for (std::size_t idx : gn.degenerate_groups) {
        if (idx % groups == 0) {
          throw DegenerateInput("norm module: token " + std::to_string(idx / groups) +
                                " has spread below the degenerate floor");
        }
      }
      seq.set_main(linear_forward_module(l, m.prefix("norm"), slice_cols(gn.y, 0, l.d_aux), seq));
      return;
    }
    case ModuleKind::activation:
      seq.set_main(activation_eval(x, m.activation, false));
      return;
    case ModuleKind::glu: {
      const Tensor lin = linear_forward_module(l, m.prefix("gate_w"), x, seq);
      const Tensor gate = linear_forward_module(l, m.prefix("gate_v"), x, seq);
      const Tensor y = hadamard(lin, activation_eval(gate, m.activation, false));
      seq.declare_band(part(tag, "linear"), lin);
      seq.declare_band(part(tag, "gate"), gate);
      seq.declare_band(part(tag, "y"), y);
      seq.set_main(linear_forward_module(l, m.prefix("gate_o"), y, seq));
      return;
    }
    case ModuleKind::ffn: {
      Tensor out;
      for (std::size_t k = 0; k < kFfnParts; ++k) {
        const std::string n = std::to_string(k);
        const Tensor up = linear_forward_module(l, m.prefix("up." + n), x, seq);
        const Tensor act = activation_eval(up, m.activation, false);
        const Tensor piece = linear_forward_module(l, m.prefix("down." + n), act, seq);
        seq.declare_band(part(tag, "up", k), up);
        seq.declare_band(part(tag, "act", k), act);
        out = k == 0 ? piece : add(out, piece);
      }
      seq.set_main(out);
      return;
    }
  }
}

void simulate_backward(const ModuleParams& m, SimSequence& seq, const std::string& tag,
                       const SimEpsilons& eps) {
  const PrefixLayout& l = m.layout;
  const Tensor dy = seq.main();
  const Tensor& x = seq.band(part(tag, "x"));
  seq.declare_band(part(tag, "dy"), dy);
  switch (m.kind) {
    case ModuleKind::linear:
      seq.set_main(linear_backward_module(l, m.prefix("W"), dy, seq));
      return;
    case ModuleKind::attention: {
      const AttnGeometry g = attn_geometry(m);
      const Tensor d_o = linear_backward_module(l, m.prefix("o"), dy, seq);
      // Recompute the probabilities, then apply their transpose with
      // one-hot positional queries against the score band.
      const Tensor scores = score_band(m, g, seq, seq.band(part(tag, "q")), seq.band(part(tag, "k")));
      const std::size_t K = seq.offset(), N = K + seq.length(), Ds = l.d_sim();
      TintAttnParams p = linear_heads(g.heads, Ds, Ds, seq.max_position);
      p.pos_q = [K](std::size_t pos, std::span<float> out) {
        if (pos >= K) out[pos - K] = 1.0f;
      };
      p.lambda_q.assign(g.heads, 1.0f);
      p.Wk = Tensor::identity(Ds);
      p.Wv = head_embed(g, Ds, l.d_aux);
      const Tensor out =
          tint_attention(p, stack_sources(Tensor(), K, scores), stack_sources(Tensor(), K, scores),
                         stack_sources(Tensor(), K, d_o), combined_positions(N),
                         token_mask(seq, true));
      const Tensor dv = head_extract(g, slice_rows(out, K, N), l.d_aux);
      seq.declare_band(part(tag, "dv"), dv);
      seq.set_main(linear_backward_module(l, m.prefix("v"), dv, seq));
      return;
    }
    case ModuleKind::layernorm:
    case ModuleKind::rmsnorm: {
      const NormKind kind = norm_kind(m.kind);
      const Tensor g = linear_backward_module(l, m.prefix("norm"), dy, seq);
      seq.set_main(first_order_group(x, g, eps.ln, l.d_aux, kind));
      return;
    }
    case ModuleKind::activation:
      seq.set_main(first_order_activation(x, dy, eps.act, m.activation));
      return;
    case ModuleKind::glu: {
      const Tensor& lin = seq.band(part(tag, "linear"));
      const Tensor& gate = seq.band(part(tag, "gate"));
      const Tensor dyg = linear_backward_module(l, m.prefix("gate_o"), dy, seq);
      const Tensor d_linear = hadamard(dyg, activation_eval(gate, m.activation, false));
      const Tensor d_gate = glu_gate_difference(gate, lin, dyg, eps.glu, m.activation);
      seq.declare_band(part(tag, "dlinear"), d_linear);
      seq.declare_band(part(tag, "dgate"), d_gate);
      seq.set_main(add(linear_backward_module(l, m.prefix("gate_w"), d_linear, seq),
                       linear_backward_module(l, m.prefix("gate_v"), d_gate, seq)));
      return;
    }
    case ModuleKind::ffn: {
      Tensor dx;
      for (std::size_t k = 0; k < kFfnParts; ++k) {
        const std::string n = std::to_string(k);
        const Tensor& up = seq.band(part(tag, "up", k));
        const Tensor d_act = linear_backward_module(l, m.prefix("down." + n), dy, seq);
        const Tensor d_up = first_order_activation(up, d_act, eps.act, m.activation);
        seq.declare_band(part(tag, "dup", k), d_up);
        const Tensor piece = linear_backward_module(l, m.prefix("up." + n), d_up, seq);
        dx = k == 0 ? piece : add(dx, piece);
      }
      seq.set_main(dx);
      return;
    }
  }
}

void simulate_descent(ModuleParams& m, const SimSequence& seq, const std::string& tag, float eta) {
  const PrefixLayout& l = m.layout;
  auto step = [&](const std::string& slot, const Tensor& x, const Tensor& dy, bool weight,
                  bool bias) {
    m.prefixes[slot] = linear_descent_module(l, m.prefix(slot), x, dy, seq, eta, weight, bias);
  };
  const Tensor& x = seq.band(part(tag, "x"));
  const Tensor& dy = seq.band(part(tag, "dy"));
  switch (m.kind) {
    case ModuleKind::linear:
      step("W", x, dy, true, true);
      return;
    case ModuleKind::attention:
      step("o", seq.band(part(tag, "o")), dy, true, true);
      step("v", x, seq.band(part(tag, "dv")), true, true);
      return;
    case ModuleKind::layernorm:
    case ModuleKind::rmsnorm:
      step("norm", x, dy, false, true);
      return;
    case ModuleKind::activation:
      return;
    case ModuleKind::glu:
      step("gate_o", seq.band(part(tag, "y")), dy, true, true);
      step("gate_w", x, seq.band(part(tag, "dlinear")), true, true);
      step("gate_v", x, seq.band(part(tag, "dgate")), true, true);
      return;
    case ModuleKind::ffn:
      for (std::size_t k = 0; k < kFfnParts; ++k) {
        const std::string n = std::to_string(k);
        step("down." + n, seq.band(part(tag, "act", k)), dy, true, k == 0);
        step("up." + n, x, seq.band(part(tag, "dup", k)), true, true);
      }
      return;
  }
}

std::vector<Tensor> read_scores_band(const SimSequence& seq, const std::string& tag,
                                     std::size_t heads) {
  const Tensor& band = seq.band(part(tag, "scores"));
  const std::size_t T = seq.length(), dh = band.cols() / heads;
  std::vector<Tensor> scores(heads, Tensor({T, T}));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < T; ++j) scores[h](t, j) = band(t, h * dh + j);
  return scores;
}

void lm_head_grad_module(const Tensor& embedding, SimSequence& seq,
                         const std::vector<std::uint8_t>& loss_positions) {
  const std::size_t T = seq.length(), D = seq.layout.d_aux, K = seq.offset(), N = K + T;
  const Tensor& x_un = seq.band("x_un");
  if (embedding.cols() != D) throw DimensionError("lm head module: embedding width mismatch");
  // Feed-forward layer with softmax activation: hidden weights E, output Eᵀ.
  const Tensor y = matmul(softmax_rows(matmul_a_bt(seq.main(), embedding)), embedding);

  auto active = [&](std::size_t t) {
    return t < loss_positions.size() && loss_positions[t] && t + 1 < T &&
           seq.segments[t] == Segment::train;
  };
  TintAttnParams p = linear_heads(1, 1, D, seq.max_position);
  p.pos_q = constant_one();
  p.pos_k = constant_one();
  p.lambda_q = {1.0f};
  p.lambda_k = {1.0f};
  Mask self(N, N, false), next(N, N, false);
  for (std::size_t t = 0; t < T; ++t) {
    if (!active(t)) continue;
    self.set(K + t, K + t, true);
    next.set(K + t, K + t + 1, true);
  }
  const auto positions = combined_positions(N);
  const Tensor zeros({K, D});
  p.Wv = Tensor::identity(D);
  const Tensor y_src = stack_sources(zeros, K, y);
  const Tensor keep = tint_attention(p, y_src, y_src, y_src, positions, self);
  p.Wv = scale(Tensor::identity(D), -1.0f);
  const Tensor un_src = stack_sources(zeros, K, x_un);
  const Tensor target = tint_attention(p, un_src, un_src, un_src, positions, next);
  seq.set_main(slice_rows(add(keep, target), K, N));
}

}  // namespace tint
