#include "tint/aux_model.hpp"

#include <cmath>
#include <random>

namespace tint {

NormKind parse_norm_kind(std::string_view name) {
  if (name == "layernorm") return NormKind::layernorm;
  if (name == "rmsnorm") return NormKind::rmsnorm;
  throw ConfigError("unknown ln_kind '" + std::string(name) + "'");
}

PosBias parse_pos_bias(std::string_view name) {
  if (name == "none") return PosBias::none;
  if (name == "alibi") return PosBias::alibi;
  throw ConfigError("unknown pos_bias '" + std::string(name) + "'");
}

FfnKind parse_ffn_kind(std::string_view name) {
  if (name == "mlp") return FfnKind::mlp;
  if (name == "glu") return FfnKind::glu;
  throw ConfigError("unknown ffn_kind '" + std::string(name) + "'");
}

std::string_view to_string(NormKind kind) {
  return kind == NormKind::layernorm ? "layernorm" : "rmsnorm";
}
std::string_view to_string(PosBias kind) { return kind == PosBias::none ? "none" : "alibi"; }
std::string_view to_string(FfnKind kind) { return kind == FfnKind::mlp ? "mlp" : "glu"; }

void AuxConfig::validate() const {
  if (d_aux == 0 || h_aux == 0 || layers == 0 || t_aux == 0 || vocab == 0) {
    throw ConfigError("aux config: all sizes must be positive");
  }
  if (d_aux % h_aux != 0) {
    throw ConfigError("aux config: d_aux=" + std::to_string(d_aux) +
                      " not divisible by h_aux=" + std::to_string(h_aux));
  }
  if (d_aux < 2) throw ConfigError("aux config: d_aux must be at least 2");
}

namespace {

void visit_linear(const std::string& prefix, LinearParams& p,
                  const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".W", p.W);
  fn(prefix + ".b", p.b);
}

void visit_norm(const std::string& prefix, NormParams& p,
                const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(prefix + ".gamma", p.gamma);
  fn(prefix + ".beta", p.beta);
}

}  // namespace

void AuxModel::for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layers." + std::to_string(l);
    LayerParams& layer = layers[l];
    visit_norm(p + ".ln1", layer.ln1, fn);
    visit_linear(p + ".attn.q", layer.attn.q, fn);
    visit_linear(p + ".attn.k", layer.attn.k, fn);
    visit_linear(p + ".attn.v", layer.attn.v, fn);
    visit_linear(p + ".attn.o", layer.attn.o, fn);
    fn(p + ".attn.alibi_slopes", layer.attn.alibi_slopes);
    visit_norm(p + ".ln2", layer.ln2, fn);
    if (config.ffn_kind == FfnKind::mlp) {
      visit_linear(p + ".ffn.up", layer.ffn.up, fn);
      visit_linear(p + ".ffn.down", layer.ffn.down, fn);
    } else {
      visit_linear(p + ".ffn.gate_w", layer.ffn.gate_w, fn);
      visit_linear(p + ".ffn.gate_v", layer.ffn.gate_v, fn);
      visit_linear(p + ".ffn.gate_o", layer.ffn.gate_o, fn);
    }
  }
  visit_norm("ln_f", ln_f, fn);
  fn("embedding", embedding);
}

void AuxModel::for_each_tensor(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<AuxModel*>(this)->for_each_tensor(
      [&](const std::string& name, Tensor& t) { fn(name, t); });
}

Tensor* AuxModel::find_tensor(std::string_view name) {
  Tensor* found = nullptr;
  for_each_tensor([&](const std::string& n, Tensor& t) {
    if (n == name) found = &t;
  });
  return found;
}

AuxModel make_zero_model(const AuxConfig& config) {
  config.validate();
  const std::size_t D = config.d_aux;
  auto linear = [](std::size_t out, std::size_t in) {
    return LinearParams{Tensor({out, in}), Tensor({1, out})};
  };
  auto norm = [D] { return NormParams{Tensor({1, D}), Tensor({1, D})}; };

  AuxModel m;
  m.config = config;
  m.layers.resize(config.layers);
  for (auto& layer : m.layers) {
    layer.ln1 = norm();
    layer.ln2 = norm();
    layer.attn.q = linear(D, D);
    layer.attn.k = linear(D, D);
    layer.attn.v = linear(D, D);
    layer.attn.o = linear(D, D);
    layer.attn.alibi_slopes = Tensor({1, config.h_aux});
    if (config.ffn_kind == FfnKind::mlp) {
      layer.ffn.up = linear(4 * D, D);
      layer.ffn.down = linear(D, 4 * D);
    } else {
      layer.ffn.gate_w = linear(D, D);
      layer.ffn.gate_v = linear(D, D);
      layer.ffn.gate_o = linear(D, D);
    }
  }
  m.ln_f = norm();
  m.embedding = Tensor({config.vocab, D});
  return m;
}

AuxModel make_random_model(const AuxConfig& config, std::uint64_t seed) {
  AuxModel m = make_zero_model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const float weight_scale = 0.8f;

  m.for_each_tensor([&](const std::string& name, Tensor& t) {
    const bool is_bias = name.ends_with(".b") || name.ends_with(".beta");
    if (name.ends_with(".gamma")) {
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 1.0f + 0.1f * normal(rng);
    } else if (name.ends_with("alibi_slopes")) {
      if (config.pos_bias == PosBias::alibi) {
        // Geometric slopes 2^(-8h/H), h = 1..H.
        for (std::size_t h = 0; h < t.numel(); ++h) {
          t[h] = std::pow(2.0f, -8.0f * static_cast<float>(h + 1) /
                                    static_cast<float>(config.h_aux));
        }
      }
    } else if (name == "embedding") {
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = normal(rng);
    } else if (is_bias) {
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = 0.05f * normal(rng);
    } else {
      const float s = weight_scale / std::sqrt(static_cast<float>(t.cols()));
      for (std::size_t i = 0; i < t.numel(); ++i) t[i] = s * normal(rng);
    }
  });
  return m;
}

GradSet make_zero_grads(const AuxConfig& config, std::size_t tokens) {
  GradSet g;
  g.grads = make_zero_model(config);
  g.input_grad = Tensor({tokens, config.d_aux});
  return g;
}

bool is_frozen_slot(std::string_view name, bool simulated) {
  if (name == "embedding" || name.ends_with("alibi_slopes")) return true;
  // The final norm is treated as part of the frozen output head.
  if (name.starts_with("ln_f")) return true;
  if (!simulated) return false;
  if (name.ends_with(".gamma")) return true;
  return name.find(".attn.q.") != std::string_view::npos ||
         name.find(".attn.k.") != std::string_view::npos;
}

}  // namespace tint
