#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "tint/tensor.hpp"

namespace tint {

enum class NormKind { layernorm, rmsnorm };
enum class PosBias { none, alibi };
enum class FfnKind { mlp, glu };

NormKind parse_norm_kind(std::string_view name);
PosBias parse_pos_bias(std::string_view name);
FfnKind parse_ffn_kind(std::string_view name);
std::string_view to_string(NormKind kind);
std::string_view to_string(PosBias kind);
std::string_view to_string(FfnKind kind);

struct AuxConfig {
  std::size_t d_aux = 16;
  std::size_t h_aux = 4;
  std::size_t layers = 2;
  std::size_t t_aux = 16;
  std::size_t vocab = 16;
  NormKind ln_kind = NormKind::layernorm;
  PosBias pos_bias = PosBias::none;
  FfnKind ffn_kind = FfnKind::mlp;
  Activation activation = Activation::gelu;

  void validate() const;  // throws ConfigError
  std::size_t head_dim() const { return d_aux / h_aux; }
  std::size_t ffn_hidden() const { return ffn_kind == FfnKind::mlp ? 4 * d_aux : d_aux; }
  bool operator==(const AuxConfig&) const = default;
};

struct LinearParams {
  Tensor W;  // out x in
  Tensor b;  // 1 x out
};

struct NormParams {
  Tensor gamma;  // 1 x D
  Tensor beta;   // 1 x D
};

struct AttnParams {
  LinearParams q, k, v, o;
  Tensor alibi_slopes;  // 1 x H, zeros when the model has no positional bias
};

// For mlp: up is 4D x D, down is D x 4D. For glu: gate_w, gate_v, gate_o are D x D.
struct FfnParams {
  LinearParams up, down;
  LinearParams gate_w, gate_v, gate_o;
};

struct LayerParams {
  NormParams ln1;
  AttnParams attn;
  NormParams ln2;
  FfnParams ffn;
};

struct AuxModel {
  AuxConfig config;
  std::vector<LayerParams> layers;
  NormParams ln_f;
  Tensor embedding;  // vocab x D, frozen

  // Canonical tensor order used by checkpoints and gradient sets.
  void for_each_tensor(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_tensor(const std::function<void(const std::string&, const Tensor&)>& fn) const;
  Tensor* find_tensor(std::string_view name);
};

// Zero-filled model with every tensor shaped for `config`.
AuxModel make_zero_model(const AuxConfig& config);

// Deterministic random model. Weights ~ N(0, scale^2 / fan_in); norm gains near 1.
AuxModel make_random_model(const AuxConfig& config, std::uint64_t seed);

// Same named slots as AuxModel; frozen slots stay exactly zero.
struct GradSet {
  AuxModel grads;
  Tensor input_grad;  // T x D gradient w.r.t. the token embeddings fed to layer 0
};

GradSet make_zero_grads(const AuxConfig& config, std::size_t tokens);

// Names of slots that must remain zero for a regime ("simulated" or "exact").
bool is_frozen_slot(std::string_view name, bool simulated);

}  // namespace tint
