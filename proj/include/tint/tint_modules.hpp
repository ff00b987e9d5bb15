#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tint/aux_model.hpp"
#include "tint/tensor.hpp"
#include "tint/tint_kernels.hpp"

namespace tint {

// ---- prefix layout ---------------------------------------------------------------

// S auxiliary weight rows are stacked per prefix token and each row is cut
// into S′ shards, one per attention head: head h = s·S′ + s′ reads band s,
// shard s′. Row i lives in prefix token i / S, band i % S. With the bias
// token enabled the last prefix token holds b in its first D_aux coordinates.
struct PrefixLayout {
  std::size_t d_aux = 0;
  std::size_t stack = 1;   // S
  std::size_t shards = 1;  // S′
  bool bias_token = true;

  static PrefixLayout make(std::size_t d_aux, std::size_t stack, std::size_t heads,
                           bool bias_token = true);

  std::size_t d_sim() const { return stack * d_aux; }
  std::size_t heads() const { return stack * shards; }
  std::size_t head_dim() const { return d_aux / shards; }
  std::size_t row_tokens() const { return (d_aux + stack - 1) / stack; }
  std::size_t tokens() const { return row_tokens() + (bias_token ? 1 : 0); }
  std::size_t bias_index() const { return row_tokens(); }
  std::size_t token_of(std::size_t row) const { return row / stack; }
  std::size_t band_of(std::size_t row) const { return row % stack; }
  void validate() const;
};

// Rows of W (D_aux x D_aux) and b into K x D_sim prefix embeddings.
Tensor encode_prefix(const LinearParams& p, const PrefixLayout& layout);
LinearParams decode_prefix(const Tensor& prefix, const PrefixLayout& layout);

// ---- simulator sequence --------------------------------------------------------------

enum class Segment : std::uint8_t { prefix, train, eval };

// Token embeddings of width D_sim with the auxiliary activation in the first
// D_aux coordinates. Residual copies of intermediates live in named bands
// (T x width); declaring a band twice is a construction error.
struct SimSequence {
  PrefixLayout layout;
  Tensor tokens;                  // T x D_sim
  std::vector<Segment> segments;  // per token: train or eval
  Mask mask;                      // auxiliary attention mask among tokens
  std::size_t max_position = 0;   // T_sim
  std::map<std::string, Tensor> bands;

  static SimSequence make(const PrefixLayout& layout, const Tensor& x,
                          std::vector<Segment> segments, Mask mask, std::size_t max_position);

  std::size_t length() const { return tokens.rows(); }
  std::size_t offset() const { return layout.tokens(); }  // position of token 0
  Tensor main() const;
  void set_main(const Tensor& x);
  // Coordinates above D_aux are zero.
  bool scratch_clean() const;

  const Tensor& band(const std::string& name) const;
  bool has_band(const std::string& name) const { return bands.count(name) != 0; }
  void declare_band(const std::string& name, Tensor value);
  void replace_band(const std::string& name, Tensor value);
  void drop_bands_with_prefix(std::string_view prefix);
};

// ---- module parameters -------------------------------------------------------------------

enum class ModuleKind { linear, attention, layernorm, rmsnorm, activation, glu, ffn };

std::string_view to_string(ModuleKind kind);
ModuleKind parse_module_kind(std::string_view name);

// Encoded prefixes of one auxiliary layer plus its frozen architecture constants.
// Slots: linear "W"; attention "q","k","v","o"; norms "norm" (diag γ, b);
// glu "gate_w","gate_v","gate_o"; ffn "up.0".."up.3","down.0".."down.3".
struct ModuleParams {
  ModuleKind kind = ModuleKind::linear;
  PrefixLayout layout;
  std::map<std::string, Tensor> prefixes;
  std::size_t heads = 1;  // auxiliary attention heads
  Tensor alibi_slopes;    // 1 x heads, empty when off
  Activation activation = Activation::gelu;

  const Tensor& prefix(const std::string& slot) const;
  std::size_t prefix_tokens() const;
};

inline constexpr std::size_t kFfnParts = 4;

ModuleParams encode_linear_module(const LinearParams& p, const PrefixLayout& layout);
ModuleParams encode_attention_module(const AttnParams& p, std::size_t heads,
                                     const PrefixLayout& layout);
ModuleParams encode_norm_module(const NormParams& p, NormKind kind, const PrefixLayout& layout);
ModuleParams encode_activation_module(Activation act, const PrefixLayout& layout);
ModuleParams encode_ffn_module(const FfnParams& p, FfnKind ffn, Activation act,
                               const PrefixLayout& layout);

LinearParams decode_linear_module(const ModuleParams& m);
AttnParams decode_attention_module(const ModuleParams& m);
NormParams decode_norm_module(const ModuleParams& m);
FfnParams decode_ffn_module(const ModuleParams& m);

// ---- linear modules ------------------------------------------------------------------------

// One linear attention over [prefix; tokens] computes sharded row products,
// the row aggregation realigns them and a copy head adds the bias token.
Tensor linear_forward_module(const PrefixLayout& layout, const Tensor& prefix, const Tensor& x,
                             const SimSequence& seq);
// Queries gather ∂y, keys are prefix positions, values the stored rows; the
// stacked partials are summed with a dimwise split operation.
Tensor linear_backward_module(const PrefixLayout& layout, const Tensor& prefix, const Tensor& dy,
                              const SimSequence& seq);
// Prefix positions query ∂y of the training tokens and add −η x; the bias
// token adds −η Σ ∂y. Returns the updated prefix.
Tensor linear_descent_module(const PrefixLayout& layout, const Tensor& prefix, const Tensor& x,
                             const Tensor& dy, const SimSequence& seq, float eta,
                             bool update_weight = true, bool update_bias = true);

// ---- layer modules -------------------------------------------------------------------------

struct SimEpsilons {
  float ln = 1e-3f;
  float act = 1e-3f;
  float glu = 1e-3f;
};

// The main band holds the module input on entry and its output on exit.
// Forward deposits residual copies under `tag` + ".x", ".q", ".scores", ...;
// backward reads them and deposits the incoming gradient and intermediate
// gradients; descent reads both and updates the module's prefixes.
// With record_scores off the attention forward skips its scores band, which
// lifts the token limit of that band for passes that are never differentiated.
void simulate_forward(const ModuleParams& m, SimSequence& seq, const std::string& tag,
                      bool record_scores = true);
void simulate_backward(const ModuleParams& m, SimSequence& seq, const std::string& tag,
                       const SimEpsilons& eps);
void simulate_descent(ModuleParams& m, const SimSequence& seq, const std::string& tag, float eta);

// Attention scores of the auxiliary heads, one T x T matrix per head, read
// back from the scores band of an attention forward.
std::vector<Tensor> read_scores_band(const SimSequence& seq, const std::string& tag,
                                     std::size_t heads);

// ∂x_t = Eᵀ softmax(E x_t) − x^un_{t+1} at flagged positions with a next
// token, zero elsewhere. Reads the uncontextualized embeddings from band
// "x_un".
void lm_head_grad_module(const Tensor& embedding, SimSequence& seq,
                         const std::vector<std::uint8_t>& loss_positions);

}  // namespace tint
