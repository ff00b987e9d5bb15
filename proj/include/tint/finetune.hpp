#pragma once

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

#include "tint/aux_model.hpp"
#include "tint/aux_ops.hpp"

namespace tint {

enum class Regime { exact, simulated };
enum class LossMode { label, full_context };
enum class LossFormat { single, multi };
// Visibility among training tokens inside the auxiliary model's own attention.
enum class AuxMaskKind { causal, bidirectional };

Regime parse_regime(std::string_view name);
LossMode parse_loss_mode(std::string_view name);
LossFormat parse_loss_format(std::string_view name);
AuxMaskKind parse_aux_mask(std::string_view name);
std::string_view to_string(Regime v);
std::string_view to_string(LossMode v);
std::string_view to_string(LossFormat v);
std::string_view to_string(AuxMaskKind v);

// Position p is trained to predict token p + 1.
struct LossSpec {
  LossMode mode = LossMode::label;
  LossFormat format = LossFormat::multi;
  // Partition of the training segment; empty means one exemplar spanning it.
  std::vector<std::size_t> exemplar_lengths;
  // Number of trailing tokens of each exemplar that form its label.
  std::size_t label_len = 1;

  // [begin, end) ranges of every exemplar inside a training segment of length r.
  std::vector<std::pair<std::size_t, std::size_t>> exemplars(std::size_t r) const;
  // Flag per position of the training segment marking positions whose
  // next-token prediction enters the loss.
  std::vector<std::uint8_t> loss_positions(std::size_t r) const;
};

// Mask over the first r tokens used while computing training gradients.
Mask train_mask(std::size_t r, const LossSpec& spec, AuxMaskKind kind);
// Mask over all T tokens for evaluation: the training block is masked as in
// training and every evaluation token sees all earlier positions and itself.
Mask eval_mask(std::size_t T, std::size_t r, const LossSpec& spec, AuxMaskKind kind);

struct LayerTrace {
  Tensor x_in;
  NormForward ln1;
  AttnForward attn;
  Tensor attn_out;  // after the output projection
  Tensor x_mid;
  NormForward ln2;
  Tensor up;        // mlp pre-activation
  Tensor act;       // mlp activation output
  GluForward glu;
  Tensor ffn_out;
  Tensor x_out;
};

struct ModelTrace {
  Tensor embeddings;  // uncontextualized token embeddings
  std::vector<LayerTrace> layers;
  NormForward ln_f;
  Tensor logits;  // T x vocab
};

Tensor embed_tokens(const AuxModel& model, const std::vector<std::uint32_t>& tokens);
ModelTrace model_forward(const AuxModel& model, const std::vector<std::uint32_t>& tokens,
                         const Mask& mask);

struct BackwardOptions {
  Regime regime = Regime::simulated;
  float eps_ln = 1e-3f;
  float eps_act = 1e-3f;
  float eps_glu = 1e-3f;
  std::size_t lowest_layer = 0;  // layers below receive no gradient
};

// Gradients of the summed next-token cross-entropy over flagged positions.
GradSet model_backward(const AuxModel& model, const ModelTrace& trace,
                       const std::vector<std::uint32_t>& tokens,
                       const std::vector<std::uint8_t>& loss_positions,
                       const BackwardOptions& options);

double sequence_loss(const ModelTrace& trace, const AuxModel& model,
                     const std::vector<std::uint32_t>& tokens,
                     const std::vector<std::uint8_t>& loss_positions);

struct FinetuneOptions {
  float eta = 1e-3f;
  std::size_t steps = 1;
  Regime regime = Regime::simulated;
  std::size_t top_layers = 0;  // 0 updates every layer
  float eps_ln = 1e-3f;
  float eps_act = 1e-3f;
  float eps_glu = 1e-3f;
  AuxMaskKind aux_mask = AuxMaskKind::causal;
  std::size_t max_depth = 64;  // cap on steps x updated layers
};

std::size_t lowest_updated_layer(const AuxConfig& config, std::size_t top_layers);

// Summed training gradients for one step on tokens[0, r).
GradSet training_gradients(const AuxModel& model, const std::vector<std::uint32_t>& tokens,
                           std::size_t r, const LossSpec& spec, const FinetuneOptions& options,
                           double* loss_out = nullptr);

// θ ← θ - η g on every non-frozen slot of layers >= lowest.
AuxModel apply_gradients(const AuxModel& model, const GradSet& grads, float eta,
                         std::size_t lowest, Regime regime);

struct FinetuneResult {
  AuxModel model;
  Tensor eval_logits;                // (T - r) x vocab
  std::vector<double> train_losses;  // loss before each step
};

FinetuneResult finetune_eval(const AuxModel& model, const std::vector<std::uint32_t>& tokens,
                             std::size_t r, const LossSpec& spec,
                             const FinetuneOptions& options);

// Summed cross-entropy of eval_logits against tokens r + 1 .. T - 1.
double eval_loss(const Tensor& eval_logits, const std::vector<std::uint32_t>& tokens,
                 std::size_t r);

}  // namespace tint
