#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tint/aux_model.hpp"
#include "tint/finetune.hpp"
#include "tint/tint_modules.hpp"

namespace tint {

// ---- configuration -------------------------------------------------------------------

struct TinTConfig {
  std::size_t stack = 4;  // S
  float eps_ln = 1e-3f;
  float eps_act = 1e-3f;
  float eps_glu = 1e-3f;
  float eta = 1e-3f;
  std::size_t steps = 1;       // N, unrolled
  std::size_t top_layers = 0;  // layers receiving descent, counted from the top; 0 = all
  LossSpec loss;
  AuxMaskKind aux_mask = AuxMaskKind::causal;
  bool bias_token = true;      // K = ceil(D/S) + 1 instead of ceil(D/S)
  std::size_t max_depth = 64;  // cap on N x updated layers

  std::size_t d_sim(const AuxConfig& aux) const { return stack * aux.d_aux; }
  std::size_t h_sim(const AuxConfig& aux) const;
  std::size_t prefix_tokens(const AuxConfig& aux) const;
  std::size_t t_sim(const AuxConfig& aux) const { return aux.t_aux + prefix_tokens(aux); }
  std::size_t lowest_layer(const AuxConfig& aux) const;

  // Arithmetic checks only (S >= 1, H_sim | D_sim, depth cap); throws ConfigError.
  void validate(const AuxConfig& aux) const;
  PrefixLayout layout(const AuxConfig& aux) const;
  FinetuneOptions finetune_options() const;  // the matching oracle settings
  SimEpsilons epsilons() const { return {eps_ln, eps_act, eps_glu}; }
};

// ---- parameter counting --------------------------------------------------------------

struct PhaseCount {
  std::uint64_t forward = 0, backward = 0, descent = 0;
  std::uint64_t total() const { return forward + backward + descent; }
  PhaseCount& operator+=(const PhaseCount& o);
};

struct ModuleCountRow {
  std::string name;
  PhaseCount count;
};

struct ParamCount {
  std::size_t d_sim = 0, h_sim = 0, t_sim = 0, prefix_tokens = 0;
  std::uint64_t q_split = 0;  // D_sim²/H_sim + H_sim·D_sim
  std::uint64_t q = 0;        // 4 Q_split + 3 T_sim D_sim / H_sim
  std::vector<ModuleCountRow> rows;  // linear, layernorm, self-attention, activation
  PhaseCount block;
  PhaseCount model;  // layers x block
  // Closed form L (c1 D_sim²/H_sim + c2 D_sim H_sim + c3 T_sim D_sim/H_sim) with the
  // smallest integer constants that reproduce `model.total()`.
  std::uint64_t c1 = 0, c2 = 0, c3 = 0;
  std::uint64_t closed_form = 0;
};

// Table-style parameter counts. Requires only arithmetic validity of the configs.
ParamCount count_params(const AuxConfig& aux, const TinTConfig& cfg);

// ---- stack --------------------------------------------------------------------------------

enum class StackOp { embed, save_band, add_band, forward, backward, descent, loss_grad, readout };
enum class StackPhase { train_forward, loss, train_backward, descent, eval_forward, readout };

std::string_view to_string(StackOp op);
std::string_view to_string(StackPhase phase);

inline constexpr std::size_t kNoLayer = std::numeric_limits<std::size_t>::max();

struct StackEntry {
  StackOp op = StackOp::embed;
  StackPhase phase = StackPhase::train_forward;
  std::size_t step = 0;         // unrolled iteration; `steps` for the eval pass
  std::size_t layer = kNoLayer; // auxiliary layer, kNoLayer for head modules
  std::string slot;             // "ln1", "attn", "ln2", "ffn", "ln_f"
  ModuleKind kind = ModuleKind::linear;
  std::string tag;              // band namespace of module entries
  std::vector<std::string> reads, writes;
  // Parameters charged by the counting rules; entries reusing the weights of
  // an earlier entry (later unrolled steps, the eval pass) are charged 0.
  std::uint64_t charge = 0;
};

struct TinTStack {
  AuxModel initial;  // source of the frozen head and of the prefixes below
  TinTConfig config;
  PrefixLayout layout;
  // Encoded modules per auxiliary layer: ln1, attn, ln2, ffn.
  std::vector<std::vector<ModuleParams>> modules;
  ModuleParams ln_f;
  std::vector<StackEntry> entries;

  std::uint64_t charged_parameters() const;
  std::size_t count(StackOp op) const;
  std::string dump() const;  // one line per entry
};

// Throws ConfigError when the depth cap is exceeded and ConstructionError when a
// layer cannot be realized (head budget, band widths, positional bias geometry).
TinTStack build_tint(const AuxModel& model, const TinTConfig& cfg);

// ---- input formatting and execution ----------------------------------------------------

struct FormattedInput {
  std::vector<std::uint32_t> tokens;
  std::size_t split = 0;                // r
  std::vector<Segment> segments;        // train for t < r, eval afterwards
  Mask mask;                            // training blocks plus causal eval rows
  std::vector<std::uint8_t> loss_flags; // per token, zero outside the training segment
};

// Requires 1 <= r < T; throws ConfigError otherwise.
FormattedInput format_input(const std::vector<std::uint32_t>& tokens, std::size_t r,
                            const LossSpec& spec, AuxMaskKind aux_mask);

struct SimulationResult {
  Tensor eval_logits;  // (T - r) x vocab
  AuxModel model;      // decoded from the final prefixes
  std::size_t executed = 0;
};

SimulationResult run_simulation(const TinTStack& stack, const FormattedInput& input);

}  // namespace tint
