#pragma once

#include <span>
#include <vector>

#include "tint/aux_model.hpp"
#include "tint/tensor.hpp"

// Per-layer forward, backward and descent rules of the auxiliary transformer.
// Sequences are T x D matrices with one token per row; linear maps act as
// y_t = W x_t + b.
namespace tint {

// ---- linear ---------------------------------------------------------------

Tensor linear_fwd(const LinearParams& p, const Tensor& x);
Tensor linear_bwd(const Tensor& W, const Tensor& dy);
// Gradients {dW = Σ dy_t x_tᵀ, db = Σ dy_t}.
LinearParams linear_grads(const Tensor& x, const Tensor& dy);
LinearParams linear_desc(const LinearParams& p, const Tensor& x, const Tensor& dy, float eta);

// ---- self-attention (without the output projection) -----------------------

struct AttnCache {
  Tensor x;                   // layer input, T x D
  Tensor q, k, v;             // T x D
  std::vector<Tensor> scores;  // per head, T x T, row t = distribution over keys
  Mask mask;
};

struct AttnForward {
  Tensor y;  // T x D, concatenated head mixtures
  AttnCache cache;
};

// Score of head h for query t and key j: ⟨q_t^h, k_j^h⟩ + m_h (j - t).
AttnForward attn_fwd(const AttnParams& p, std::size_t heads, const Tensor& x, const Mask& mask);

struct AttnGrads {
  Tensor dx, dq, dk, dv;
};

AttnGrads attn_bwd_exact(const AttnParams& p, const AttnCache& cache, const Tensor& dy);

// ∂v_t = Σ_j a_{j,t} ∂y_j per head; gradients through the scores are dropped.
Tensor attn_value_grad(const std::vector<Tensor>& scores, const Tensor& dy);
AttnGrads attn_bwd_approx(const AttnParams& p, const std::vector<Tensor>& scores,
                          const Tensor& dy);
AttnParams attn_value_desc(const AttnParams& p, const Tensor& x,
                           const std::vector<Tensor>& scores, const Tensor& dy, float eta);

// 1 - min_t max_j a_{t,j}, maximized over heads. Rows with no visible key are skipped.
float epsilon_hardness(const std::vector<Tensor>& scores);

// ---- normalization ----------------------------------------------------------

inline constexpr double kDegenerateSigma = 1e-12;

// Normalizes `in` into `out` with population statistics. Returns false (and
// leaves `out` untouched) when the spread is below kDegenerateSigma.
bool normalize_span(std::span<const float> in, std::span<float> out, NormKind kind,
                    float& mu, float& sigma);

struct NormForward {
  Tensor y, z;
  Tensor mu, sigma;  // T x 1
};

NormForward norm_fwd(const NormParams& p, const Tensor& x, NormKind kind);
// Row-wise normalization with unit gain and zero bias.
Tensor normalize_rows(const Tensor& x, NormKind kind);

Tensor ln_bwd_exact(const Tensor& gamma, const Tensor& dy, const Tensor& z, const Tensor& sigma,
                    NormKind kind);

// First-order rules (f(x + eps g) - f(x)) / eps. The perturbed point, both
// evaluations and the difference are formed in double and rounded once, so
// float32 rounding is not amplified by 1 / eps. The oracle and the simulator
// both route their first-order rules through these.
// Returns false when x or x + eps g is degenerate; `out` is then untouched.
bool first_order_normalize_span(std::span<const float> x, std::span<const float> g, float eps,
                                std::span<float> out, NormKind kind);
Tensor first_order_activation(const Tensor& x, const Tensor& g, float eps, Activation kind);

Tensor ln_bwd_approx(const Tensor& gamma, const Tensor& dy, const Tensor& x, float eps,
                     NormKind kind);
NormParams norm_grads(const Tensor& z, const Tensor& dy);
NormParams ln_desc(const NormParams& p, const Tensor& z, const Tensor& dy, float eta,
                   bool update_gamma);

// ---- activations --------------------------------------------------------------

Tensor act_bwd_exact(const Tensor& dy, const Tensor& x, Activation kind);
Tensor act_bwd_approx(const Tensor& dy, const Tensor& x, float eps, Activation kind);

// ---- gated linear unit ----------------------------------------------------------

struct GluForward {
  Tensor out;     // W^o y + b_o
  Tensor y;       // product before the output projection
  Tensor linear;  // W x + b_W
  Tensor gate;    // V x + b_V
};

GluForward glu_fwd(const FfnParams& p, const Tensor& x, Activation kind);

struct GluGrads {
  Tensor dx;
  Tensor d_linear;  // gradient w.r.t. W x + b_W
  Tensor d_gate;    // gradient (or first-order surrogate) w.r.t. V x + b_V
  Tensor dy;        // gradient w.r.t. the pre-projection product
};

GluGrads glu_bwd_exact(const FfnParams& p, const GluForward& fwd, const Tensor& dout,
                       Activation kind);
// σ(g + eps·dy) ⊙ (w / eps) - σ(g) ⊙ (w / eps)
Tensor glu_gate_difference(const Tensor& gate, const Tensor& linear, const Tensor& dy, float eps,
                           Activation kind);
GluGrads glu_bwd_approx(const FfnParams& p, const GluForward& fwd, const Tensor& dout, float eps,
                        Activation kind);
FfnParams glu_desc(const FfnParams& p, const Tensor& x, const GluForward& fwd,
                   const GluGrads& grads, const Tensor& dout, float eta);

// ---- output head ------------------------------------------------------------------

// Eᵀ(softmax(E x_t) - q_t) for every row t. Rows of q must sum to 1.
Tensor lm_head_grad(const Tensor& E, const Tensor& x, const Tensor& q);
// Σ_t KL(q_t || softmax(E x_t)) up to the entropy of q, i.e. cross-entropy.
double lm_head_loss(const Tensor& E, const Tensor& x, const Tensor& q);

}  // namespace tint
