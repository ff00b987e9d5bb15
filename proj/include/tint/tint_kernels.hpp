#pragma once

#include <functional>
#include <span>
#include <vector>

#include "tint/aux_model.hpp"
#include "tint/tensor.hpp"

namespace tint {

// ---- TinT attention ------------------------------------------------------------

enum class ScoreFn { linear, softmax };

// Writes the positional contribution for sequence position `pos` into a
// per-head vector. Positions are index arithmetic; one-hots are never stored.
using PositionalMap = std::function<void(std::size_t pos, std::span<float> out)>;

// Per-head query/key/value = content projection + λ_h · positional map.
// Empty weight tensors mean a zero content part; empty maps mean a zero
// positional part. Linear scores on invisible pairs are exactly 0.
struct TintAttnParams {
  std::size_t heads = 1;
  std::size_t qk_dim = 0;  // heads x per-head query/key width
  std::size_t v_dim = 0;   // heads x per-head value width
  Tensor Wq, Wk, Wv;       // (qk_dim | v_dim) x source width
  Tensor bq, bk, bv;       // 1 x (qk_dim | v_dim), may be empty
  PositionalMap pos_q, pos_k, pos_v;
  std::vector<float> lambda_q, lambda_k, lambda_v;  // size heads, may be empty
  ScoreFn score = ScoreFn::softmax;
  std::size_t max_position = 0;  // T_sim

  void validate() const;
};

// Attention over N positions; the three sources are N-row column bands of the
// same positions. Throws PreconditionError if a position is >= max_position.
Tensor tint_attention(const TintAttnParams& p, const Tensor& q_src, const Tensor& k_src,
                      const Tensor& v_src, std::span<const std::size_t> positions,
                      const Mask& mask);

// ---- H-split linear operations ---------------------------------------------------

struct SplitwiseParams {
  std::vector<Tensor> W;  // H matrices, d x d
  Tensor B;               // H x d
  std::size_t parameter_count() const;
};

struct DimwiseParams {
  std::vector<Tensor> W;  // d matrices, H x H
  Tensor B;               // d x H
  std::size_t parameter_count() const;
};

SplitwiseParams splitwise_identity(std::size_t heads, std::size_t d);
DimwiseParams dimwise_identity(std::size_t heads, std::size_t d);

// Split h of each output row = W_h · (split h of the input row) + B_h.
Tensor hsplit_splitwise(const SplitwiseParams& p, const Tensor& e);
// For each in-split coordinate i, the H values at i are mixed by W_i; the
// output keeps the split-major layout.
Tensor hsplit_dimwise(const DimwiseParams& p, const Tensor& e);

// Three-stage aggregation of sharded per-head dot products. Head h = s·S′ + s′
// holds, at coordinate j, the partial product of auxiliary row jS + s with
// shard s′. Stage A (dimwise) sums the S′ shards of row i = jS + s into split
// g·S + s with g = i div d; stage B (splitwise) moves coordinate j to i mod d;
// stage C (dimwise) collapses split g·S + s onto split g. Row i ends at
// output coordinate i.
struct RowAggregation {
  DimwiseParams gather;
  SplitwiseParams spread;
  DimwiseParams collapse;
  std::size_t parameter_count() const;
  std::size_t weight_count() const;  // excluding biases
  Tensor apply(const Tensor& e) const;
};

RowAggregation make_row_aggregation(std::size_t stack, std::size_t shards, std::size_t d,
                                    std::size_t rows);

// Dimwise sum of the S stacked partials: split s·S′ + s′ onto split s′.
DimwiseParams make_shard_sum(std::size_t stack, std::size_t shards, std::size_t d);

// ---- arithmetic gadgets ------------------------------------------------------------

inline constexpr double kGeluMultiplyScale = 0.1;

// x·y ≈ √(π/2)(G(sx + sy) − G(sx) − G(sy)) / s² with G = GeLU.
double gelu_multiply(double x, double y, double scale = kGeluMultiplyScale);
Tensor gelu_multiply(const Tensor& x, const Tensor& y, double scale = kGeluMultiplyScale);

// ---- group normalization -----------------------------------------------------------

enum class GroupPolicy { throw_error, zero_group };

struct GroupNormResult {
  Tensor y;
  std::vector<std::size_t> degenerate_groups;  // (row * groups + group) indices
};

// Each contiguous group of `group_size` coordinates is normalized on its own
// and mapped through the shared γ, b (length group_size). Degenerate groups
// either raise DegenerateInput or produce zeros, per policy.
GroupNormResult group_norm(const Tensor& gamma, const Tensor& beta, const Tensor& e,
                           std::size_t group_size, NormKind kind, GroupPolicy policy);

// ---- linear attention as softmax attention ------------------------------------------

// Multi-head linear attention: y_t^h = Σ_{j visible} ⟨q_t^h, k_j^h⟩ v_j^h.
struct LinearAttnLayer {
  std::size_t heads = 1;
  Tensor Wq, Wk, Wv;  // D x D
};

Tensor linear_attention_apply(const LinearAttnLayer& layer, const Tensor& x, const Mask& mask);

// Softmax attention with 2H heads plus an extra key token u. Heads h < H use
// scores ε⟨q,k⟩ with score −2 log ε on u and values ε⁻³ v; heads H + h are
// uniform over the visible tokens and u, with values v and 0 on u. The output
// map takes head h minus ((n_t + 1)/ε) times head H + h, where n_t counts the
// visible tokens. Evaluated in double precision.
struct ConvertedSoftmaxLayer {
  LinearAttnLayer source;
  double eps = 0.0;
  Tensor apply(const Tensor& x, const Mask& mask) const;
  std::size_t heads() const { return 2 * source.heads; }
};

// Requires ε ≤ 1 / (T² B_w⁵ B_x⁵) with B_w the largest Frobenius norm of the
// projections and B_x the largest token norm of `x` (each floored at 1).
ConvertedSoftmaxLayer linear_as_softmax(const LinearAttnLayer& layer, const Tensor& x, double eps);

}  // namespace tint
