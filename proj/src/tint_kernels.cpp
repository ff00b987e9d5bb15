#include "tint/tint_kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tint/aux_ops.hpp"

namespace tint {

// ---- TinT attention ---------------------------------------------------------------

void TintAttnParams::validate() const {
  if (heads == 0 || qk_dim % heads != 0 || v_dim % heads != 0) {
    throw ConstructionError("tint attention: widths " + std::to_string(qk_dim) + "/" +
                            std::to_string(v_dim) + " not divisible by " + std::to_string(heads) +
                            " heads");
  }
  auto check_gate = [&](const std::vector<float>& g, const PositionalMap& m, const char* name) {
    if (!g.empty() && g.size() != heads) {
      throw ConstructionError(std::string("tint attention: gate ") + name + " has wrong size");
    }
    if (!g.empty() && !m) {
      throw ConstructionError(std::string("tint attention: gate ") + name + " without a map");
    }
  };
  check_gate(lambda_q, pos_q, "q");
  check_gate(lambda_k, pos_k, "k");
  check_gate(lambda_v, pos_v, "v");
}

namespace {

// Content projection plus gated positional part, N x width.
Tensor project(const Tensor& W, const Tensor& b, const Tensor& src, std::size_t width,
               std::size_t heads, const PositionalMap& pos, const std::vector<float>& lambda,
               std::span<const std::size_t> positions) {
  const std::size_t N = src.rows();
  Tensor out = W.empty() ? Tensor({N, width}) : matmul_a_bt(src, W);
  if (out.cols() != width) {
    throw DimensionError("tint attention: projection width " + std::to_string(out.cols()) +
                         " vs expected " + std::to_string(width));
  }
  if (!b.empty()) out = add_bias_rows(out, b);
  if (pos && !lambda.empty()) {
    const std::size_t dh = width / heads;
    std::vector<float> buf(dh);
    for (std::size_t t = 0; t < N; ++t) {
      std::fill(buf.begin(), buf.end(), 0.0f);
      pos(positions[t], buf);
      for (std::size_t h = 0; h < heads; ++h) {
        if (lambda[h] == 0.0f) continue;
        for (std::size_t c = 0; c < dh; ++c) out(t, h * dh + c) += lambda[h] * buf[c];
      }
    }
  }
  return out;
}

}  // namespace

Tensor tint_attention(const TintAttnParams& p, const Tensor& q_src, const Tensor& k_src,
                      const Tensor& v_src, std::span<const std::size_t> positions,
                      const Mask& mask) {
  p.validate();
  const std::size_t N = q_src.rows();
  if (k_src.rows() != N || v_src.rows() != N || positions.size() != N) {
    throw DimensionError("tint attention: sources disagree on sequence length");
  }
  if (mask.rows != N || mask.cols != N) throw DimensionError("tint attention: mask shape mismatch");
  for (std::size_t pos : positions) {
    if (pos >= p.max_position) {
      throw PreconditionError("tint attention: position " + std::to_string(pos) +
                              " out of range for T_sim=" + std::to_string(p.max_position));
    }
  }
  const Tensor q = project(p.Wq, p.bq, q_src, p.qk_dim, p.heads, p.pos_q, p.lambda_q, positions);
  const Tensor k = project(p.Wk, p.bk, k_src, p.qk_dim, p.heads, p.pos_k, p.lambda_k, positions);
  const Tensor v = project(p.Wv, p.bv, v_src, p.v_dim, p.heads, p.pos_v, p.lambda_v, positions);

  const std::size_t dq = p.qk_dim / p.heads, dv = p.v_dim / p.heads;
  Tensor out({N, p.v_dim});
  Tensor s({N, N});
  for (std::size_t h = 0; h < p.heads; ++h) {
    for (std::size_t t = 0; t < N; ++t) {
      for (std::size_t j = 0; j < N; ++j) {
        float acc = 0.0f;
        if (mask(t, j)) {
          for (std::size_t c = h * dq; c < (h + 1) * dq; ++c) acc += q(t, c) * k(j, c);
        }
        s(t, j) = acc;
      }
    }
    const Tensor a = p.score == ScoreFn::softmax ? masked_softmax_rows(s, mask) : s;
    for (std::size_t t = 0; t < N; ++t) {
      for (std::size_t c = h * dv; c < (h + 1) * dv; ++c) {
        float acc = 0.0f;
        for (std::size_t j = 0; j < N; ++j) {
          if (mask(t, j)) acc += a(t, j) * v(j, c);
        }
        out(t, c) = acc;
      }
    }
  }
  return out;
}

// ---- H-split operations ---------------------------------------------------------------

std::size_t SplitwiseParams::parameter_count() const {
  std::size_t n = B.numel();
  for (const Tensor& w : W) n += w.numel();
  return n;
}

std::size_t DimwiseParams::parameter_count() const {
  std::size_t n = B.numel();
  for (const Tensor& w : W) n += w.numel();
  return n;
}

SplitwiseParams splitwise_identity(std::size_t heads, std::size_t d) {
  return SplitwiseParams{std::vector<Tensor>(heads, Tensor::identity(d)), Tensor({heads, d})};
}

DimwiseParams dimwise_identity(std::size_t heads, std::size_t d) {
  return DimwiseParams{std::vector<Tensor>(d, Tensor::identity(heads)), Tensor({d, heads})};
}

Tensor hsplit_splitwise(const SplitwiseParams& p, const Tensor& e) {
  const std::size_t H = p.W.size();
  if (H == 0 || e.cols() % H != 0) {
    throw DimensionError("hsplit_splitwise: width " + std::to_string(e.cols()) +
                         " not divisible into " + std::to_string(H) + " splits");
  }
  const std::size_t d = e.cols() / H;
  if (p.B.rows() != H || p.B.cols() != d) throw DimensionError("hsplit_splitwise: bias shape");
  Tensor out({e.rows(), e.cols()});
  for (std::size_t h = 0; h < H; ++h) {
    const Tensor& W = p.W[h];
    if (W.rows() != d || W.cols() != d) throw DimensionError("hsplit_splitwise: weight shape");
    for (std::size_t t = 0; t < e.rows(); ++t) {
      for (std::size_t i = 0; i < d; ++i) {
        float acc = 0.0f;
        for (std::size_t j = 0; j < d; ++j) acc += W(i, j) * e(t, h * d + j);
        out(t, h * d + i) = acc + p.B(h, i);
      }
    }
  }
  return out;
}

Tensor hsplit_dimwise(const DimwiseParams& p, const Tensor& e) {
  const std::size_t d = p.W.size();
  if (d == 0 || e.cols() % d != 0) {
    throw DimensionError("hsplit_dimwise: width " + std::to_string(e.cols()) +
                         " not divisible by split width " + std::to_string(d));
  }
  const std::size_t H = e.cols() / d;
  if (p.B.rows() != d || p.B.cols() != H) throw DimensionError("hsplit_dimwise: bias shape");
  Tensor out({e.rows(), e.cols()});
  for (std::size_t i = 0; i < d; ++i) {
    const Tensor& W = p.W[i];
    if (W.rows() != H || W.cols() != H) throw DimensionError("hsplit_dimwise: weight shape");
    for (std::size_t t = 0; t < e.rows(); ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        float acc = 0.0f;
        for (std::size_t g = 0; g < H; ++g) acc += W(h, g) * e(t, g * d + i);
        out(t, h * d + i) = acc + p.B(i, h);
      }
    }
  }
  return out;
}

std::size_t RowAggregation::parameter_count() const {
  return gather.parameter_count() + spread.parameter_count() + collapse.parameter_count();
}

std::size_t RowAggregation::weight_count() const {
  return parameter_count() - gather.B.numel() - spread.B.numel() - collapse.B.numel();
}

Tensor RowAggregation::apply(const Tensor& e) const {
  return hsplit_dimwise(collapse, hsplit_splitwise(spread, hsplit_dimwise(gather, e)));
}

RowAggregation make_row_aggregation(std::size_t stack, std::size_t shards, std::size_t d,
                                    std::size_t rows) {
  const std::size_t H = stack * shards;
  if (rows > H * d || (rows + stack - 1) / stack > d || (rows + d - 1) / d * stack > H) {
    throw ConstructionError("row aggregation: " + std::to_string(rows) + " rows do not fit " +
                            std::to_string(H) + " heads of width " + std::to_string(d));
  }
  RowAggregation r{DimwiseParams{std::vector<Tensor>(d, Tensor({H, H})), Tensor({d, H})},
                   SplitwiseParams{std::vector<Tensor>(H, Tensor({d, d})), Tensor({H, d})},
                   DimwiseParams{std::vector<Tensor>(d, Tensor({H, H})), Tensor({d, H})}};
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t j = i / stack, s = i % stack, g = i / d, c = i % d;
    const std::size_t sigma = g * stack + s;
    for (std::size_t sp = 0; sp < shards; ++sp) r.gather.W[j](sigma, s * shards + sp) = 1.0f;
    r.spread.W[sigma](c, j) = 1.0f;
    r.collapse.W[c](g, sigma) = 1.0f;
  }
  return r;
}

DimwiseParams make_shard_sum(std::size_t stack, std::size_t shards, std::size_t d) {
  const std::size_t H = stack * shards;
  DimwiseParams p{std::vector<Tensor>(d, Tensor({H, H})), Tensor({d, H})};
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t s = 0; s < stack; ++s)
      for (std::size_t sp = 0; sp < shards; ++sp) p.W[i](sp, s * shards + sp) = 1.0f;
  return p;
}

// ---- arithmetic gadgets ------------------------------------------------------------------

namespace {
double gelu_d(double z) { return 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0))); }
}  // namespace

double gelu_multiply(double x, double y, double scale) {
  const double a = scale * x, b = scale * y;
  return std::sqrt(M_PI / 2.0) * (gelu_d(a + b) - gelu_d(a) - gelu_d(b)) / (scale * scale);
}

Tensor gelu_multiply(const Tensor& x, const Tensor& y, double scale) {
  require_same_shape(x, y, "gelu_multiply");
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<float>(gelu_multiply(x[i], y[i], scale));
  }
  return out;
}

// ---- group normalization -------------------------------------------------------------------

GroupNormResult group_norm(const Tensor& gamma, const Tensor& beta, const Tensor& e,
                           std::size_t group_size, NormKind kind, GroupPolicy policy) {
  if (group_size < 2 || e.cols() % group_size != 0) {
    throw DimensionError("group_norm: width " + std::to_string(e.cols()) +
                         " not divisible into groups of " + std::to_string(group_size));
  }
  if (gamma.numel() != group_size || beta.numel() != group_size) {
    throw DimensionError("group_norm: γ/b must have group_size entries");
  }
  const std::size_t groups = e.cols() / group_size;
  GroupNormResult r{Tensor({e.rows(), e.cols()}), {}};
  std::vector<float> z(group_size);
  for (std::size_t t = 0; t < e.rows(); ++t) {
    auto row = e.row_span(t);
    for (std::size_t g = 0; g < groups; ++g) {
      float mu = 0.0f, sigma = 0.0f;
      if (!normalize_span(row.subspan(g * group_size, group_size), z, kind, mu, sigma)) {
        if (policy == GroupPolicy::throw_error) {
          throw DegenerateInput("group_norm: row " + std::to_string(t) + " group " +
                                std::to_string(g) + " has spread below the degenerate floor");
        }
        r.degenerate_groups.push_back(t * groups + g);
        continue;
      }
      for (std::size_t i = 0; i < group_size; ++i) {
        r.y(t, g * group_size + i) = gamma[i] * z[i] + beta[i];
      }
    }
  }
  return r;
}

// ---- linear attention as softmax attention -----------------------------------------------

namespace {

using DMat = std::vector<std::vector<double>>;

DMat project_double(const Tensor& W, const Tensor& x) {
  DMat out(x.rows(), std::vector<double>(W.rows(), 0.0));
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t i = 0; i < W.rows(); ++i)
      for (std::size_t j = 0; j < W.cols(); ++j) out[t][i] += static_cast<double>(W(i, j)) * x(t, j);
  return out;
}

double frobenius(const Tensor& W) {
  double acc = 0.0;
  for (float v : W.values()) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

void check_layer(const LinearAttnLayer& layer, const Tensor& x) {
  const std::size_t D = x.cols();
  for (const Tensor* W : {&layer.Wq, &layer.Wk, &layer.Wv}) {
    if (W->rows() != D || W->cols() != D) {
      throw DimensionError("linear attention: projection " + W->shape_str() + " vs width " +
                           std::to_string(D));
    }
  }
  if (layer.heads == 0 || D % layer.heads != 0) {
    throw DimensionError("linear attention: heads must divide width");
  }
}

}  // namespace

Tensor linear_attention_apply(const LinearAttnLayer& layer, const Tensor& x, const Mask& mask) {
  check_layer(layer, x);
  const std::size_t T = x.rows(), D = x.cols(), dh = D / layer.heads;
  const DMat q = project_double(layer.Wq, x), k = project_double(layer.Wk, x),
             v = project_double(layer.Wv, x);
  Tensor out({T, D});
  for (std::size_t h = 0; h < layer.heads; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> acc(dh, 0.0);
      for (std::size_t j = 0; j < T; ++j) {
        if (!mask(t, j)) continue;
        double s = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q[t][c] * k[j][c];
        for (std::size_t c = 0; c < dh; ++c) acc[c] += s * v[j][h * dh + c];
      }
      for (std::size_t c = 0; c < dh; ++c) out(t, h * dh + c) = static_cast<float>(acc[c]);
    }
  }
  return out;
}

Tensor ConvertedSoftmaxLayer::apply(const Tensor& x, const Mask& mask) const {
  check_layer(source, x);
  const std::size_t T = x.rows(), D = x.cols(), H = source.heads, dh = D / H;
  const DMat q = project_double(source.Wq, x), k = project_double(source.Wk, x),
             v = project_double(source.Wv, x);
  const double u_score = -2.0 * std::log(eps);
  const double value_scale = 1.0 / (eps * eps * eps);
  Tensor out({T, D});
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      // Heads h: softmax over visible tokens and u with shifted logits.
      std::vector<double> logits;
      std::vector<std::size_t> visible;
      for (std::size_t j = 0; j < T; ++j) {
        if (!mask(t, j)) continue;
        double s = 0.0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) s += q[t][c] * k[j][c];
        logits.push_back(eps * s);
        visible.push_back(j);
      }
      double mx = u_score;
      for (double l : logits) mx = std::max(mx, l);
      double z = std::exp(u_score - mx);
      for (double l : logits) z += std::exp(l - mx);
      const double n = static_cast<double>(visible.size());
      for (std::size_t c = 0; c < dh; ++c) {
        double sharp = 0.0, uniform = 0.0;
        for (std::size_t i = 0; i < visible.size(); ++i) {
          const double vj = v[visible[i]][h * dh + c];
          sharp += std::exp(logits[i] - mx) / z * (value_scale * vj);
          uniform += vj / (n + 1.0);
        }
        out(t, h * dh + c) = static_cast<float>(sharp - ((n + 1.0) / eps) * uniform);
      }
    }
  }
  return out;
}

ConvertedSoftmaxLayer linear_as_softmax(const LinearAttnLayer& layer, const Tensor& x, double eps) {
  check_layer(layer, x);
  if (!(eps > 0.0)) throw PreconditionError("linear_as_softmax: ε must be positive");
  double bw = 1.0, bx = 1.0;
  for (const Tensor* W : {&layer.Wq, &layer.Wk, &layer.Wv}) bw = std::max(bw, frobenius(*W));
  for (std::size_t t = 0; t < x.rows(); ++t) {
    double n = 0.0;
    for (float v : x.row_span(t)) n += static_cast<double>(v) * v;
    bx = std::max(bx, std::sqrt(n));
  }
  const double T = static_cast<double>(x.rows());
  const double bound = 1.0 / (T * T * std::pow(bw, 5) * std::pow(bx, 5));
  if (eps > bound) {
    throw PreconditionError("linear_as_softmax: ε=" + std::to_string(eps) +
                            " exceeds 1/(T² B_w⁵ B_x⁵)=" + std::to_string(bound) + " (T=" +
                            std::to_string(x.rows()) + ", B_w=" + std::to_string(bw) +
                            ", B_x=" + std::to_string(bx) + ")");
  }
  return ConvertedSoftmaxLayer{layer, eps};
}

}  // namespace tint
