#include "tint/aux_ops.hpp"

#include <algorithm>
#include <cmath>

namespace tint {

// ---- linear ---------------------------------------------------------------

Tensor linear_fwd(const LinearParams& p, const Tensor& x) {
  if (x.cols() != p.W.cols()) {
    throw DimensionError("linear_fwd: input " + x.shape_str() + " vs weight " + p.W.shape_str());
  }
  return add_bias_rows(matmul_a_bt(x, p.W), p.b);
}

Tensor linear_bwd(const Tensor& W, const Tensor& dy) {
  if (dy.cols() != W.rows()) {
    throw DimensionError("linear_bwd: gradient " + dy.shape_str() + " vs weight " +
                         W.shape_str());
  }
  return matmul(dy, W);
}

LinearParams linear_grads(const Tensor& x, const Tensor& dy) {
  if (x.rows() != dy.rows()) {
    throw DimensionError("linear_grads: " + x.shape_str() + " vs " + dy.shape_str());
  }
  return LinearParams{matmul_at_b(dy, x), column_sums(dy)};
}

LinearParams linear_desc(const LinearParams& p, const Tensor& x, const Tensor& dy, float eta) {
  LinearParams g = linear_grads(x, dy);
  require_same_shape(g.W, p.W, "linear_desc");
  LinearParams out = p;
  axpy_inplace(out.W, -eta, g.W);
  axpy_inplace(out.b, -eta, g.b.reshaped(p.b.shape()));
  return out;
}

// ---- self-attention ---------------------------------------------------------

AttnForward attn_fwd(const AttnParams& p, std::size_t heads, const Tensor& x, const Mask& mask) {
  const std::size_t T = x.rows(), D = x.cols();
  if (heads == 0 || D % heads != 0) {
    throw DimensionError("attn_fwd: width " + std::to_string(D) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  if (mask.rows != T || mask.cols != T) throw DimensionError("attn_fwd: mask shape mismatch");
  const std::size_t dh = D / heads;

  AttnForward out;
  out.cache.x = x;
  out.cache.mask = mask;
  out.cache.q = linear_fwd(p.q, x);
  out.cache.k = linear_fwd(p.k, x);
  out.cache.v = linear_fwd(p.v, x);
  out.y = Tensor({T, D});
  const Tensor& q = out.cache.q;
  const Tensor& k = out.cache.k;
  const Tensor& v = out.cache.v;

  for (std::size_t h = 0; h < heads; ++h) {
    const float slope = p.alibi_slopes.numel() > h ? p.alibi_slopes[h] : 0.0f;
    Tensor logits({T, T});
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < T; ++j) {
        float acc = 0.0f;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) acc += q(t, c) * k(j, c);
        if (slope != 0.0f) {
          acc += slope * (static_cast<float>(j) - static_cast<float>(t));
        }
        logits(t, j) = acc;
      }
    }
    Tensor a = masked_softmax_rows(logits, mask);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        float acc = 0.0f;
        for (std::size_t j = 0; j < T; ++j) acc += a(t, j) * v(j, c);
        out.y(t, c) = acc;
      }
    }
    out.cache.scores.push_back(std::move(a));
  }
  return out;
}

namespace {

void check_scores(const std::vector<Tensor>& scores, const Tensor& dy, std::string_view where) {
  if (scores.empty() || dy.cols() % scores.size() != 0) {
    throw DimensionError(std::string(where) + ": head count does not divide gradient width");
  }
  for (const Tensor& a : scores) {
    if (a.rows() != dy.rows() || a.cols() != dy.rows()) {
      throw DimensionError(std::string(where) + ": scores " + a.shape_str() +
                           " do not match " + std::to_string(dy.rows()) + " tokens");
    }
  }
}

}  // namespace

AttnGrads attn_bwd_exact(const AttnParams& p, const AttnCache& cache, const Tensor& dy) {
  require_same_shape(dy, cache.q, "attn_bwd_exact");
  check_scores(cache.scores, dy, "attn_bwd_exact");
  const std::size_t T = dy.rows(), D = dy.cols(), H = cache.scores.size(), dh = D / H;
  AttnGrads g{Tensor(), Tensor({T, D}), Tensor({T, D}), Tensor({T, D})};

  for (std::size_t h = 0; h < H; ++h) {
    const Tensor& a = cache.scores[h];
    Tensor ds({T, T});
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<float> da(T, 0.0f);
      float weighted = 0.0f;
      for (std::size_t j = 0; j < T; ++j) {
        float acc = 0.0f;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) acc += dy(t, c) * cache.v(j, c);
        da[j] = acc;
        weighted += a(t, j) * acc;
      }
      for (std::size_t j = 0; j < T; ++j) ds(t, j) = a(t, j) * (da[j] - weighted);
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        float dq = 0.0f, dk = 0.0f, dv = 0.0f;
        for (std::size_t j = 0; j < T; ++j) {
          dq += ds(t, j) * cache.k(j, c);
          dk += ds(j, t) * cache.q(j, c);
          dv += a(j, t) * dy(j, c);
        }
        g.dq(t, c) = dq;
        g.dk(t, c) = dk;
        g.dv(t, c) = dv;
      }
    }
  }
  g.dx = add(add(linear_bwd(p.q.W, g.dq), linear_bwd(p.k.W, g.dk)), linear_bwd(p.v.W, g.dv));
  return g;
}

Tensor attn_value_grad(const std::vector<Tensor>& scores, const Tensor& dy) {
  check_scores(scores, dy, "attn_value_grad");
  const std::size_t T = dy.rows(), D = dy.cols(), H = scores.size(), dh = D / H;
  Tensor dv({T, D});
  for (std::size_t h = 0; h < H; ++h) {
    const Tensor& a = scores[h];
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) {
        float acc = 0.0f;
        for (std::size_t j = 0; j < T; ++j) acc += a(j, t) * dy(j, c);
        dv(t, c) = acc;
      }
    }
  }
  return dv;
}

AttnGrads attn_bwd_approx(const AttnParams& p, const std::vector<Tensor>& scores,
                          const Tensor& dy) {
  AttnGrads g;
  g.dv = attn_value_grad(scores, dy);
  g.dq = Tensor({dy.rows(), dy.cols()});
  g.dk = Tensor({dy.rows(), dy.cols()});
  g.dx = linear_bwd(p.v.W, g.dv);
  return g;
}

AttnParams attn_value_desc(const AttnParams& p, const Tensor& x,
                           const std::vector<Tensor>& scores, const Tensor& dy, float eta) {
  AttnParams out = p;
  out.v = linear_desc(p.v, x, attn_value_grad(scores, dy), eta);
  return out;
}

float epsilon_hardness(const std::vector<Tensor>& scores) {
  float eps = 0.0f;
  for (const Tensor& a : scores) {
    for (std::size_t t = 0; t < a.rows(); ++t) {
      auto row = a.row_span(t);
      float mx = 0.0f, total = 0.0f;
      for (float v : row) {
        mx = std::max(mx, v);
        total += v;
      }
      if (total == 0.0f) continue;
      eps = std::max(eps, 1.0f - mx);
    }
  }
  return eps;
}

// ---- normalization -------------------------------------------------------------

bool normalize_span(std::span<const float> in, std::span<float> out, NormKind kind, float& mu,
                    float& sigma) {
  const double n = static_cast<double>(in.size());
  double mean = 0.0;
  if (kind == NormKind::layernorm) {
    for (float v : in) mean += v;
    mean /= n;
  }
  double var = 0.0;
  for (float v : in) {
    const double c = v - mean;
    var += c * c;
  }
  const double s = std::sqrt(var / n);
  if (!(s >= kDegenerateSigma)) return false;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = static_cast<float>((in[i] - mean) / s);
  }
  mu = static_cast<float>(mean);
  sigma = static_cast<float>(s);
  return true;
}

NormForward norm_fwd(const NormParams& p, const Tensor& x, NormKind kind) {
  const std::size_t T = x.rows(), D = x.cols();
  if (D < 2) throw DimensionError("norm_fwd: width must be at least 2");
  if (p.gamma.numel() != D || p.beta.numel() != D) {
    throw DimensionError("norm_fwd: parameters do not match width " + std::to_string(D));
  }
  NormForward f{Tensor({T, D}), Tensor({T, D}), Tensor({T, 1}), Tensor({T, 1})};
  for (std::size_t t = 0; t < T; ++t) {
    if (!normalize_span(x.row_span(t), f.z.row_span(t), kind, f.mu[t], f.sigma[t])) {
      throw DegenerateInput("norm_fwd: token " + std::to_string(t) +
                            " has spread below the degenerate floor");
    }
    for (std::size_t i = 0; i < D; ++i) f.y(t, i) = p.gamma[i] * f.z(t, i) + p.beta[i];
  }
  return f;
}

Tensor normalize_rows(const Tensor& x, NormKind kind) {
  Tensor z({x.rows(), x.cols()});
  for (std::size_t t = 0; t < x.rows(); ++t) {
    float mu = 0.0f, sigma = 0.0f;
    if (!normalize_span(x.row_span(t), z.row_span(t), kind, mu, sigma)) {
      throw DegenerateInput("normalize_rows: token " + std::to_string(t) +
                            " has spread below the degenerate floor");
    }
  }
  return z;
}

Tensor ln_bwd_exact(const Tensor& gamma, const Tensor& dy, const Tensor& z, const Tensor& sigma,
                    NormKind kind) {
  require_same_shape(dy, z, "ln_bwd_exact");
  const std::size_t T = dy.rows(), D = dy.cols();
  if (gamma.numel() != D || sigma.numel() != T) {
    throw DimensionError("ln_bwd_exact: parameter or statistic shape mismatch");
  }
  Tensor dx({T, D});
  for (std::size_t t = 0; t < T; ++t) {
    double mean_dz = 0.0, dot = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      const double dz = static_cast<double>(gamma[i]) * dy(t, i);
      mean_dz += dz;
      dot += dz * z(t, i);
    }
    mean_dz /= static_cast<double>(D);
    dot /= static_cast<double>(D);
    if (kind == NormKind::rmsnorm) mean_dz = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      const double dz = static_cast<double>(gamma[i]) * dy(t, i);
      dx(t, i) = static_cast<float>((dz - mean_dz - dot * z(t, i)) / sigma[t]);
    }
  }
  return dx;
}

namespace {

// Mean (zero for rmsnorm) and spread of a double vector; spread < 0 when degenerate.
std::pair<double, double> moments(const std::vector<double>& v, NormKind kind) {
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  if (kind == NormKind::layernorm) {
    for (double a : v) mean += a;
    mean /= n;
  }
  double var = 0.0;
  for (double a : v) var += (a - mean) * (a - mean);
  const double s = std::sqrt(var / n);
  return {mean, s >= kDegenerateSigma ? s : -1.0};
}

}  // namespace

bool first_order_normalize_span(std::span<const float> x, std::span<const float> g, float eps,
                                std::span<float> out, NormKind kind) {
  const std::size_t n = x.size();
  std::vector<double> base(n), plus(n);
  for (std::size_t i = 0; i < n; ++i) {
    base[i] = x[i];
    plus[i] = static_cast<double>(x[i]) + static_cast<double>(eps) * g[i];
  }
  const auto [m0, s0] = moments(base, kind);
  const auto [m1, s1] = moments(plus, kind);
  if (s0 < 0.0 || s1 < 0.0) return false;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = static_cast<float>(((plus[i] - m1) / s1 - (base[i] - m0) / s0) / eps);
  }
  return true;
}

Tensor first_order_activation(const Tensor& x, const Tensor& g, float eps, Activation kind) {
  require_same_shape(x, g, "first_order_activation");
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double base = x[i];
    const double plus = base + static_cast<double>(eps) * g[i];
    out[i] = static_cast<float>((activation_value(plus, kind) - activation_value(base, kind)) / eps);
  }
  return out;
}

Tensor ln_bwd_approx(const Tensor& gamma, const Tensor& dy, const Tensor& x, float eps,
                     NormKind kind) {
  require_same_shape(dy, x, "ln_bwd_approx");
  if (gamma.numel() != x.cols()) throw DimensionError("ln_bwd_approx: gamma width mismatch");
  Tensor g = dy;
  for (std::size_t t = 0; t < g.rows(); ++t)
    for (std::size_t i = 0; i < g.cols(); ++i) g(t, i) = gamma[i] * dy(t, i);
  Tensor out({x.rows(), x.cols()});
  for (std::size_t t = 0; t < x.rows(); ++t) {
    if (!first_order_normalize_span(x.row_span(t), g.row_span(t), eps, out.row_span(t), kind)) {
      throw DegenerateInput("ln_bwd_approx: token " + std::to_string(t) +
                            " has spread below the degenerate floor");
    }
  }
  return out;
}

NormParams norm_grads(const Tensor& z, const Tensor& dy) {
  require_same_shape(z, dy, "norm_grads");
  return NormParams{column_sums(hadamard(dy, z)), column_sums(dy)};
}

NormParams ln_desc(const NormParams& p, const Tensor& z, const Tensor& dy, float eta,
                   bool update_gamma) {
  NormParams g = norm_grads(z, dy);
  NormParams out = p;
  axpy_inplace(out.beta, -eta, g.beta.reshaped(p.beta.shape()));
  if (update_gamma) axpy_inplace(out.gamma, -eta, g.gamma.reshaped(p.gamma.shape()));
  return out;
}

// ---- activations ------------------------------------------------------------------

Tensor act_bwd_exact(const Tensor& dy, const Tensor& x, Activation kind) {
  return hadamard(activation_eval(x, kind, true), dy);
}

Tensor act_bwd_approx(const Tensor& dy, const Tensor& x, float eps, Activation kind) {
  require_same_shape(dy, x, "act_bwd_approx");
  return first_order_activation(x, dy, eps, kind);
}

// ---- gated linear unit ---------------------------------------------------------------

GluForward glu_fwd(const FfnParams& p, const Tensor& x, Activation kind) {
  GluForward f;
  f.linear = linear_fwd(p.gate_w, x);
  f.gate = linear_fwd(p.gate_v, x);
  f.y = hadamard(f.linear, activation_eval(f.gate, kind, false));
  f.out = linear_fwd(p.gate_o, f.y);
  return f;
}

GluGrads glu_bwd_exact(const FfnParams& p, const GluForward& fwd, const Tensor& dout,
                       Activation kind) {
  GluGrads g;
  g.dy = linear_bwd(p.gate_o.W, dout);
  g.d_linear = hadamard(g.dy, activation_eval(fwd.gate, kind, false));
  g.d_gate = hadamard(hadamard(g.dy, fwd.linear), activation_eval(fwd.gate, kind, true));
  g.dx = add(linear_bwd(p.gate_w.W, g.d_linear), linear_bwd(p.gate_v.W, g.d_gate));
  return g;
}

Tensor glu_gate_difference(const Tensor& gate, const Tensor& linear, const Tensor& dy, float eps,
                           Activation kind) {
  require_same_shape(gate, linear, "glu_gate_difference");
  require_same_shape(gate, dy, "glu_gate_difference");
  Tensor out = gate;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double base = gate[i];
    const double plus = base + static_cast<double>(eps) * dy[i];
    out[i] = static_cast<float>((activation_value(plus, kind) - activation_value(base, kind)) *
                                (static_cast<double>(linear[i]) / eps));
  }
  return out;
}

GluGrads glu_bwd_approx(const FfnParams& p, const GluForward& fwd, const Tensor& dout, float eps,
                        Activation kind) {
  GluGrads g;
  g.dy = linear_bwd(p.gate_o.W, dout);
  g.d_linear = hadamard(g.dy, activation_eval(fwd.gate, kind, false));
  g.d_gate = glu_gate_difference(fwd.gate, fwd.linear, g.dy, eps, kind);
  g.dx = add(linear_bwd(p.gate_w.W, g.d_linear), linear_bwd(p.gate_v.W, g.d_gate));
  return g;
}

FfnParams glu_desc(const FfnParams& p, const Tensor& x, const GluForward& fwd,
                   const GluGrads& grads, const Tensor& dout, float eta) {
  FfnParams out = p;
  out.gate_o = linear_desc(p.gate_o, fwd.y, dout, eta);
  out.gate_w = linear_desc(p.gate_w, x, grads.d_linear, eta);
  out.gate_v = linear_desc(p.gate_v, x, grads.d_gate, eta);
  return out;
}

// ---- output head -------------------------------------------------------------------------

Tensor lm_head_grad(const Tensor& E, const Tensor& x, const Tensor& q) {
  if (x.cols() != E.cols() || q.cols() != E.rows() || q.rows() != x.rows()) {
    throw DimensionError("lm_head_grad: E " + E.shape_str() + ", x " + x.shape_str() +
                         ", q " + q.shape_str());
  }
  for (std::size_t t = 0; t < q.rows(); ++t) {
    double total = 0.0;
    for (float v : q.row_span(t)) total += v;
    if (std::fabs(total - 1.0) > 1e-6) {
      throw PreconditionError("lm_head_grad: target row " + std::to_string(t) +
                              " sums to " + std::to_string(total) + ", not 1");
    }
  }
  const Tensor p = softmax_rows(matmul_a_bt(x, E));
  return matmul(sub(p, q), E);
}

double lm_head_loss(const Tensor& E, const Tensor& x, const Tensor& q) {
  const Tensor logits = matmul_a_bt(x, E);
  double loss = 0.0;
  for (std::size_t t = 0; t < logits.rows(); ++t) {
    auto row = logits.row_span(t);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (float v : row) z += std::exp(v - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < row.size(); ++j) loss -= q(t, j) * (row[j] - log_z);
  }
  return loss;
}

}  // namespace tint
