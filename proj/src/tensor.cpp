#include "tint/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace tint {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

[[noreturn]] void dim_error(std::string_view where, const Tensor& a, const Tensor& b) {
  throw DimensionError(std::string(where) + ": shape mismatch " + a.shape_str() +
                       " vs " + b.shape_str());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(product(shape_), 0.0f) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<float> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw DimensionError("Tensor: shape " + shape_str() + " does not match " +
                         std::to_string(data_.size()) + " values");
  }
  check_finite("Tensor");
}

Tensor Tensor::zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

Tensor Tensor::vec(std::vector<float> data) {
  const std::size_t n = data.size();
  return Tensor({n}, std::move(data));
}

Tensor Tensor::row(std::vector<float> data) {
  const std::size_t n = data.size();
  return Tensor({1, n}, std::move(data));
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<float> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("Tensor::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0f;
  return t;
}

Tensor Tensor::diag(std::span<const float> values) {
  Tensor t({values.size(), values.size()});
  for (std::size_t i = 0; i < values.size(); ++i) t(i, i) = values[i];
  return t;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= shape_.size()) throw DimensionError("Tensor::dim: axis out of range");
  return shape_[i];
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw DimensionError("Tensor::rows: rank " + shape_str());
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw DimensionError("Tensor::cols: rank " + shape_str());
  return shape_[1];
}

std::span<float> Tensor::row_span(std::size_t i) {
  const std::size_t c = cols();
  return {data_.data() + i * c, c};
}

std::span<const float> Tensor::row_span(std::size_t i) const {
  const std::size_t c = cols();
  return {data_.data() + i * c, c};
}

Tensor Tensor::row_copy(std::size_t i) const {
  auto r = row_span(i);
  return Tensor({1, r.size()}, std::vector<float>(r.begin(), r.end()));
}

void Tensor::set_row(std::size_t i, std::span<const float> values) {
  if (values.size() != cols()) throw DimensionError("Tensor::set_row: width mismatch");
  std::copy(values.begin(), values.end(), row_span(i).begin());
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
  Tensor out;
  if (product(shape) != data_.size()) {
    throw DimensionError("Tensor::reshaped: incompatible shape");
  }
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::check_finite(std::string_view where) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw DimensionError(std::string(where) + ": non-finite entry at flat index " +
                           std::to_string(i));
    }
  }
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  return std::equal(data_.begin(), data_.end(), other.data_.begin(),
                    [](float a, float b) {
                      return std::memcmp(&a, &b, sizeof(float)) == 0;
                    });
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << ']';
  return os.str();
}

Activation parse_activation(std::string_view name) {
  if (name == "gelu") return Activation::gelu;
  if (name == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation kind) {
  return kind == Activation::gelu ? "gelu" : "relu";
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) dim_error("matmul", a, b);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

Tensor matmul_at_b(const Tensor& a, const Tensor& b) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) dim_error("matmul_at_b", a, b);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += a(p, i) * b(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

Tensor matmul_a_bt(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) dim_error("matmul_a_bt", a, b);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      float acc = 0.0f;
      for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(j, p);
      out(i, j) = acc;
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

Tensor softmax_rows(const Tensor& a) {
  Tensor out({a.rows(), a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row_span(i);
    auto o = out.row_span(i);
    const float mx = *std::max_element(in.begin(), in.end());
    float total = 0.0f;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (float& v : o) v /= total;
  }
  return out;
}

Tensor masked_softmax_rows(const Tensor& a, const Mask& mask) {
  if (mask.rows != a.rows() || mask.cols != a.cols()) {
    throw DimensionError("masked_softmax_rows: mask " + std::to_string(mask.rows) + "x" +
                         std::to_string(mask.cols) + " vs scores " + a.shape_str());
  }
  Tensor out({a.rows(), a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto in = a.row_span(i);
    auto o = out.row_span(i);
    bool any = false;
    float mx = 0.0f;
    for (std::size_t j = 0; j < in.size(); ++j) {
      if (!mask(i, j)) continue;
      mx = any ? std::max(mx, in[j]) : in[j];
      any = true;
    }
    if (!any) continue;
    float total = 0.0f;
    for (std::size_t j = 0; j < in.size(); ++j) {
      if (!mask(i, j)) continue;
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < in.size(); ++j) o[j] /= total;
  }
  return out;
}

Mask::Mask(std::size_t r, std::size_t c, bool value)
    : rows(r), cols(c), allow(r * c, value ? 1 : 0) {}

Mask Mask::causal(std::size_t n) {
  Mask m(n, n, false);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.set(i, j, true);
  return m;
}

Mask Mask::transposed() const {
  Mask m(cols, rows, false);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m.set(j, i, (*this)(i, j));
  return m;
}

float gelu(float x) {
  const double xd = x;
  return static_cast<float>(0.5 * xd * (1.0 + std::erf(xd / std::sqrt(2.0))));
}

float gelu_derivative(float x) {
  const double xd = x;
  const double cdf = 0.5 * (1.0 + std::erf(xd / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
  return static_cast<float>(cdf + xd * pdf);
}

double activation_value(double x, Activation kind) {
  if (kind == Activation::gelu) return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
  return x > 0.0 ? x : 0.0;
}

Tensor activation_eval(const Tensor& x, Activation kind, bool derivative) {
  Tensor out = x;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const float v = x[i];
    if (kind == Activation::gelu) {
      out[i] = derivative ? gelu_derivative(v) : gelu(v);
    } else {
      // ReLU'(0) is taken as 1.
      out[i] = derivative ? (v >= 0.0f ? 1.0f : 0.0f) : (v > 0.0f ? v : 0.0f);
    }
  }
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view where) {
  if (a.shape() != b.shape()) dim_error(where, a, b);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b[i];
  return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b[i];
  return out;
}

Tensor scale(const Tensor& a, float s) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  return out;
}

void add_inplace(Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
}

void axpy_inplace(Tensor& y, float alpha, const Tensor& x) {
  require_same_shape(y, x, "axpy_inplace");
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += alpha * x[i];
}

Tensor column_sums(const Tensor& a) {
  Tensor out({1, a.cols()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(0, j) += a(i, j);
  return out;
}

Tensor add_bias_rows(const Tensor& x, const Tensor& b) {
  if (b.numel() != x.cols()) dim_error("add_bias_rows", x, b);
  Tensor out = x;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b[j];
  return out;
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw DimensionError("slice_cols: range out of bounds");
  Tensor out({a.rows(), end - begin});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
  return out;
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.rows()) throw DimensionError("slice_rows: range out of bounds");
  Tensor out({end - begin, a.cols()});
  for (std::size_t i = begin; i < end; ++i) out.set_row(i - begin, a.row_span(i));
  return out;
}

void write_cols(Tensor& dst, std::size_t begin, const Tensor& src) {
  if (src.rows() != dst.rows() || begin + src.cols() > dst.cols()) {
    dim_error("write_cols", dst, src);
  }
  for (std::size_t i = 0; i < src.rows(); ++i)
    for (std::size_t j = 0; j < src.cols(); ++j) dst(i, begin + j) = src(i, j);
}

void write_rows(Tensor& dst, std::size_t begin, const Tensor& src) {
  if (src.cols() != dst.cols() || begin + src.rows() > dst.rows()) {
    dim_error("write_rows", dst, src);
  }
  for (std::size_t i = 0; i < src.rows(); ++i) dst.set_row(begin + i, src.row_span(i));
}

float max_abs(const Tensor& a) {
  float m = 0.0f;
  for (float v : a.values()) m = std::max(m, std::fabs(v));
  return m;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

float l2_norm(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(acc));
}

float relative_error(const Tensor& a, const Tensor& b, float floor) {
  return max_abs_diff(a, b) / std::max(max_abs(b), floor);
}

}  // namespace tint
