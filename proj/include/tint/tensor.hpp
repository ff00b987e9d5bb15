#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tint/errors.hpp"

namespace tint {

// Dense row-major float32 tensor. Construction from data rejects NaN/Inf.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<float> data);

  static Tensor zeros(std::size_t rows, std::size_t cols);
  static Tensor vec(std::vector<float> data);
  static Tensor row(std::vector<float> data);  // 1 x n
  static Tensor from_rows(std::initializer_list<std::initializer_list<float>> rows);
  static Tensor identity(std::size_t n);
  static Tensor diag(std::span<const float> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view: rank-1 tensors are treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }
  float& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  float operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  const std::vector<float>& values() const { return data_; }
  std::span<float> row_span(std::size_t i);
  std::span<const float> row_span(std::size_t i) const;

  Tensor row_copy(std::size_t i) const;
  void set_row(std::size_t i, std::span<const float> values);
  Tensor reshaped(std::vector<std::size_t> shape) const;

  // Throws DimensionError naming `where` if any entry is NaN or Inf.
  void check_finite(std::string_view where) const;

  bool bitwise_equal(const Tensor& other) const;
  std::string shape_str() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

// Boolean visibility matrix; allow(i, j) means row i may attend to column j.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allow;

  Mask() = default;
  Mask(std::size_t r, std::size_t c, bool value);
  static Mask full(std::size_t r, std::size_t c) { return Mask(r, c, true); }
  static Mask causal(std::size_t n);
  bool operator()(std::size_t i, std::size_t j) const { return allow[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool value) { allow[i * cols + j] = value ? 1 : 0; }
  Mask transposed() const;
  bool operator==(const Mask&) const = default;
};

enum class Activation { gelu, relu };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation kind);

// Summation order everywhere is left to right over the reduced index.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_at_b(const Tensor& a, const Tensor& b);  // aᵀ·b
Tensor matmul_a_bt(const Tensor& a, const Tensor& b);  // a·bᵀ
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
// Masked entries get probability exactly 0; a fully masked row is all zeros.
Tensor masked_softmax_rows(const Tensor& a, const Mask& mask);
Tensor activation_eval(const Tensor& x, Activation kind, bool derivative);
float gelu(float x);
// Activation value in double precision.
double activation_value(double x, Activation kind);
float gelu_derivative(float x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
void add_inplace(Tensor& a, const Tensor& b);
void axpy_inplace(Tensor& y, float alpha, const Tensor& x);  // y += alpha * x
Tensor column_sums(const Tensor& a);                         // 1 x cols
// Adds the 1 x cols row `b` to every row of `x`.
Tensor add_bias_rows(const Tensor& x, const Tensor& b);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
void write_cols(Tensor& dst, std::size_t begin, const Tensor& src);
void write_rows(Tensor& dst, std::size_t begin, const Tensor& src);

float max_abs(const Tensor& a);
float max_abs_diff(const Tensor& a, const Tensor& b);
float l2_norm(const Tensor& a);
// max|a-b| / max(max|b|, floor)
float relative_error(const Tensor& a, const Tensor& b, float floor = 1e-6f);

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view where);

}  // namespace tint
