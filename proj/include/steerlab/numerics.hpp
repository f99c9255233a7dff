#pragma once

// Dense fp32 kernels used by the engine. Reductions that feed a
// normalization (softmax, layer norm) accumulate in double; everything else
// stays in float with a fixed summation order so results are reproducible
// run to run.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "steerlab/errors.hpp"

namespace steerlab {

// The double whose shortest decimal matches the float's, so 1.1f is written
// to JSON as 1.1 rather than 1.100000023841858.
inline double widen_decimal(float f) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, f);
  double d = 0.0;
  std::from_chars(buf, r.ptr, d);
  return d;
}

using Vector = std::vector<float>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix storage of " + std::to_string(data_.size()) +
                           " floats does not match shape " + std::to_string(rows_) +
                           "x" + std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  const std::vector<float>& storage() const { return data_; }

  float& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  float operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Matrix transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
      for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
  }

  // Columns [first, first + count) as a new rows() x count matrix.
  Matrix column_block(std::size_t first, std::size_t count) const {
    if (first + count > cols_) throw DimensionError("column block out of range");
    Matrix out(rows_, count);
    for (std::size_t r = 0; r < rows_; ++r)
      std::copy_n(data_.data() + r * cols_ + first, count, out.data() + r * count);
    return out;
  }

  // Rows [first, first + count) as a new count x cols() matrix.
  Matrix row_block(std::size_t first, std::size_t count) const {
    if (first + count > rows_) throw DimensionError("row block out of range");
    std::vector<float> d(data_.begin() + static_cast<std::ptrdiff_t>(first * cols_),
                         data_.begin() + static_cast<std::ptrdiff_t>((first + count) * cols_));
    return Matrix(count, cols_, std::move(d));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<float> data_;
};

// Dot product with eight fixed partial sums; the order never depends on the
// input so results are bit-stable.
inline float dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  float lanes[8] = {};
  const std::size_t n = a.size();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) +
         ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail;
}

// out[j] += scale * x[j]
inline void axpy(float scale, std::span<const float> x, std::span<float> out) {
  for (std::size_t j = 0; j < x.size(); ++j) out[j] += scale * x[j];
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                         " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const float s = a(i, k);
      if (s == 0.0f) continue;
      axpy(s, b.row(k), out);
    }
  }
  return c;
}

// a * b^T; each entry is a dot() of two rows. Used wherever the right-hand
// operand is naturally stored row-per-output (token embeddings).
inline Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_transposed: inner dimension mismatch");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.rows(); ++j) c(i, j) = dot(a.row(i), b.row(j));
  return c;
}

inline void add_row_bias(Matrix& m, std::span<const float> bias) {
  if (bias.size() != m.cols()) throw DimensionError("bias length mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < bias.size(); ++c) row[c] += bias[c];
  }
}

inline Vector layer_norm(std::span<const float> x, std::span<const float> gamma,
                         std::span<const float> beta, double eps) {
  if (x.size() != gamma.size() || x.size() != beta.size())
    throw DimensionError("layer_norm: length mismatch");
  if (!(eps > 0.0)) throw DimensionError("layer_norm: eps must be positive");
  const std::size_t n = x.size();
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + eps);
  Vector out(n);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<float>((x[i] - mean) * inv * gamma[i] + beta[i]);
  return out;
}

inline Matrix layer_norm_rows(const Matrix& x, std::span<const float> gamma,
                              std::span<const float> beta, double eps) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    Vector v = layer_norm(x.row(r), gamma, beta, eps);
    std::copy(v.begin(), v.end(), out.row(r).begin());
  }
  return out;
}

// -inf entries (masked positions) come out as exactly 0.
inline Vector softmax(std::span<const float> x) {
  Vector out(x.size());
  if (x.empty()) return out;
  const float mx = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  std::vector<double> e(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    e[i] = x[i] == -std::numeric_limits<float>::infinity() ? 0.0 : std::exp(double(x[i]) - mx);
    total += e[i];
  }
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<float>(e[i] / total);
  return out;
}

// Full-precision softmax probabilities, used for metrics that divide by
// small probabilities.
inline std::vector<double> softmax_f64(std::span<const float> x) {
  std::vector<double> out(x.size());
  if (x.empty()) return out;
  const double mx = *std::max_element(x.begin(), x.end());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += out[i] = std::exp(double(x[i]) - mx);
  for (double& v : out) v /= total;
  return out;
}

// tanh approximation, as in the original GPT-2 release
inline float gelu(float x) {
  const double xd = x;
  const double k = std::sqrt(2.0 / std::numbers::pi);
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(k * (xd + 0.044715 * xd * xd * xd))));
}

inline std::size_t argmax(std::span<const float> x) {
  return static_cast<std::size_t>(std::max_element(x.begin(), x.end()) - x.begin());
}

}  // namespace steerlab
