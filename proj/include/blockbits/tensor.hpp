#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "blockbits/errors.hpp"

namespace blockbits {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

// Dense row-major array of doubles. Rank 0 (scalar), 1 and 2 are what the
// engine uses; higher ranks are storable but no op consumes them.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Matrix views: a rank-1 tensor is treated as a single row.
  std::size_t rows() const noexcept {
    return rank() == 2 ? shape_[0] : 1;
  }
  std::size_t cols() const noexcept {
    return rank() == 0 ? 1 : shape_.back();
  }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return data_[0];
  }

  bool all_finite() const noexcept {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) throw DimensionError(std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
}

// FNV-1a over the raw bytes; used for determinism checks and cache keys.
inline std::uint64_t checksum(std::span<const double> values, std::uint64_t h = 1469598103934665603ull) {
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ull;
    }
  }
  return h;
}

namespace kernels {

using v4d = double __attribute__((vector_size(32)));

[[gnu::always_inline]] inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

[[gnu::always_inline]] inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }

// MR x 8 register tile of C = A * B. Each output accumulates over p in
// increasing order.
template <std::size_t MR>
[[gnu::always_inline]] inline void gemm_tile(const double* a, const double* b, double* c, std::size_t k,
                                             std::size_t lda, std::size_t ldb, std::size_t ldc) {
  v4d acc[MR][2];
  for (std::size_t r = 0; r < MR; ++r) acc[r][0] = acc[r][1] = v4d{0.0, 0.0, 0.0, 0.0};
  for (std::size_t p = 0; p < k; ++p) {
    const v4d b0 = load4(b + p * ldb), b1 = load4(b + p * ldb + 4);
    for (std::size_t r = 0; r < MR; ++r) {
      const double av = a[r * lda + p];
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
    }
  }
  for (std::size_t r = 0; r < MR; ++r) {
    store4(c + r * ldc, acc[r][0]);
    store4(c + r * ldc + 4, acc[r][1]);
  }
}

// C[r x n] = A[r x k] * B[k x n]. Every output element is the sum over k in
// increasing order, so the result matches a naive i-j-p triple loop bitwise.
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t r, std::size_t k, std::size_t n) {
  constexpr std::size_t MR = 6, NR = 8;
  auto scalar = [&](std::size_t i, std::size_t j) {
    double s = 0.0;
    for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
    c[i * n + j] = s;
  };
  std::size_t i = 0;
  for (; i + MR <= r; i += MR) {
    std::size_t j = 0;
    for (; j + NR <= n; j += NR) gemm_tile<MR>(a + i * k, b + j, c + i * n + j, k, k, n, n);
    for (; j < n; ++j)
      for (std::size_t rr = 0; rr < MR; ++rr) scalar(i + rr, j);
  }
  for (; i < r; ++i) {
    std::size_t j = 0;
    for (; j + NR <= n; j += NR) gemm_tile<1>(a + i * k, b + j, c + i * n + j, k, k, n, n);
    for (; j < n; ++j) scalar(i, j);
  }
}

inline void transpose_into(const double* a, double* out, std::size_t r, std::size_t c) {
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
}

// C[r x n] += A[r x k] * B[n x k]^T
inline void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t k, std::size_t n) {
  std::vector<double> bt(k * n), tmp(r * n);
  transpose_into(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), tmp.data(), r, k, n);
  for (std::size_t i = 0; i < r * n; ++i) c[i] += tmp[i];
}

// C[k x n] += A[r x k]^T * B[r x n]
inline void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t r, std::size_t k, std::size_t n) {
  std::vector<double> at(k * r), tmp(k * n);
  transpose_into(a, at.data(), r, k);
  gemm_nn(at.data(), b, tmp.data(), k, r, n);
  for (std::size_t i = 0; i < k * n; ++i) c[i] += tmp[i];
}

}  // namespace kernels

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({a.rows(), b.cols()});
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(), b.cols());
  return out;
}

inline Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::zeros({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
  return out;
}

}  // namespace blockbits
