#pragma once

// Row-major float32 dense matrix. 32-bit storage everywhere; 64-bit accumulation
// is used inside reductions, then stored back as 32-bit. Arithmetic never traps:
// NaN/Inf propagate by IEEE rules (the fault model injects them on purpose).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

#include "rgnn/errors.hpp"

namespace rgnn {

class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(int rows, int cols, float fill = 0.0f)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(check_dims(rows, cols)), fill) {}
  DenseMatrix(std::initializer_list<std::initializer_list<float>> init) {
    rows_ = static_cast<int>(init.size());
    cols_ = rows_ ? static_cast<int>(init.begin()->size()) : 0;
    data_.reserve(static_cast<size_t>(rows_) * cols_);
    for (const auto& r : init) {
      if (static_cast<int>(r.size()) != cols_)
        throw ShapeError("ragged initializer for DenseMatrix");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int i, int j) { return data_[index(i, j)]; }
  float at(int i, int j) const { return data_[index(i, j)]; }
  float* row(int i) { return data_.data() + static_cast<size_t>(check_row(i)) * cols_; }
  const float* row(int i) const {
    return data_.data() + static_cast<size_t>(check_row(i)) * cols_;
  }
  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  bool same_shape(const DenseMatrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  std::string shape_str() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  // ----- elementwise -----

  DenseMatrix& operator+=(const DenseMatrix& o) {
    require_same_shape(o, "+=");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  DenseMatrix& operator-=(const DenseMatrix& o) {
    require_same_shape(o, "-=");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  DenseMatrix& operator*=(float s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
  friend DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
  friend DenseMatrix operator*(DenseMatrix a, float s) { return a *= s; }

  DenseMatrix hadamard(const DenseMatrix& o) const {
    require_same_shape(o, "hadamard");
    DenseMatrix out(rows_, cols_);
    for (size_t i = 0; i < data_.size(); ++i) out.data_[i] = data_[i] * o.data_[i];
    return out;
  }

  template <class F>
  DenseMatrix map(F&& f) const {
    DenseMatrix out(rows_, cols_);
    for (size_t i = 0; i < data_.size(); ++i) out.data_[i] = f(data_[i]);
    return out;
  }

  // ----- products / reductions -----

  DenseMatrix matmul(const DenseMatrix& o) const {
    if (cols_ != o.rows_)
      throw ShapeError("matmul shape mismatch: " + shape_str() + " * " + o.shape_str());
    DenseMatrix out(rows_, o.cols_);
    std::vector<double> acc(static_cast<size_t>(o.cols_));  // 64-bit accumulation
    for (int i = 0; i < rows_; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      const float* a = row(i);
      for (int k = 0; k < cols_; ++k) {
        const double aik = a[k];
        const float* b = o.row(k);
        for (int j = 0; j < o.cols_; ++j) acc[j] += aik * b[j];
      }
      float* dst = out.row(i);
      for (int j = 0; j < o.cols_; ++j) dst[j] = static_cast<float>(acc[j]);
    }
    return out;
  }

  DenseMatrix transpose() const {
    DenseMatrix out(cols_, rows_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) out.at(j, i) = at(i, j);
    return out;
  }

  double sum() const {
    double acc = 0.0;
    for (float v : data_) acc += v;
    return acc;
  }

  // ----- initializers -----

  static DenseMatrix identity(int n) {
    DenseMatrix m(n, n);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0f;
    return m;
  }

  static DenseMatrix glorot(int rows, int cols, std::mt19937_64& rng) {
    const float limit = std::sqrt(6.0f / static_cast<float>(rows + cols));
    std::uniform_real_distribution<float> u(-limit, limit);
    DenseMatrix m(rows, cols);
    for (auto& v : m.data_) v = u(rng);
    return m;
  }

  static DenseMatrix gaussian(int rows, int cols, std::mt19937_64& rng, float mean = 0.0f,
                              float stddev = 1.0f) {
    std::normal_distribution<float> n(mean, stddev);
    DenseMatrix m(rows, cols);
    for (auto& v : m.data_) v = n(rng);
    return m;
  }

  // ----- comparisons -----

  bool bit_identical(const DenseMatrix& o) const {
    if (!same_shape(o)) return false;
    for (size_t i = 0; i < data_.size(); ++i) {
      uint32_t a, b;
      std::memcpy(&a, &data_[i], 4);
      std::memcpy(&b, &o.data_[i], 4);
      if (a != b) return false;
    }
    return true;
  }

  bool allclose(const DenseMatrix& o, float atol, float rtol = 0.0f) const {
    if (!same_shape(o)) return false;
    for (size_t i = 0; i < data_.size(); ++i) {
      const float a = data_[i], b = o.data_[i];
      if (std::isnan(a) || std::isnan(b)) return false;
      if (std::abs(a - b) > atol + rtol * std::max(std::abs(a), std::abs(b))) return false;
    }
    return true;
  }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  static int check_dims(int rows, int cols) {
    if (rows < 0 || cols < 0) throw ShapeError("negative matrix dimension");
    return rows * cols;
  }
  int check_row(int i) const {
    if (i < 0 || i >= rows_) throw ShapeError("row index out of range");
    return i;
  }
  size_t index(int i, int j) const {
    if (i < 0 || i >= rows_ || j < 0 || j >= cols_)
      throw ShapeError("index out of range for " + shape_str());
    return static_cast<size_t>(i) * cols_ + j;
  }
  void require_same_shape(const DenseMatrix& o, const char* op) const {
    if (!same_shape(o))
      throw ShapeError(std::string(op) + " shape mismatch: " + shape_str() + " vs " +
                       o.shape_str());
  }

  int rows_ = 0, cols_ = 0;
  std::vector<float> data_;
};

// Row-normalize in place: each row is divided by its L1 mass (sum of absolute
// values); all-zero rows are left untouched. Planetoid-style preprocessing,
// exposed as a utility so that load/save stays a bit-exact round trip.
inline void normalize_rows(DenseMatrix& m) {
  for (int i = 0; i < m.rows(); ++i) {
    float* r = m.row(i);
    double mass = 0.0;
    for (int j = 0; j < m.cols(); ++j) mass += std::abs(r[j]);
    if (mass == 0.0) continue;
    const float inv = static_cast<float>(1.0 / mass);
    for (int j = 0; j < m.cols(); ++j) r[j] *= inv;
  }
}

}  // namespace rgnn
