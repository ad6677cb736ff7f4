#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace mil::num {

// Dense row-major real64 matrix. Row vectors are 1 x n, scalars 1 x 1.
// Values are immutable by convention once handed to a GradTape.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix scalar(double v);
  static Matrix row(std::initializer_list<double> xs);
  static Matrix row(std::span<const double> xs);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<const double> row_span(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row_span(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
  bool all_finite() const;

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

// Plain kernels; the tape forward pass reuses these.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix add_rowvec(const Matrix& a, const Matrix& row);  // broadcast a 1 x n row over rows of a
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double c);
Matrix relu(const Matrix& a);
Matrix tanh_ew(const Matrix& a);
Matrix sigmoid_ew(const Matrix& a);
Matrix l2_normalize_rows(const Matrix& a);  // DegenerateInputError on a zero row
Matrix softmax_rows(const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

// log sum exp over all entries, max-shifted; ShapeError on empty input.
double logsumexp(std::span<const double> v);

}  // namespace mil::num
