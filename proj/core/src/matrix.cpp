#include "mil/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mil/errors.hpp"

namespace mil::num {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("matrix data length does not match rows*cols");
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::scalar(double v) {
  Matrix m(1, 1);
  m[0] = v;
  return m;
}

Matrix Matrix::row(std::initializer_list<double> xs) {
  Matrix m(1, xs.size());
  std::copy(xs.begin(), xs.end(), m.data().begin());
  return m;
}

Matrix Matrix::row(std::span<const double> xs) {
  Matrix m(1, xs.size());
  std::copy(xs.begin(), xs.end(), m.data().begin());
  return m;
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double* ci = &c.data()[i * m];
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      if (aip == 0.0) continue;
      const double* bp = &b.data()[p * m];
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      c(i, j) = dot(a.row_span(i), b.row_span(j));
    }
  }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

Matrix add_rowvec(const Matrix& a, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_rowvec: bias shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) c(i, j) += row[j];
  return c;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw ShapeError("sub: shape mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] -= b[i];
  return c;
}

Matrix scale(const Matrix& a, double c) {
  Matrix out = a;
  for (auto& x : out.data()) x *= c;
  return out;
}

Matrix relu(const Matrix& a) {
  Matrix out = a;
  for (auto& x : out.data()) x = x > 0.0 ? x : 0.0;
  return out;
}

Matrix tanh_ew(const Matrix& a) {
  Matrix out = a;
  for (auto& x : out.data()) x = std::tanh(x);
  return out;
}

Matrix sigmoid_ew(const Matrix& a) {
  Matrix out = a;
  for (auto& x : out.data()) {
    x = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  return out;
}

Matrix l2_normalize_rows(const Matrix& a) {
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double n = l2_norm(a.row_span(i));
    if (n <= 0.0) throw DegenerateInputError("l2_normalize: zero row");
    for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) /= n;
  }
  return out;
}

Matrix softmax_rows(const Matrix& a) {
  if (a.cols() == 0) throw ShapeError("softmax_rows: empty rows");
  Matrix out = a;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto r = out.row_span(i);
    const double m = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (auto& x : r) {
      x = std::exp(x - m);
      sum += x;
    }
    for (auto& x : r) x /= sum;
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double logsumexp(std::span<const double> v) {
  if (v.empty()) throw ShapeError("logsumexp: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;  // all -inf or a non-finite entry propagates
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - m);
  return m + std::log(sum);
}

}  // namespace mil::num
