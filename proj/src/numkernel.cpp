#include "tvproxy/numkernel.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "tvproxy/error.hpp"

namespace tvproxy {

namespace {

std::string dims(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

void require_same_length(std::span<const double> a, std::span<const double> b,
                         const char* op) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::ShapeMismatch, std::string(op) + ": length " +
                                              std::to_string(a.size()) + " vs " +
                                              std::to_string(b.size()));
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw Error(ErrorKind::ShapeMismatch, "matrix " + dims(rows_, cols_) + " given " +
                                              std::to_string(data_.size()) + " values");
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows)
    : rows_(rows.size()), cols_(rows.size() == 0 ? 0 : rows.begin()->size()) {
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) {
      throw Error(ErrorKind::ShapeMismatch, "ragged matrix literal");
    }
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix matmul(const Matrix& lhs, const Matrix& rhs) {
  if (lhs.cols() != rhs.rows()) {
    throw Error(ErrorKind::ShapeMismatch, "matmul " + dims(lhs.rows(), lhs.cols()) + " * " +
                                              dims(rhs.rows(), rhs.cols()));
  }
  Matrix out(lhs.rows(), rhs.cols());
  for (std::size_t i = 0; i < lhs.rows(); ++i) {
    for (std::size_t j = 0; j < rhs.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < lhs.cols(); ++p) acc += lhs(i, p) * rhs(p, j);
      out(i, j) = acc;
    }
  }
  return out;
}

MatmulGrad matmul_backward(const Matrix& lhs, const Matrix& rhs, const Matrix& d_out) {
  if (lhs.cols() != rhs.rows() || d_out.rows() != lhs.rows() || d_out.cols() != rhs.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "matmul_backward");
  }
  MatmulGrad g{Matrix(lhs.rows(), lhs.cols()), Matrix(rhs.rows(), rhs.cols())};
  // d_lhs = d_out * rhs^T
  for (std::size_t i = 0; i < lhs.rows(); ++i) {
    for (std::size_t p = 0; p < lhs.cols(); ++p) {
      double acc = 0.0;
      for (std::size_t j = 0; j < rhs.cols(); ++j) acc += d_out(i, j) * rhs(p, j);
      g.d_lhs(i, p) = acc;
    }
  }
  // d_rhs = lhs^T * d_out
  for (std::size_t p = 0; p < rhs.rows(); ++p) {
    for (std::size_t j = 0; j < rhs.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < lhs.rows(); ++i) acc += lhs(i, p) * d_out(i, j);
      g.d_rhs(p, j) = acc;
    }
  }
  return g;
}

Vector vecmat(std::span<const double> vec, const Matrix& mat) {
  if (vec.size() != mat.rows()) {
    throw Error(ErrorKind::ShapeMismatch, "vecmat 1x" + std::to_string(vec.size()) + " * " +
                                              dims(mat.rows(), mat.cols()));
  }
  Vector out(mat.cols(), 0.0);
  for (std::size_t j = 0; j < mat.cols(); ++j) {
    double acc = 0.0;
    for (std::size_t p = 0; p < vec.size(); ++p) acc += vec[p] * mat(p, j);
    out[j] = acc;
  }
  return out;
}

VecmatGrad vecmat_backward(std::span<const double> vec, const Matrix& mat,
                           std::span<const double> d_out) {
  if (vec.size() != mat.rows() || d_out.size() != mat.cols()) {
    throw Error(ErrorKind::ShapeMismatch, "vecmat_backward");
  }
  VecmatGrad g{Vector(vec.size(), 0.0), Matrix(mat.rows(), mat.cols())};
  for (std::size_t p = 0; p < vec.size(); ++p) {
    double acc = 0.0;
    for (std::size_t j = 0; j < mat.cols(); ++j) acc += d_out[j] * mat(p, j);
    g.d_vec[p] = acc;
    for (std::size_t j = 0; j < mat.cols(); ++j) g.d_mat(p, j) = vec[p] * d_out[j];
  }
  return g;
}

Vector softmax_row(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorKind::EmptyInput, "softmax_row of empty vector");
  const double peak = *std::max_element(logits.begin(), logits.end());
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

Vector softmax_row_backward(std::span<const double> probs, std::span<const double> d_out) {
  require_same_length(probs, d_out, "softmax_row_backward");
  const double inner = dot(probs, d_out);
  Vector d_in(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) d_in[i] = probs[i] * (d_out[i] - inner);
  return d_in;
}

double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

Vector l2_norm_backward(std::span<const double> a, double d_out) {
  const double n = l2_norm(a);
  Vector d_in(a.size(), 0.0);
  if (n == 0.0) return d_in;
  for (std::size_t i = 0; i < a.size(); ++i) d_in[i] = d_out * a[i] / n;
  return d_in;
}

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  require_same_length(a, b, "cosine_sim");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na < kZeroNormThreshold || nb < kZeroNormThreshold) {
    throw Error(ErrorKind::ZeroVector, "cosine_sim argument has zero norm");
  }
  // IEEE multiplication commutes, so swapping a and b reproduces every bit.
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

CosineGrad cosine_sim_backward(std::span<const double> a, std::span<const double> b,
                               double d_out) {
  require_same_length(a, b, "cosine_sim_backward");
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na < kZeroNormThreshold || nb < kZeroNormThreshold) {
    throw Error(ErrorKind::ZeroVector, "cosine_sim_backward argument has zero norm");
  }
  const double c = dot(a, b) / (na * nb);
  CosineGrad g{Vector(a.size()), Vector(b.size())};
  for (std::size_t i = 0; i < a.size(); ++i) {
    g.d_lhs[i] = d_out * (b[i] / (na * nb) - c * a[i] / (na * na));
    g.d_rhs[i] = d_out * (a[i] / (na * nb) - c * b[i] / (nb * nb));
  }
  return g;
}

Vector normalized(std::span<const double> a) {
  const double n = l2_norm(a);
  if (n < kZeroNormThreshold) throw Error(ErrorKind::ZeroVector, "normalize zero vector");
  Vector out(a.begin(), a.end());
  for (double& v : out) v /= n;
  return out;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace tvproxy
