#pragma once

// Dense f64 kernel. Every forward op has a vector-Jacobian companion named
// `<op>_backward` that maps an output cotangent to input cotangents.
// Accumulation always runs in ascending index order so results are
// reproducible bit-for-bit.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace tvproxy {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct MatmulGrad {
  Matrix d_lhs;
  Matrix d_rhs;
};

struct VecmatGrad {
  Vector d_vec;
  Matrix d_mat;
};

struct CosineGrad {
  Vector d_lhs;
  Vector d_rhs;
};

// Norms below this are treated as zero by cosine_sim.
inline constexpr double kZeroNormThreshold = 1e-30;

Matrix matmul(const Matrix& lhs, const Matrix& rhs);
MatmulGrad matmul_backward(const Matrix& lhs, const Matrix& rhs, const Matrix& d_out);

// Row vector times matrix: (1 x k) * (k x n).
Vector vecmat(std::span<const double> vec, const Matrix& mat);
VecmatGrad vecmat_backward(std::span<const double> vec, const Matrix& mat,
                           std::span<const double> d_out);

Vector softmax_row(std::span<const double> logits);
// Takes the forward output, not the logits.
Vector softmax_row_backward(std::span<const double> probs, std::span<const double> d_out);

double dot(std::span<const double> a, std::span<const double> b);

double l2_norm(std::span<const double> a);
// Cotangent at the zero vector is defined as zero.
Vector l2_norm_backward(std::span<const double> a, double d_out);

double cosine_sim(std::span<const double> a, std::span<const double> b);
CosineGrad cosine_sim_backward(std::span<const double> a, std::span<const double> b,
                               double d_out);

Vector normalized(std::span<const double> a);

bool all_finite(std::span<const double> values);

}  // namespace tvproxy
