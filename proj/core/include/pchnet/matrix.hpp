#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace pchnet {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
///
/// Every construction that allocates storage is reported to the active
/// AllocationProbe on the calling thread, which lets tests assert that a
/// code path never materializes a matrix above a given size.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  Matrix(const Matrix& other);
  Matrix& operator=(const Matrix& other);
  Matrix(Matrix&& other) noexcept = default;
  Matrix& operator=(Matrix&& other) noexcept = default;

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  Vector diag() const;
  bool all_finite() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Records the largest Matrix allocation (in elements) made on this thread
/// while the probe is alive. Probes nest; inner probes also update outer ones.
class AllocationProbe {
 public:
  AllocationProbe();
  ~AllocationProbe();
  AllocationProbe(const AllocationProbe&) = delete;
  AllocationProbe& operator=(const AllocationProbe&) = delete;

  std::size_t peak_elements() const noexcept { return peak_; }
  std::size_t allocations() const noexcept { return count_; }

 private:
  friend void note_matrix_allocation(std::size_t elements);
  AllocationProbe* parent_;
  std::size_t peak_ = 0;
  std::size_t count_ = 0;
};

void note_matrix_allocation(std::size_t elements);

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

Matrix transpose(const Matrix& a);
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T b without forming a^T.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
/// a^T x without forming a^T.
Vector matvec_t(const Matrix& a, std::span<const double> x);
Matrix outer(std::span<const double> u, std::span<const double> v);
Matrix hadamard(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& a);
double max_abs(const Matrix& a);
double trace(const Matrix& a);

/// |A[i][j] - A[j][i]| <= rel_tol * max(1, ||A||_F) for all i, j.
bool is_symmetric(const Matrix& a, double rel_tol = 1e-12);
/// Averages A with its transpose in place.
void symmetrize(Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);

/// Column-wise vectorization: stacks the columns of `a`.
Vector vec(const Matrix& a);
/// Inverse of vec() for an m x n matrix.
Matrix unvec(std::span<const double> v, std::size_t rows, std::size_t cols);

}  // namespace pchnet
