#pragma once
// Sparse Cholesky with a fill-reducing ordering computed once per pattern.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

namespace sae {

class SparseCholesky {
 public:
  using Matrix = Eigen::SparseMatrix<double>;

  /// Symbolic analysis; later factorize() calls must share this sparsity pattern.
  void analyze(const Matrix& pattern);
  /// Numeric factorization. Returns false when the matrix is not positive definite.
  bool factorize(const Matrix& q);
  /// analyze + factorize.
  bool compute(const Matrix& q);

  Eigen::Index rows() const { return n_; }
  double log_det() const;

  Eigen::VectorXd solve(const Eigen::VectorXd& b) const { return llt_.solve(b); }
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b) const { return llt_.solve(b); }

  /// Maps z ~ N(0, I) to a draw from N(0, Q^{-1}).
  Eigen::VectorXd sample_zero_mean(const Eigen::VectorXd& z) const;

 private:
  Eigen::SimplicialLLT<Matrix, Eigen::Lower, Eigen::AMDOrdering<int>> llt_;
  Eigen::Index n_ = 0;
};

}  // namespace sae
