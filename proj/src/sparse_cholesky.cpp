#include "sae/sparse_cholesky.hpp"

namespace sae {

void SparseCholesky::analyze(const Matrix& pattern) {
  llt_.analyzePattern(pattern);
  n_ = pattern.rows();
}

bool SparseCholesky::factorize(const Matrix& q) {
  llt_.factorize(q);
  return llt_.info() == Eigen::Success;
}

bool SparseCholesky::compute(const Matrix& q) {
  analyze(q);
  return factorize(q);
}

double SparseCholesky::log_det() const {
  const auto& l = llt_.matrixL().nestedExpression();
  double s = 0.0;
  for (Eigen::Index j = 0; j < l.outerSize(); ++j) {
    // Column j of the lower factor stores the diagonal first.
    Matrix::InnerIterator it(l, j);
    s += std::log(it.value());
  }
  return 2.0 * s;
}

Eigen::VectorXd SparseCholesky::sample_zero_mean(const Eigen::VectorXd& z) const {
  Eigen::VectorXd w = llt_.matrixU().solve(z);
  return llt_.permutationPinv() * w;
}

}  // namespace sae
