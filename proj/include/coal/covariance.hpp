#pragma once

#include <Eigen/Dense>

namespace coal {

// Symmetric PSD matrix stored either densely or, in diagonal mode, as its
// diagonal only. Arithmetic between two diagonal operands stays diagonal.
class Covariance {
 public:
  Covariance() = default;

  static Covariance full(Eigen::MatrixXd m);
  static Covariance diagonal(Eigen::VectorXd d);
  static Covariance zero(Eigen::Index dim, bool diagonal_mode);
  static Covariance identity(Eigen::Index dim, bool diagonal_mode, double scale = 1.0);

  bool is_diagonal() const { return diagonal_mode_; }
  Eigen::Index dim() const { return diagonal_mode_ ? diag_.size() : full_.rows(); }

  Eigen::MatrixXd dense() const;
  Eigen::VectorXd diagonal_entries() const;
  // Valid only in the corresponding mode.
  const Eigen::MatrixXd& matrix() const { return full_; }
  const Eigen::VectorXd& diag() const { return diag_; }

  Covariance scaled(double s) const;
  Covariance operator+(const Covariance& other) const;
  Covariance diagonal_projection() const;
  Covariance as_full() const { return full(dense()); }

  Eigen::VectorXd multiply(const Eigen::VectorXd& v) const;
  // Throws singular_matrix when not invertible.
  Eigen::VectorXd solve(const Eigen::VectorXd& v) const;
  Covariance inverse() const;
  double log_det() const;

  bool is_zero() const;
  bool is_psd(double tol = 1e-10) const;

 private:
  bool diagonal_mode_ = false;
  Eigen::MatrixXd full_;
  Eigen::VectorXd diag_;
};

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& m);
double min_eigenvalue(const Eigen::MatrixXd& m);
// Symmetric square root and inverse square root via the eigendecomposition;
// negative eigenvalues within round-off are clamped to zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m);
Eigen::MatrixXd psd_inv_sqrt(const Eigen::MatrixXd& m);
// Inverse of a symmetric positive definite matrix; throws singular_matrix.
Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m);

// log N(diff; 0, cov).
double gaussian_log_density(const Eigen::VectorXd& diff, const Covariance& cov);
double gaussian_log_density(const Eigen::VectorXd& diff, const Eigen::MatrixXd& cov);

}  // namespace coal
