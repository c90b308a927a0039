#include "coal/covariance.hpp"

#include <cmath>
#include <numbers>

#include "coal/error.hpp"

namespace coal {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

Eigen::LLT<Eigen::MatrixXd> checked_llt(const Eigen::MatrixXd& m) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success)
    throw Error(ErrorKind::singular_matrix, "matrix is not positive definite");
  return llt;
}

}  // namespace

Covariance Covariance::full(Eigen::MatrixXd m) {
  require(m.rows() == m.cols(), ErrorKind::dimension_mismatch, "covariance must be square");
  Covariance c;
  c.diagonal_mode_ = false;
  c.full_ = symmetrize(m);
  return c;
}

Covariance Covariance::diagonal(Eigen::VectorXd d) {
  Covariance c;
  c.diagonal_mode_ = true;
  c.diag_ = std::move(d);
  return c;
}

Covariance Covariance::zero(Eigen::Index dim, bool diagonal_mode) {
  return diagonal_mode ? diagonal(Eigen::VectorXd::Zero(dim))
                       : full(Eigen::MatrixXd::Zero(dim, dim));
}

Covariance Covariance::identity(Eigen::Index dim, bool diagonal_mode, double scale) {
  return diagonal_mode ? diagonal(Eigen::VectorXd::Constant(dim, scale))
                       : full(scale * Eigen::MatrixXd::Identity(dim, dim));
}

Eigen::MatrixXd Covariance::dense() const {
  if (diagonal_mode_) return diag_.asDiagonal();
  return full_;
}

Eigen::VectorXd Covariance::diagonal_entries() const {
  return diagonal_mode_ ? diag_ : Eigen::VectorXd(full_.diagonal());
}

Covariance Covariance::scaled(double s) const {
  return diagonal_mode_ ? diagonal(s * diag_) : full(s * full_);
}

Covariance Covariance::operator+(const Covariance& other) const {
  require(dim() == other.dim(), ErrorKind::dimension_mismatch, "covariance dimensions differ");
  if (diagonal_mode_ && other.diagonal_mode_) return diagonal(diag_ + other.diag_);
  return full(dense() + other.dense());
}

Covariance Covariance::diagonal_projection() const { return diagonal(diagonal_entries()); }

Eigen::VectorXd Covariance::multiply(const Eigen::VectorXd& v) const {
  require(v.size() == dim(), ErrorKind::dimension_mismatch, "vector/covariance dimension mismatch");
  if (diagonal_mode_) return diag_.cwiseProduct(v);
  return full_ * v;
}

Eigen::VectorXd Covariance::solve(const Eigen::VectorXd& v) const {
  require(v.size() == dim(), ErrorKind::dimension_mismatch, "vector/covariance dimension mismatch");
  if (diagonal_mode_) {
    require((diag_.array() > 0.0).all(), ErrorKind::singular_matrix, "diagonal covariance has a zero entry");
    return v.cwiseQuotient(diag_);
  }
  return checked_llt(full_).solve(v);
}

Covariance Covariance::inverse() const {
  if (diagonal_mode_) {
    require((diag_.array() > 0.0).all(), ErrorKind::singular_matrix, "diagonal covariance has a zero entry");
    return diagonal(diag_.cwiseInverse());
  }
  return full(spd_inverse(full_));
}

double Covariance::log_det() const {
  if (diagonal_mode_) {
    require((diag_.array() > 0.0).all(), ErrorKind::singular_matrix, "diagonal covariance has a zero entry");
    return diag_.array().log().sum();
  }
  auto llt = checked_llt(full_);
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

bool Covariance::is_zero() const {
  return diagonal_mode_ ? diag_.isZero(0.0) : full_.isZero(0.0);
}

bool Covariance::is_psd(double tol) const {
  if (diagonal_mode_) return (diag_.array() >= -tol).all() && diag_.allFinite();
  if (!full_.allFinite()) return false;
  if (dim() == 0) return true;
  double scale = std::max(1.0, full_.cwiseAbs().maxCoeff());
  return min_eigenvalue(full_) >= -tol * scale;
}

Eigen::MatrixXd symmetrize(const Eigen::MatrixXd& m) { return 0.5 * (m + m.transpose()); }

double min_eigenvalue(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(m), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(m));
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd psd_inv_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(m));
  const Eigen::VectorXd& ev = es.eigenvalues();
  require(ev.minCoeff() > 0.0, ErrorKind::singular_matrix, "inverse square root of a singular matrix");
  Eigen::VectorXd inv = ev.cwiseSqrt().cwiseInverse();
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd spd_inverse(const Eigen::MatrixXd& m) {
  auto llt = checked_llt(symmetrize(m));
  Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  return symmetrize(inv);
}

double gaussian_log_density(const Eigen::VectorXd& diff, const Covariance& cov) {
  require(diff.size() == cov.dim(), ErrorKind::dimension_mismatch, "density dimension mismatch");
  if (cov.is_diagonal()) {
    const auto& d = cov.diag();
    require((d.array() > 0.0).all(), ErrorKind::singular_matrix, "singular diagonal covariance");
    double quad = (diff.array().square() / d.array()).sum();
    return -0.5 * (static_cast<double>(diff.size()) * kLog2Pi + d.array().log().sum() + quad);
  }
  return gaussian_log_density(diff, cov.matrix());
}

double gaussian_log_density(const Eigen::VectorXd& diff, const Eigen::MatrixXd& cov) {
  require(diff.size() == cov.rows(), ErrorKind::dimension_mismatch, "density dimension mismatch");
  auto llt = checked_llt(symmetrize(cov));
  Eigen::VectorXd z = llt.matrixL().solve(diff);
  double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return -0.5 * (static_cast<double>(diff.size()) * kLog2Pi + logdet + z.squaredNorm());
}

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::dimension_mismatch: return "dimension-mismatch";
    case ErrorKind::degenerate_message: return "degenerate-message";
    case ErrorKind::singular_matrix: return "singular-matrix";
    case ErrorKind::not_psd: return "not-psd";
    case ErrorKind::optimization_failure: return "optimization-failure";
    case ErrorKind::parse_error: return "parse-error";
    case ErrorKind::empty_task: return "empty-task";
    case ErrorKind::undefined_metric: return "undefined-metric";
    case ErrorKind::io_error: return "io-error";
  }
  return "unknown";
}

}  // namespace coal
