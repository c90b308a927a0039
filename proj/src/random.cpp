#include "coal/random.hpp"

#include <cmath>

#include "coal/error.hpp"

namespace coal {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = normal(rng);
  return v;
}

Eigen::MatrixXd standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  return m;
}

Eigen::VectorXd sample_gaussian(Rng& rng, const Eigen::VectorXd& mean, const Covariance& cov) {
  require(mean.size() == cov.dim(), ErrorKind::dimension_mismatch, "mean/covariance dimension mismatch");
  Eigen::VectorXd z = standard_normal(rng, mean.size());
  if (cov.is_diagonal()) return mean + cov.diag().cwiseMax(0.0).cwiseSqrt().cwiseProduct(z);
  return mean + psd_sqrt(cov.matrix()) * z;
}

Eigen::MatrixXd sample_wishart(Rng& rng, const Eigen::MatrixXd& scale, double dof) {
  const Eigen::Index d = scale.rows();
  require(dof > static_cast<double>(d) - 1.0, ErrorKind::invalid_argument, "Wishart dof must exceed dim - 1");
  Eigen::LLT<Eigen::MatrixXd> llt(symmetrize(scale));
  require(llt.info() == Eigen::Success, ErrorKind::singular_matrix, "Wishart scale must be positive definite");
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d, d);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < d; ++i) {
    std::chi_squared_distribution<double> chi2(dof - static_cast<double>(i));
    a(i, i) = std::sqrt(chi2(rng));
    for (Eigen::Index j = 0; j < i; ++j) a(i, j) = normal(rng);
  }
  Eigen::MatrixXd la = llt.matrixL() * a;
  return symmetrize(la * la.transpose());
}

Eigen::MatrixXd sample_inverse_wishart(Rng& rng, const Eigen::MatrixXd& psi, double dof) {
  Eigen::MatrixXd w = sample_wishart(rng, spd_inverse(psi), dof);
  return spd_inverse(w);
}

Eigen::MatrixXd covariance_to_correlation(const Eigen::MatrixXd& cov) {
  Eigen::VectorXd d = cov.diagonal();
  require((d.array() > 0.0).all(), ErrorKind::singular_matrix, "covariance has a non-positive variance");
  Eigen::VectorXd s = d.cwiseSqrt().cwiseInverse();
  Eigen::MatrixXd r = s.asDiagonal() * cov * s.asDiagonal();
  r = symmetrize(r);
  r.diagonal().setOnes();
  return r;
}

}  // namespace coal
