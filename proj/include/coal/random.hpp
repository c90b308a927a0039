#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "coal/covariance.hpp"

namespace coal {

using Rng = std::mt19937_64;

// Mixes a base seed with a stream index (splitmix64), so that independent
// consumers of one user seed draw from unrelated streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

Eigen::VectorXd standard_normal(Rng& rng, Eigen::Index n);
Eigen::MatrixXd standard_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols);

// Draws N(mean, cov). cov only needs to be PSD.
Eigen::VectorXd sample_gaussian(Rng& rng, const Eigen::VectorXd& mean, const Covariance& cov);

// Wishart(scale, dof) by the Bartlett decomposition; dof > dim - 1.
Eigen::MatrixXd sample_wishart(Rng& rng, const Eigen::MatrixXd& scale, double dof);
// Inverse-Wishart with scale matrix psi: the inverse of Wishart(psi^{-1}, dof).
Eigen::MatrixXd sample_inverse_wishart(Rng& rng, const Eigen::MatrixXd& psi, double dof);

Eigen::MatrixXd covariance_to_correlation(const Eigen::MatrixXd& cov);

}  // namespace coal
