#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "coal/config.hpp"
#include "coal/glm.hpp"
#include "coal/random.hpp"
#include "coal/tree.hpp"

namespace coal {

// Task weight prior N(0, e^S R e^S): R is a shared correlation matrix and S
// (stored as its diagonal) a per-task log standard deviation that diffuses
// over the tree.
struct MtlParams {
  Variant variant = Variant::full;
  Eigen::MatrixXd R;
  DiffusionCovariance lambda;
  CoalescentTree tree;
  std::vector<Eigen::VectorXd> leaf_S;
  std::vector<Eigen::VectorXd> leaf_w;
  double sigma2 = 1.0;
  double rho2 = 1.0;

  int iteration = 0;
  std::vector<double> heldout_trace;
  std::vector<double> objective_trace;
};

// Unnormalized log density of R under the correlation prior with uniform
// pairwise marginals. Returns -1e12 when R is numerically singular.
double correlation_log_prior(const Eigen::MatrixXd& R);
constexpr double kLogDensityFloor = -1e12;

Eigen::MatrixXd task_weight_covariance(const Eigen::VectorXd& S, const Eigen::MatrixXd& R);

// log N(w; 0, e^S R e^S) + log N(S; P, branch_cov) with S-independent
// constants dropped:
//   -sum S - 1/2 (S-P)' B^{-1} (S-P) - 1/2 z' R^{-1} z,  z = e^{-S} w.
// For diagonal R and B this is the trace form of the hard-EM objective.
double s_log_posterior(const Eigen::VectorXd& S, const Eigen::VectorXd& parent, const Covariance& branch_cov,
                       const Eigen::MatrixXd& R, const Eigen::VectorXd& w);
Eigen::VectorXd s_gradient(const Eigen::VectorXd& S, const Eigen::VectorXd& parent, const Covariance& branch_cov,
                           const Eigen::MatrixXd& R, const Eigen::VectorXd& w);

struct SOptimizeOptions {
  double step = 0.1;
  double tol = 1e-6;
  int max_iter = 100000;
};

// Gradient ascent from init. Each iteration tries the base step and halves
// it until the objective increases; stops when the accepted move is below
// tol in the infinity norm.
Eigen::VectorXd optimize_s(const Eigen::VectorXd& init, const Eigen::VectorXd& parent, const Covariance& branch_cov,
                           const Eigen::MatrixXd& R, const Eigen::VectorXd& w, const SOptimizeOptions& opts = {});

// Correlation part of a draw from IW(I, D+1); pairwise marginals are uniform.
Eigen::MatrixXd sample_correlation(Rng& rng, Eigen::Index dim);

// sum_k log N(w_k; 0, e^{S_k} R e^{S_k}) + correlation_log_prior(R).
double mtl_r_objective(const std::vector<Eigen::VectorXd>& leaf_w, const std::vector<Eigen::VectorXd>& leaf_S,
                       const Eigen::MatrixXd& R);

MtlParams em_fit_mtl(const std::vector<TaskDataset>& data, const ModelConfig& config);

struct MtlSampleOptions {
  TaskKind kind = TaskKind::regression;
  Eigen::Index n_test = 0;
  std::optional<CoalescentTree> tree;
  std::optional<DiffusionCovariance> lambda;
  std::optional<std::vector<Eigen::VectorXd>> leaf_S;
};

struct MtlSample {
  MtlParams truth;
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
};

MtlSample sample_mtl(const ModelConfig& config, int num_tasks, Eigen::Index dim, Eigen::Index n_per_task,
                     std::uint64_t seed, const MtlSampleOptions& opts = {});

}  // namespace coal
