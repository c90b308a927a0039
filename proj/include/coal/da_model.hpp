#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "coal/config.hpp"
#include "coal/glm.hpp"
#include "coal/tree.hpp"

namespace coal {

// Generative input model used by the input-modeling variants. Continuous
// features diffuse their per-task mean; discrete features (integer codes
// 0..C-1) switch category along branches with the kernel below.
struct InputModel {
  std::vector<FeatureKind> kinds;
  std::vector<int> categories;               // 0 for continuous features
  std::vector<Eigen::VectorXd> equilibrium;  // q_d; empty for continuous features
  Eigen::VectorXd rates;                     // one diagonal rate per feature
  std::vector<Eigen::VectorXd> leaf_summaries;
};

struct DaParams {
  Variant variant = Variant::full;
  DiffusionCovariance lambda;
  // Diagonal input diffusion over the input-summary coordinates (+x and data variants).
  std::optional<DiffusionCovariance> input_lambda;
  CoalescentTree tree;
  std::vector<WeightPosterior> leaf_posteriors;
  double sigma2 = 1.0;
  double rho2 = 1.0;
  std::optional<InputModel> input_model;

  int iteration = 0;  // selected EM iterate
  std::vector<double> heldout_trace;    // per iterate; empty when selection is off
  std::vector<double> objective_trace;  // per iterate

  std::vector<Eigen::VectorXd> weights() const;
};

// e^{-delta rate} I + (1 - e^{-delta rate}) 1 q'.
Eigen::MatrixXd discrete_transition(const Eigen::VectorXd& q, double rate, double delta);

// Per-task input summary messages. Continuous: feature mean with variance
// var/N. Discrete: category frequencies with variance p(1-p)/N. Variances
// are floored at 1e-8. The category count of a discrete feature is the
// largest code seen across tasks plus one.
std::vector<GaussianMessage> input_summary_messages(const std::vector<TaskDataset>& data,
                                                    const std::vector<FeatureKind>& kinds);

// Weight messages joined with input summaries (+x), or the summaries alone
// (data). Diagonal variants project the weight variance to its diagonal.
std::vector<GaussianMessage> leaf_messages_with_inputs(const std::vector<TaskDataset>& data,
                                                       const std::vector<WeightPosterior>& posteriors,
                                                       const std::vector<FeatureKind>& kinds, Variant variant);

// Weight-only leaf messages; diagonal projection when `diagonal`.
std::vector<GaussianMessage> weight_messages(const std::vector<WeightPosterior>& posteriors, bool diagonal);

// Inverse-Wishart mode update from a tree carrying upward messages:
// Sigma = I + sum over merges of M^{-1/2} D D' M^{-1/2} with D the sibling
// mean difference and M = v_l + v_r + (b_l + b_r) Lambda; returns
// Sigma / (2D + K + 2). Diagonal output when current_lambda is diagonal.
DiffusionCovariance mstep_lambda(const CoalescentTree& tree, const DiffusionCovariance& current_lambda);

// Prior covariance of the stacked leaf weights (KD x KD) when the root is
// N(0, sigma2 I) and weights diffuse with lambda.
Eigen::MatrixXd leaf_prior_covariance(const CoalescentTree& tree, const DiffusionCovariance& lambda,
                                      double sigma2);

// Joint MAP of all leaf weights with internal nodes integrated out, and the
// Laplace covariance of each leaf given the others.
std::vector<WeightPosterior> da_estep(const std::vector<TaskDataset>& data, const CoalescentTree& tree,
                                      const DiffusionCovariance& lambda, double sigma2, double rho2,
                                      const std::vector<Eigen::VectorXd>* warm_start = nullptr);

// sum_k log p(y_k | w_k) + log p(w | tree, lambda) + log p(tree) + log IW(lambda; I, D+1).
double da_objective(const std::vector<TaskDataset>& data, const std::vector<Eigen::VectorXd>& weights,
                    const CoalescentTree& tree, const DiffusionCovariance& lambda, double sigma2, double rho2);

// Plug-in log likelihood of each task's examples at its weights, summed.
double heldout_log_likelihood(const std::vector<TaskDataset>& tasks, const std::vector<Eigen::VectorXd>& weights,
                              double rho2);

DaParams em_fit_da(const std::vector<TaskDataset>& data, const ModelConfig& config);

// Picks sigma2 (and rho2 for regression) from {0.01, 0.1, 1, 10} by the
// held-out likelihood of the selected iterate.
ModelConfig tune_da(const std::vector<TaskDataset>& data, ModelConfig config);

struct DaSampleOptions {
  TaskKind kind = TaskKind::classification;
  Eigen::Index n_test = 0;
  std::optional<CoalescentTree> tree;
  std::optional<DiffusionCovariance> lambda;
  std::optional<Eigen::VectorXd> root_mean;
  bool model_inputs = false;  // draw inputs from an InputModel diffused on the tree
};

struct DaSample {
  DaParams truth;
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
};

DaSample sample_da(const ModelConfig& config, int num_tasks, Eigen::Index dim, Eigen::Index n_per_task,
                   std::uint64_t seed, const DaSampleOptions& opts = {});

}  // namespace coal
