#pragma once

#include <string>

#include <Eigen/Dense>

#include "coal/tree.hpp"

namespace coal {

enum class TaskKind { regression, classification };

// One task's examples: rows of `inputs` pair with entries of `labels`
// (+1/-1 for classification).
struct TaskDataset {
  std::string name;
  int task_id = 0;
  Eigen::MatrixXd inputs;
  Eigen::VectorXd labels;
  TaskKind kind = TaskKind::classification;

  Eigen::Index size() const { return inputs.rows(); }
  Eigen::Index dim() const { return inputs.cols(); }
  void validate() const;
};

struct WeightPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
};

struct MapOptions {
  double grad_tol = 1e-6;
  int max_iter = 500;
};

double sigmoid(double z);
double log_sigmoid(double z);

// Data term of the log posterior. Regression uses N(w'x, rho2) including the
// normalizer; classification uses log sigmoid(y w'x).
double log_likelihood(const TaskDataset& data, const Eigen::VectorXd& w, double rho2);
Eigen::VectorXd log_likelihood_gradient(const TaskDataset& data, const Eigen::VectorXd& w, double rho2);

double log_posterior(const TaskDataset& data, const GaussianMessage& prior, double rho2,
                     const Eigen::VectorXd& w);
Eigen::VectorXd log_posterior_gradient(const TaskDataset& data, const GaussianMessage& prior, double rho2,
                                       const Eigen::VectorXd& w);

// argmax_w prior(w) * prod_n p(y_n | x_n, w). Regression is solved in closed
// form; classification by preconditioned Polak-Ribiere conjugate gradient,
// polished with Newton steps if CG stalls short of grad_tol.
Eigen::VectorXd map_weights(const TaskDataset& data, const GaussianMessage& prior, double rho2,
                            const MapOptions& opts = {});

// Diagonal of A: s_n(1 - s_n) for classification, ones for regression.
Eigen::VectorXd laplace_curvature(const TaskDataset& data, const Eigen::VectorXd& w);

// (X' A X + prior_var^{-1})^{-1}; returns prior_var itself when there is no data.
Eigen::MatrixXd laplace_covariance(const TaskDataset& data, const Eigen::VectorXd& curvature,
                                   const Eigen::MatrixXd& prior_var);

// Regression: w'x. Classification: P(y = +1 | x).
double predict(const Eigen::VectorXd& w, const Eigen::VectorXd& x, TaskKind kind);
// Real-valued scores for every row (w'x for both kinds).
Eigen::VectorXd decision_values(const Eigen::VectorXd& w, const Eigen::MatrixXd& inputs);

}  // namespace coal
