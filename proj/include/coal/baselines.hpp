#pragma once

#include <vector>

#include <Eigen/Dense>

#include "coal/glm.hpp"

namespace coal {

// One MAP fit on the concatenation of every task, prior N(0, sigma2 I).
Eigen::VectorXd baseline_pool(const std::vector<TaskDataset>& tasks, double sigma2, double rho2);

// Independent per-task MAP fits with prior N(0, sigma2 I).
std::vector<Eigen::VectorXd> baseline_indp(const std::vector<TaskDataset>& tasks, double sigma2, double rho2);

// Feature augmentation: task k's input x becomes [x, 0, .., x (block k+1), .., 0]
// of length (K+1)D. One MAP fit in the augmented space.
struct FedaModel {
  Eigen::VectorXd weights;  // (K+1)D
  Eigen::Index dim = 0;
  int num_tasks = 0;

  // Effective weights for task k: shared block plus block k.
  Eigen::VectorXd task_weights(int k) const;
};

Eigen::MatrixXd feda_augment(const Eigen::MatrixXd& inputs, int task, int num_tasks);
FedaModel baseline_feda(const std::vector<TaskDataset>& tasks, double sigma2, double rho2);

}  // namespace coal
