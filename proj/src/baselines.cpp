#include "coal/baselines.hpp"

#include "coal/error.hpp"

namespace coal {

namespace {

void check_tasks(const std::vector<TaskDataset>& tasks) {
  require(!tasks.empty(), ErrorKind::invalid_argument, "no tasks given");
  for (const auto& t : tasks) {
    require(t.dim() == tasks.front().dim(), ErrorKind::dimension_mismatch, "tasks disagree on feature dimension");
    require(t.kind == tasks.front().kind, ErrorKind::invalid_argument, "tasks disagree on task kind");
  }
}

GaussianMessage isotropic_prior(Eigen::Index d, double sigma2) {
  return {Eigen::VectorXd::Zero(d), Covariance::identity(d, true, sigma2)};
}

}  // namespace

Eigen::VectorXd baseline_pool(const std::vector<TaskDataset>& tasks, double sigma2, double rho2) {
  check_tasks(tasks);
  TaskDataset pooled;
  pooled.name = "pool";
  pooled.kind = tasks.front().kind;
  Eigen::Index n = 0;
  for (const auto& t : tasks) n += t.size();
  const Eigen::Index d = tasks.front().dim();
  pooled.inputs.resize(n, d);
  pooled.labels.resize(n);
  Eigen::Index row = 0;
  for (const auto& t : tasks) {
    pooled.inputs.middleRows(row, t.size()) = t.inputs;
    pooled.labels.segment(row, t.size()) = t.labels;
    row += t.size();
  }
  return map_weights(pooled, isotropic_prior(d, sigma2), rho2);
}

std::vector<Eigen::VectorXd> baseline_indp(const std::vector<TaskDataset>& tasks, double sigma2, double rho2) {
  check_tasks(tasks);
  std::vector<Eigen::VectorXd> out;
  for (const auto& t : tasks) out.push_back(map_weights(t, isotropic_prior(t.dim(), sigma2), rho2));
  return out;
}

Eigen::VectorXd FedaModel::task_weights(int k) const {
  require(k >= 0 && k < num_tasks, ErrorKind::invalid_argument, "task index out of range");
  return weights.head(dim) + weights.segment((k + 1) * dim, dim);
}

Eigen::MatrixXd feda_augment(const Eigen::MatrixXd& inputs, int task, int num_tasks) {
  require(task >= 0 && task < num_tasks, ErrorKind::invalid_argument, "task index out of range");
  const Eigen::Index d = inputs.cols();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(inputs.rows(), (num_tasks + 1) * d);
  out.leftCols(d) = inputs;
  out.middleCols((task + 1) * d, d) = inputs;
  return out;
}

FedaModel baseline_feda(const std::vector<TaskDataset>& tasks, double sigma2, double rho2) {
  check_tasks(tasks);
  const int k = static_cast<int>(tasks.size());
  std::vector<TaskDataset> augmented;
  for (int i = 0; i < k; ++i) {
    TaskDataset t = tasks[static_cast<std::size_t>(i)];
    t.inputs = feda_augment(t.inputs, i, k);
    augmented.push_back(std::move(t));
  }
  FedaModel m;
  m.dim = tasks.front().dim();
  m.num_tasks = k;
  m.weights = baseline_pool(augmented, sigma2, rho2);
  return m;
}

}  // namespace coal
