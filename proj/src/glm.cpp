#include "coal/glm.hpp"

#include <cmath>

#include "coal/error.hpp"

namespace coal {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

void check_prior(const TaskDataset& data, const GaussianMessage& prior) {
  require(prior.dim() == data.dim() && prior.variance.dim() == data.dim(), ErrorKind::dimension_mismatch,
          "prior dimension differs from data dimension");
}

// Curvature of the negative log posterior along direction d at w.
double directional_curvature(const TaskDataset& data, const GaussianMessage& prior, double rho2,
                             const Eigen::VectorXd& w, const Eigen::VectorXd& d) {
  double c = d.dot(prior.variance.solve(d));
  if (data.size() == 0) return c;
  Eigen::VectorXd xd = data.inputs * d;
  Eigen::VectorXd a = laplace_curvature(data, w);
  if (data.kind == TaskKind::regression) a /= rho2;
  return c + a.dot(xd.cwiseAbs2());
}

Eigen::MatrixXd neg_hessian(const TaskDataset& data, const Eigen::MatrixXd& prior_precision, double rho2,
                            const Eigen::VectorXd& w) {
  Eigen::VectorXd a = laplace_curvature(data, w);
  if (data.kind == TaskKind::regression) a /= rho2;
  return prior_precision + data.inputs.transpose() * a.asDiagonal() * data.inputs;
}

}  // namespace

void TaskDataset::validate() const {
  require(inputs.rows() == labels.size(), ErrorKind::dimension_mismatch,
          "task '" + name + "': row count differs from label count");
  require(inputs.allFinite() && labels.allFinite(), ErrorKind::invalid_argument,
          "task '" + name + "': non-finite values");
  if (kind == TaskKind::classification)
    for (Eigen::Index i = 0; i < labels.size(); ++i)
      require(labels[i] == 1.0 || labels[i] == -1.0, ErrorKind::invalid_argument,
              "task '" + name + "': classification labels must be +1/-1");
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

double log_sigmoid(double z) {
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

double log_likelihood(const TaskDataset& data, const Eigen::VectorXd& w, double rho2) {
  require(w.size() == data.dim(), ErrorKind::dimension_mismatch, "weight dimension differs from data");
  if (data.size() == 0) return 0.0;
  Eigen::VectorXd z = data.inputs * w;
  if (data.kind == TaskKind::regression) {
    require(rho2 > 0.0, ErrorKind::invalid_argument, "noise variance must be positive");
    double sse = (data.labels - z).squaredNorm();
    return -0.5 * (static_cast<double>(data.size()) * (kLog2Pi + std::log(rho2)) + sse / rho2);
  }
  double ll = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) ll += log_sigmoid(data.labels[i] * z[i]);
  return ll;
}

Eigen::VectorXd log_likelihood_gradient(const TaskDataset& data, const Eigen::VectorXd& w, double rho2) {
  require(w.size() == data.dim(), ErrorKind::dimension_mismatch, "weight dimension differs from data");
  if (data.size() == 0) return Eigen::VectorXd::Zero(w.size());
  Eigen::VectorXd z = data.inputs * w;
  if (data.kind == TaskKind::regression) return data.inputs.transpose() * (data.labels - z) / rho2;
  Eigen::VectorXd r(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) r[i] = data.labels[i] * sigmoid(-data.labels[i] * z[i]);
  return data.inputs.transpose() * r;
}

double log_posterior(const TaskDataset& data, const GaussianMessage& prior, double rho2,
                     const Eigen::VectorXd& w) {
  check_prior(data, prior);
  return gaussian_log_density(w - prior.mean, prior.variance) + log_likelihood(data, w, rho2);
}

Eigen::VectorXd log_posterior_gradient(const TaskDataset& data, const GaussianMessage& prior, double rho2,
                                       const Eigen::VectorXd& w) {
  check_prior(data, prior);
  return -prior.variance.solve(w - prior.mean) + log_likelihood_gradient(data, w, rho2);
}

Eigen::VectorXd map_weights(const TaskDataset& data, const GaussianMessage& prior, double rho2,
                            const MapOptions& opts) {
  check_prior(data, prior);
  require(prior.mean.allFinite() && data.inputs.allFinite() && data.labels.allFinite(),
          ErrorKind::invalid_argument, "non-finite inputs to MAP estimation");
  if (data.kind == TaskKind::regression)
    require(rho2 > 0.0, ErrorKind::invalid_argument, "noise variance must be positive");
  if (data.size() == 0) return prior.mean;

  const Eigen::MatrixXd prior_precision = prior.variance.inverse().dense();
  if (data.kind == TaskKind::regression) {
    Eigen::MatrixXd h = prior_precision + data.inputs.transpose() * data.inputs / rho2;
    Eigen::VectorXd rhs = prior_precision * prior.mean + data.inputs.transpose() * data.labels / rho2;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(symmetrize(h));
    require(ldlt.info() == Eigen::Success, ErrorKind::singular_matrix, "regression normal equations are singular");
    return ldlt.solve(rhs);
  }

  // Minimize f = -log posterior.
  auto f = [&](const Eigen::VectorXd& w) { return -log_posterior(data, prior, rho2, w); };
  auto grad = [&](const Eigen::VectorXd& w) { return Eigen::VectorXd(-log_posterior_gradient(data, prior, rho2, w)); };

  // Jacobi preconditioner from the curvature bound s(1-s) <= 1/4.
  Eigen::VectorXd precond = prior_precision.diagonal() +
                            0.25 * data.inputs.cwiseAbs2().colwise().sum().transpose();
  precond = precond.cwiseMax(1e-12).cwiseInverse();

  Eigen::VectorXd w = prior.mean;
  Eigen::VectorXd g = grad(w);
  Eigen::VectorXd pg = precond.cwiseProduct(g);
  Eigen::VectorXd d = -pg;
  double fw = f(w);
  const Eigen::Index dim = w.size();
  int since_restart = 0;
  for (int it = 0; it < opts.max_iter && g.lpNorm<Eigen::Infinity>() >= opts.grad_tol; ++it) {
    if (g.dot(d) >= 0.0) {
      d = -pg;
      since_restart = 0;
    }
    // Newton steps on the step length, then Armijo backtracking as a guard.
    double alpha = 0.0;
    for (int ls = 0; ls < 8; ++ls) {
      Eigen::VectorXd wa = w + alpha * d;
      double slope = grad(wa).dot(d);
      double curv = directional_curvature(data, prior, rho2, wa, d);
      if (!(curv > 0.0)) break;
      double step = -slope / curv;
      alpha += step;
      if (std::abs(step) <= 1e-12 * (1.0 + std::abs(alpha))) break;
    }
    if (!(alpha > 0.0) || !std::isfinite(alpha)) alpha = 1.0;
    const double slope0 = g.dot(d);
    Eigen::VectorXd w_new = w + alpha * d;
    double f_new = f(w_new);
    int bt = 0;
    while (!(f_new <= fw + 1e-4 * alpha * slope0) && bt < 60) {
      alpha *= 0.5;
      w_new = w + alpha * d;
      f_new = f(w_new);
      ++bt;
    }
    if (!(f_new <= fw)) break;  // no progress possible along d
    Eigen::VectorXd g_new = grad(w_new);
    Eigen::VectorXd pg_new = precond.cwiseProduct(g_new);
    double beta = g_new.dot(pg_new - pg) / g.dot(pg);
    ++since_restart;
    if (!(beta > 0.0) || since_restart >= dim) {
      beta = 0.0;
      since_restart = 0;
    }
    d = -pg_new + beta * d;
    w = std::move(w_new);
    fw = f_new;
    g = std::move(g_new);
    pg = std::move(pg_new);
  }

  for (int it = 0; it < 50 && g.lpNorm<Eigen::Infinity>() >= opts.grad_tol; ++it) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(symmetrize(neg_hessian(data, prior_precision, rho2, w)));
    Eigen::VectorXd step = -ldlt.solve(g);
    double alpha = 1.0;
    Eigen::VectorXd w_new = w + step;
    double f_new = f(w_new);
    while (!(f_new <= fw) && alpha > 1e-10) {
      alpha *= 0.5;
      w_new = w + alpha * step;
      f_new = f(w_new);
    }
    if (!(f_new <= fw)) break;
    w = std::move(w_new);
    fw = f_new;
    g = grad(w);
  }
  require(w.allFinite() && std::isfinite(fw), ErrorKind::optimization_failure, "MAP estimation diverged");
  return w;
}

Eigen::VectorXd laplace_curvature(const TaskDataset& data, const Eigen::VectorXd& w) {
  require(w.allFinite(), ErrorKind::invalid_argument, "non-finite weights");
  if (data.kind == TaskKind::regression) return Eigen::VectorXd::Ones(data.size());
  Eigen::VectorXd z = data.inputs * w;
  Eigen::VectorXd a(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    double s = sigmoid(z[i]);
    a[i] = s * (1.0 - s);
  }
  return a;
}

Eigen::MatrixXd laplace_covariance(const TaskDataset& data, const Eigen::VectorXd& curvature,
                                   const Eigen::MatrixXd& prior_var) {
  require(prior_var.rows() == data.dim() && prior_var.cols() == data.dim(), ErrorKind::dimension_mismatch,
          "prior variance dimension differs from data");
  require(curvature.size() == data.size(), ErrorKind::dimension_mismatch, "one curvature entry per example");
  if (data.size() == 0) return prior_var;
  Eigen::MatrixXd precision = spd_inverse(prior_var) +
                              data.inputs.transpose() * curvature.asDiagonal() * data.inputs;
  return spd_inverse(precision);
}

double predict(const Eigen::VectorXd& w, const Eigen::VectorXd& x, TaskKind kind) {
  require(w.size() == x.size(), ErrorKind::dimension_mismatch, "weight and input dimensions differ");
  double z = w.dot(x);
  return kind == TaskKind::regression ? z : sigmoid(z);
}

Eigen::VectorXd decision_values(const Eigen::VectorXd& w, const Eigen::MatrixXd& inputs) {
  require(w.size() == inputs.cols(), ErrorKind::dimension_mismatch, "weight and input dimensions differ");
  return inputs * w;
}

}  // namespace coal
