#include "coal/mtl_model.hpp"

#include <cmath>
#include <algorithm>
#include <limits>
#include <optional>

#include "coal/da_model.hpp"
#include "coal/data_io.hpp"
#include "coal/error.hpp"

namespace coal {

namespace {

constexpr double kLeafSVariance = 1e-4;

void check_correlation(const Eigen::MatrixXd& R) {
  require(R.rows() == R.cols() && R.rows() >= 1, ErrorKind::dimension_mismatch, "correlation matrix must be square");
  require(R.allFinite(), ErrorKind::invalid_argument, "correlation matrix has non-finite entries");
  const double scale = 1e-10;
  for (Eigen::Index i = 0; i < R.rows(); ++i) {
    require(std::abs(R(i, i) - 1.0) < scale, ErrorKind::invalid_argument, "correlation diagonal must be 1");
    for (Eigen::Index j = 0; j < i; ++j)
      require(std::abs(R(i, j) - R(j, i)) < scale, ErrorKind::invalid_argument, "correlation matrix must be symmetric");
  }
}

// log det of an SPD matrix, or nullopt when the Cholesky factorization fails.
std::optional<double> spd_log_det(const Eigen::MatrixXd& m) {
  if (m.rows() == 0) return 0.0;
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  if (llt.info() != Eigen::Success) return std::nullopt;
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

Eigen::MatrixXd drop_index(const Eigen::MatrixXd& m, Eigen::Index i) {
  const Eigen::Index n = m.rows();
  Eigen::MatrixXd out(n - 1, n - 1);
  for (Eigen::Index a = 0, ra = 0; a < n; ++a) {
    if (a == i) continue;
    for (Eigen::Index b = 0, rb = 0; b < n; ++b) {
      if (b == i) continue;
      out(ra, rb++) = m(a, b);
    }
    ++ra;
  }
  return out;
}

void check_s_inputs(const Eigen::VectorXd& S, const Eigen::VectorXd& parent, const Covariance& branch_cov,
                    const Eigen::MatrixXd& R, const Eigen::VectorXd& w) {
  const Eigen::Index d = S.size();
  require(parent.size() == d && branch_cov.dim() == d && R.rows() == d && R.cols() == d && w.size() == d,
          ErrorKind::dimension_mismatch, "S objective inputs disagree on dimension");
}

Eigen::VectorXd solve_spd(const Eigen::MatrixXd& m, const Eigen::VectorXd& v) {
  Eigen::LLT<Eigen::MatrixXd> llt(m);
  require(llt.info() == Eigen::Success, ErrorKind::singular_matrix, "matrix is singular");
  return llt.solve(v);
}

std::vector<GaussianMessage> s_messages(const std::vector<Eigen::VectorXd>& leaf_S, bool diagonal) {
  std::vector<GaussianMessage> out;
  for (const auto& s : leaf_S) out.push_back({s, Covariance::identity(s.size(), diagonal, kLeafSVariance)});
  return out;
}

struct Snapshot {
  CoalescentTree tree;
  DiffusionCovariance lambda;
  Eigen::MatrixXd R;
  std::vector<Eigen::VectorXd> S, w;
};

}  // namespace

double correlation_log_prior(const Eigen::MatrixXd& R) {
  check_correlation(R);
  const Eigen::Index d = R.rows();
  const double dd = static_cast<double>(d);
  auto ld = spd_log_det(R);
  if (!ld) return kLogDensityFloor;
  double lp = ((dd + 1.0) * (dd - 1.0) / 2.0 - 1.0) * *ld;
  for (Eigen::Index i = 0; i < d; ++i) {
    auto sub = spd_log_det(drop_index(R, i));
    if (!sub) return kLogDensityFloor;
    lp -= (dd + 1.0) / 2.0 * *sub;
  }
  return std::max(lp, kLogDensityFloor);
}

Eigen::MatrixXd task_weight_covariance(const Eigen::VectorXd& S, const Eigen::MatrixXd& R) {
  require(R.rows() == S.size() && R.cols() == S.size(), ErrorKind::dimension_mismatch,
          "S and R disagree on dimension");
  Eigen::VectorXd e = S.array().exp();
  return symmetrize(e.asDiagonal() * R * e.asDiagonal());
}

double s_log_posterior(const Eigen::VectorXd& S, const Eigen::VectorXd& parent, const Covariance& branch_cov,
                       const Eigen::MatrixXd& R, const Eigen::VectorXd& w) {
  check_s_inputs(S, parent, branch_cov, R, w);
  Eigen::VectorXd diff = S - parent;
  Eigen::VectorXd z = (-S.array()).exp() * w.array();
  return -S.sum() - 0.5 * diff.dot(branch_cov.solve(diff)) - 0.5 * z.dot(solve_spd(R, z));
}

Eigen::VectorXd s_gradient(const Eigen::VectorXd& S, const Eigen::VectorXd& parent, const Covariance& branch_cov,
                           const Eigen::MatrixXd& R, const Eigen::VectorXd& w) {
  check_s_inputs(S, parent, branch_cov, R, w);
  Eigen::VectorXd z = (-S.array()).exp() * w.array();
  Eigen::VectorXd rz = solve_spd(R, z);
  return (-1.0 - branch_cov.solve(S - parent).array() + z.array() * rz.array()).matrix();
}

Eigen::VectorXd optimize_s(const Eigen::VectorXd& init, const Eigen::VectorXd& parent, const Covariance& branch_cov,
                           const Eigen::MatrixXd& R, const Eigen::VectorXd& w, const SOptimizeOptions& opts) {
  require(opts.step > 0.0 && opts.tol > 0.0, ErrorKind::invalid_argument, "step and tolerance must be positive");
  Eigen::VectorXd S = init;
  double f = s_log_posterior(S, parent, branch_cov, R, w);
  require(std::isfinite(f), ErrorKind::optimization_failure, "S objective is not finite at the start point");
  for (int it = 0; it < opts.max_iter; ++it) {
    Eigen::VectorXd g = s_gradient(S, parent, branch_cov, R, w);
    require(g.allFinite(), ErrorKind::optimization_failure, "S gradient is not finite");
    double step = opts.step;
    Eigen::VectorXd next = S + step * g;
    double f_next = s_log_posterior(next, parent, branch_cov, R, w);
    while (!(f_next > f) && (step * g).lpNorm<Eigen::Infinity>() >= opts.tol) {
      step *= 0.5;
      next = S + step * g;
      f_next = s_log_posterior(next, parent, branch_cov, R, w);
    }
    const double move = (next - S).lpNorm<Eigen::Infinity>();
    if (!(f_next > f)) break;  // no increasing step above tolerance
    require(std::isfinite(f_next), ErrorKind::optimization_failure, "S objective diverged");
    S = std::move(next);
    f = f_next;
    if (move < opts.tol) break;
  }
  return S;
}

Eigen::MatrixXd sample_correlation(Rng& rng, Eigen::Index dim) {
  Eigen::MatrixXd cov = sample_inverse_wishart(rng, Eigen::MatrixXd::Identity(dim, dim), static_cast<double>(dim) + 1.0);
  return covariance_to_correlation(cov);
}

double mtl_r_objective(const std::vector<Eigen::VectorXd>& leaf_w, const std::vector<Eigen::VectorXd>& leaf_S,
                       const Eigen::MatrixXd& R) {
  double lp = correlation_log_prior(R);
  if (lp <= kLogDensityFloor) return kLogDensityFloor;
  for (std::size_t k = 0; k < leaf_w.size(); ++k) {
    Eigen::MatrixXd cov = task_weight_covariance(leaf_S[k], R);
    if (!spd_log_det(cov)) return kLogDensityFloor;
    lp += gaussian_log_density(leaf_w[k], cov);
  }
  return lp;
}

MtlParams em_fit_mtl(const std::vector<TaskDataset>& data, const ModelConfig& config) {
  validate(config);
  require(config.family == ModelFamily::mtl, ErrorKind::invalid_argument, "config is not an MTL model");
  require(data.size() >= 2, ErrorKind::invalid_argument, "at least two tasks are required");
  for (const auto& t : data) {
    t.validate();
    require(t.dim() == data.front().dim(), ErrorKind::dimension_mismatch, "tasks disagree on feature dimension");
    require(t.kind == data.front().kind, ErrorKind::invalid_argument, "tasks disagree on task kind");
  }
  const int k = static_cast<int>(data.size());
  const Eigen::Index d = data.front().dim();
  const bool diag = diagonal_lambda(config.variant);
  const double sigma2 = config.sigma2, rho2 = config.rho2;
  if (config.fixed_tree)
    require(config.fixed_tree->num_leaves() == k, ErrorKind::dimension_mismatch, "fixed tree must have one leaf per task");
  if (config.fixed_lambda)
    require(config.fixed_lambda->dim() == d, ErrorKind::dimension_mismatch, "fixed lambda dimension differs from data");

  std::vector<TaskDataset> train = data, holdout;
  if (config.holdout > 0.0) {
    auto split = split_holdout(data, config.holdout, derive_seed(config.seed, 0x401d));
    train = std::move(split.train);
    holdout = std::move(split.holdout);
  }

  Eigen::MatrixXd R = Eigen::MatrixXd::Identity(d, d);
  std::vector<Eigen::VectorXd> w;
  const GaussianMessage prior0{Eigen::VectorXd::Zero(d), Covariance::identity(d, true, sigma2)};
  for (const auto& t : train) w.push_back(map_weights(t, prior0, rho2));

  DiffusionCovariance lambda = config.fixed_lambda ? *config.fixed_lambda : Covariance::identity(d, diag, sigma2);
  if (diag && !lambda.is_diagonal()) lambda = lambda.diagonal_projection();

  // Iterate 0 is the independent fit: each task's S from its own weights
  // with the root as parent. An all-zero start would give the greedy tree
  // zero-length branches and pin every S to the root.
  std::vector<Eigen::VectorXd> S;
  for (const auto& wk : w)
    S.push_back(optimize_s(Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d), Covariance::identity(d, true, sigma2), R,
                           wk));
  CoalescentTree tree = config.fixed_tree ? *config.fixed_tree : greedy_rate1_build(s_messages(S, diag), lambda);
  const GaussianMessage clamp_root{Eigen::VectorXd::Zero(d), Covariance::zero(d, diag)};

  auto objective = [&]() {
    double j = heldout_log_likelihood(train, w, rho2) + mtl_r_objective(w, S, R);
    j += tree_data_log_likelihood(tree, s_messages(S, diag), lambda, clamp_root);
    return j;
  };

  std::vector<Snapshot> snaps;
  std::vector<double> objective_trace;
  auto record = [&]() {
    snaps.push_back({tree, lambda, R, S, w});
    objective_trace.push_back(objective());
  };
  record();

  for (int it = 1; it <= config.em_iters; ++it) {
    // w-step.
    for (int i = 0; i < k; ++i) {
      auto ui = static_cast<std::size_t>(i);
      GaussianMessage prior{Eigen::VectorXd::Zero(d), Covariance::full(task_weight_covariance(S[ui], R))};
      w[ui] = map_weights(train[ui], prior, rho2);
    }
    // S-step: leaves given the smoothed parent states of a frozen snapshot.
    const auto smooth = bp_smooth(tree, s_messages(S, diag), lambda, clamp_root);
    SOptimizeOptions sopt;
    sopt.step = 0.1 / static_cast<double>(it);
    std::vector<Eigen::VectorXd> S_new = S;
    for (int i = 0; i < k; ++i) {
      auto ui = static_cast<std::size_t>(i);
      const int leaf = tree.leaves()[ui];
      const int parent = *tree.node(leaf).parent;
      Covariance branch = lambda.scaled(tree.branch_length(leaf));
      S_new[ui] = optimize_s(S[ui], smooth[static_cast<std::size_t>(parent)].mean, branch, R, w[ui], sopt);
    }
    S = std::move(S_new);
    if (!config.fixed_tree) tree = greedy_rate1_build(s_messages(S, diag), lambda);
    if (!config.fixed_lambda) lambda = mstep_lambda(bp_upward(tree, s_messages(S, diag), lambda), lambda);

    // R: IW-mode style accumulation of whitened weights, projected to unit
    // diagonal; kept only when the R-dependent objective does not drop.
    Eigen::MatrixXd acc = Eigen::MatrixXd::Identity(d, d);
    for (int i = 0; i < k; ++i) {
      auto ui = static_cast<std::size_t>(i);
      Eigen::VectorXd z = (-S[ui].array()).exp() * w[ui].array();
      acc += z * z.transpose();
    }
    Eigen::MatrixXd R_new = covariance_to_correlation(symmetrize(acc));
    if (mtl_r_objective(w, S, R_new) >= mtl_r_objective(w, S, R)) R = R_new;
    record();
  }

  std::size_t best = snaps.size() - 1;
  std::vector<double> heldout_trace;
  if (!holdout.empty()) {
    double best_val = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < snaps.size(); ++i) {
      double h = heldout_log_likelihood(holdout, snaps[i].w, rho2);
      heldout_trace.push_back(h);
      if (h > best_val) {
        best_val = h;
        best = i;
      }
    }
  }

  const Snapshot& s = snaps[best];
  MtlParams out;
  out.variant = config.variant;
  out.R = s.R;
  out.lambda = s.lambda;
  out.leaf_S = s.S;
  out.leaf_w = s.w;
  out.sigma2 = sigma2;
  out.rho2 = rho2;
  out.iteration = static_cast<int>(best);
  out.heldout_trace = std::move(heldout_trace);
  out.objective_trace = std::move(objective_trace);
  const auto msgs = s_messages(s.S, diag);
  out.tree = bp_upward(s.tree, msgs, s.lambda);
  const auto smooth = bp_smooth(s.tree, msgs, s.lambda, clamp_root);
  for (int id = 0; id < out.tree.num_nodes(); ++id) out.tree.node(id).state = smooth[static_cast<std::size_t>(id)].mean;
  std::vector<std::string> names;
  for (const auto& t : data) names.push_back(t.name.empty() ? "t" + std::to_string(t.task_id) : t.name);
  out.tree.set_leaf_names(names);
  return out;
}

MtlSample sample_mtl(const ModelConfig& config, int num_tasks, Eigen::Index dim, Eigen::Index n_per_task,
                     std::uint64_t seed, const MtlSampleOptions& opts) {
  validate(config);
  require(num_tasks >= 2, ErrorKind::invalid_argument, "at least two tasks are required");
  require(dim >= 1 && n_per_task >= 0 && opts.n_test >= 0, ErrorKind::invalid_argument, "invalid sample sizes");
  const bool diag = diagonal_lambda(config.variant);

  Rng r_rng(derive_seed(seed, 1));
  Eigen::MatrixXd R = sample_correlation(r_rng, dim);

  DiffusionCovariance lambda;
  if (opts.lambda) {
    require(opts.lambda->dim() == dim, ErrorKind::dimension_mismatch, "lambda dimension differs from dim");
    lambda = *opts.lambda;
  } else {
    Rng rng(derive_seed(seed, 2));
    lambda = Covariance::full(sample_inverse_wishart(rng, config.sigma2 * Eigen::MatrixXd::Identity(dim, dim),
                                                     static_cast<double>(dim) + 1.0));
  }
  if (diag && !lambda.is_diagonal()) lambda = lambda.diagonal_projection();

  CoalescentTree tree = opts.tree ? *opts.tree : sample_coalescent(num_tasks, derive_seed(seed, 3));
  require(tree.num_leaves() == num_tasks, ErrorKind::dimension_mismatch, "tree must have one leaf per task");
  tree = diffuse_states(std::move(tree), Eigen::VectorXd::Zero(dim), lambda, derive_seed(seed, 4));
  std::vector<Eigen::VectorXd> S;
  for (int k = 0; k < num_tasks; ++k) S.push_back(*tree.node(tree.leaves()[static_cast<std::size_t>(k)]).state);
  if (opts.leaf_S) {
    require(static_cast<int>(opts.leaf_S->size()) == num_tasks, ErrorKind::dimension_mismatch, "one S per task required");
    S = *opts.leaf_S;
    for (int k = 0; k < num_tasks; ++k) tree.node(tree.leaves()[static_cast<std::size_t>(k)]).state = S[static_cast<std::size_t>(k)];
  }

  std::vector<Eigen::VectorXd> w;
  Rng w_rng(derive_seed(seed, 5));
  for (int k = 0; k < num_tasks; ++k) {
    auto uk = static_cast<std::size_t>(k);
    require(S[uk].size() == dim, ErrorKind::dimension_mismatch, "S dimension differs from dim");
    w.push_back(sample_gaussian(w_rng, Eigen::VectorXd::Zero(dim), Covariance::full(task_weight_covariance(S[uk], R))));
  }

  auto draw_task = [&](int k, Eigen::Index n, std::uint64_t s) {
    Rng rng(s);
    TaskDataset t;
    t.name = "t" + std::to_string(k);
    t.task_id = k;
    t.kind = opts.kind;
    t.inputs = standard_normal(rng, n, dim);
    Eigen::VectorXd z = t.inputs * w[static_cast<std::size_t>(k)];
    t.labels.resize(n);
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (opts.kind == TaskKind::regression)
        t.labels[i] = z[i] + std::sqrt(config.rho2) * normal(rng);
      else
        t.labels[i] = unif(rng) < sigmoid(z[i]) ? 1.0 : -1.0;
    }
    return t;
  };

  MtlSample out;
  for (int k = 0; k < num_tasks; ++k) {
    out.train.push_back(draw_task(k, n_per_task, derive_seed(seed, 100 + static_cast<std::uint64_t>(k))));
    if (opts.n_test > 0)
      out.test.push_back(draw_task(k, opts.n_test, derive_seed(seed, 100000 + static_cast<std::uint64_t>(k))));
  }
  out.truth.variant = config.variant;
  out.truth.R = R;
  out.truth.lambda = lambda;
  out.truth.tree = std::move(tree);
  out.truth.leaf_S = std::move(S);
  out.truth.leaf_w = std::move(w);
  out.truth.sigma2 = config.sigma2;
  out.truth.rho2 = config.rho2;
  return out;
}

}  // namespace coal
