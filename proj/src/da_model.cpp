#include "coal/da_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "coal/data_io.hpp"
#include "coal/error.hpp"
#include "coal/random.hpp"

namespace coal {

namespace {

GaussianMessage isotropic_prior(Eigen::Index d, double sigma2) {
  return {Eigen::VectorXd::Zero(d), Covariance::identity(d, true, sigma2)};
}

// Curvature with the regression noise folded in, so that X' a X is the
// data block of the negative Hessian.
Eigen::VectorXd scaled_curvature(const TaskDataset& t, const Eigen::VectorXd& w, double rho2) {
  Eigen::VectorXd a = laplace_curvature(t, w);
  if (t.kind == TaskKind::regression) a /= rho2;
  return a;
}

void check_problem(const std::vector<TaskDataset>& data) {
  require(data.size() >= 2, ErrorKind::invalid_argument, "at least two tasks are required");
  for (const auto& t : data) {
    t.validate();
    require(t.dim() == data.front().dim(), ErrorKind::dimension_mismatch, "tasks disagree on feature dimension");
    require(t.kind == data.front().kind, ErrorKind::invalid_argument, "tasks disagree on task kind");
  }
}

double iw_log_density(const DiffusionCovariance& lambda) {
  const double d = static_cast<double>(lambda.dim());
  const double nu = d + 1.0;
  return -0.5 * (nu + d + 1.0) * lambda.log_det() - 0.5 * lambda.inverse().dense().trace();
}

Covariance block_diagonal(const Covariance& a, const Covariance& b) {
  if (a.is_diagonal() && b.is_diagonal()) {
    Eigen::VectorXd d(a.dim() + b.dim());
    d << a.diag(), b.diag();
    return Covariance::diagonal(d);
  }
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(a.dim() + b.dim(), a.dim() + b.dim());
  m.topLeftCorner(a.dim(), a.dim()) = a.dense();
  m.bottomRightCorner(b.dim(), b.dim()) = b.dense();
  return Covariance::full(m);
}

GaussianMessage concat(const GaussianMessage& a, const GaussianMessage& b) {
  GaussianMessage out;
  out.mean.resize(a.dim() + b.dim());
  out.mean << a.mean, b.mean;
  out.variance = block_diagonal(a.variance, b.variance);
  return out;
}

std::vector<GaussianMessage> concat_all(const std::vector<GaussianMessage>& a, const std::vector<GaussianMessage>& b) {
  std::vector<GaussianMessage> out;
  for (std::size_t k = 0; k < a.size(); ++k) out.push_back(concat(a[k], b[k]));
  return out;
}

std::vector<Eigen::VectorXd> means_of(const std::vector<WeightPosterior>& post) {
  std::vector<Eigen::VectorXd> out;
  for (const auto& p : post) out.push_back(p.mean);
  return out;
}

std::vector<GaussianMessage> point_messages(const std::vector<Eigen::VectorXd>& w, bool diagonal) {
  std::vector<GaussianMessage> out;
  for (const auto& v : w) out.push_back({v, Covariance::zero(v.size(), diagonal)});
  return out;
}

// Nearest common ancestor by walking up from the deeper-in-time node.
int lca(const CoalescentTree& tree, int a, int b) {
  while (a != b) {
    if (tree.node(a).time >= tree.node(b).time) {
      a = *tree.node(a).parent;
    } else {
      b = *tree.node(b).parent;
    }
  }
  return a;
}

std::vector<int> category_counts(const std::vector<TaskDataset>& data, const std::vector<FeatureKind>& kinds) {
  const Eigen::Index d = data.front().dim();
  std::vector<int> cats(static_cast<std::size_t>(d), 0);
  for (Eigen::Index j = 0; j < d; ++j) {
    if (kinds[static_cast<std::size_t>(j)] != FeatureKind::discrete) continue;
    double mx = 0.0;
    for (const auto& t : data)
      for (Eigen::Index i = 0; i < t.size(); ++i) {
        double v = t.inputs(i, j);
        require(v >= 0.0 && v == std::floor(v), ErrorKind::invalid_argument,
                "discrete feature values must be non-negative integer codes");
        mx = std::max(mx, v);
      }
    cats[static_cast<std::size_t>(j)] = static_cast<int>(mx) + 1;
  }
  return cats;
}

std::vector<FeatureKind> resolve_kinds(const std::vector<FeatureKind>& kinds, Eigen::Index d) {
  if (kinds.empty()) return std::vector<FeatureKind>(static_cast<std::size_t>(d), FeatureKind::continuous);
  require(static_cast<Eigen::Index>(kinds.size()) == d, ErrorKind::dimension_mismatch,
          "one feature kind per input feature required");
  return kinds;
}

DiffusionCovariance initial_input_lambda(const std::vector<GaussianMessage>& xmsgs) {
  const auto k = static_cast<Eigen::Index>(xmsgs.size());
  Eigen::MatrixXd m(k, xmsgs.front().dim());
  for (Eigen::Index i = 0; i < k; ++i) m.row(i) = xmsgs[static_cast<std::size_t>(i)].mean.transpose();
  Eigen::RowVectorXd mu = m.colwise().mean();
  Eigen::VectorXd var = ((m.rowwise() - mu).cwiseAbs2().colwise().sum() / static_cast<double>(k)).transpose();
  return Covariance::diagonal(var.array() + 1e-6);
}

GaussianMessage input_root_prior(const std::vector<GaussianMessage>& xmsgs, const DiffusionCovariance& lambda0) {
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(xmsgs.front().dim());
  for (const auto& m : xmsgs) mu += m.mean;
  mu /= static_cast<double>(xmsgs.size());
  return {mu, Covariance::diagonal(lambda0.diag().array() + 1.0)};
}

struct Snapshot {
  CoalescentTree tree;
  DiffusionCovariance lambda;
  std::optional<DiffusionCovariance> input_lambda;
  std::vector<WeightPosterior> posteriors;
};

}  // namespace

std::vector<Eigen::VectorXd> DaParams::weights() const { return means_of(leaf_posteriors); }

Eigen::MatrixXd discrete_transition(const Eigen::VectorXd& q, double rate, double delta) {
  require(q.size() >= 1 && (q.array() >= 0.0).all() && std::abs(q.sum() - 1.0) < 1e-9,
          ErrorKind::invalid_argument, "equilibrium distribution must be a probability vector");
  require(rate >= 0.0 && delta >= 0.0, ErrorKind::invalid_argument, "rate and duration must be non-negative");
  const double stay = std::exp(-delta * rate);
  const Eigen::Index c = q.size();
  return stay * Eigen::MatrixXd::Identity(c, c) + (1.0 - stay) * Eigen::VectorXd::Ones(c) * q.transpose();
}

std::vector<GaussianMessage> input_summary_messages(const std::vector<TaskDataset>& data,
                                                    const std::vector<FeatureKind>& kinds_in) {
  require(!data.empty(), ErrorKind::invalid_argument, "no tasks given");
  const Eigen::Index d = data.front().dim();
  const auto kinds = resolve_kinds(kinds_in, d);
  const auto cats = category_counts(data, kinds);
  Eigen::Index len = 0;
  for (Eigen::Index j = 0; j < d; ++j)
    len += kinds[static_cast<std::size_t>(j)] == FeatureKind::discrete ? cats[static_cast<std::size_t>(j)] : 1;

  std::vector<GaussianMessage> out;
  for (const auto& t : data) {
    require(t.dim() == d, ErrorKind::dimension_mismatch, "tasks disagree on feature dimension");
    require(t.size() > 0, ErrorKind::empty_task, "task '" + t.name + "' has no examples");
    const double n = static_cast<double>(t.size());
    Eigen::VectorXd mean(len), var(len);
    Eigen::Index pos = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      auto col = t.inputs.col(j);
      if (kinds[static_cast<std::size_t>(j)] == FeatureKind::continuous) {
        double m = col.mean();
        mean[pos] = m;
        var[pos] = (col.array() - m).square().sum() / n / n;
        ++pos;
        continue;
      }
      const int c = cats[static_cast<std::size_t>(j)];
      Eigen::VectorXd freq = Eigen::VectorXd::Zero(c);
      for (Eigen::Index i = 0; i < t.size(); ++i) freq[static_cast<Eigen::Index>(col[i])] += 1.0;
      freq /= n;
      mean.segment(pos, c) = freq;
      var.segment(pos, c) = (freq.array() * (1.0 - freq.array())) / n;
      pos += c;
    }
    out.push_back({mean, Covariance::diagonal(var.cwiseMax(1e-8))});
  }
  return out;
}

std::vector<GaussianMessage> weight_messages(const std::vector<WeightPosterior>& posteriors, bool diagonal) {
  std::vector<GaussianMessage> out;
  for (const auto& p : posteriors) {
    Covariance v = diagonal ? Covariance::diagonal(p.covariance.diagonal()) : Covariance::full(symmetrize(p.covariance));
    out.push_back({p.mean, std::move(v)});
  }
  return out;
}

std::vector<GaussianMessage> leaf_messages_with_inputs(const std::vector<TaskDataset>& data,
                                                       const std::vector<WeightPosterior>& posteriors,
                                                       const std::vector<FeatureKind>& kinds, Variant variant) {
  require(models_inputs(variant), ErrorKind::invalid_argument,
          "variant '" + std::string(to_string(variant)) + "' does not model inputs");
  require(data.size() == posteriors.size(), ErrorKind::dimension_mismatch, "one posterior per task required");
  auto xmsgs = input_summary_messages(data, kinds);
  if (variant == Variant::data) return xmsgs;
  return concat_all(weight_messages(posteriors, diagonal_lambda(variant)), xmsgs);
}

DiffusionCovariance mstep_lambda(const CoalescentTree& tree, const DiffusionCovariance& current_lambda) {
  const Eigen::Index d = current_lambda.dim();
  const bool diag = current_lambda.is_diagonal();
  Eigen::MatrixXd sigma = Eigen::MatrixXd::Identity(d, d);
  Eigen::VectorXd sigma_diag = Eigen::VectorXd::Ones(d);
  for (const auto& n : tree.nodes()) {
    require(n.message.has_value(), ErrorKind::invalid_argument, "mstep_lambda needs BP messages at every node");
    require(n.message->dim() == d, ErrorKind::dimension_mismatch, "message dimension differs from lambda");
  }
  for (const auto& n : tree.nodes()) {
    if (n.is_leaf()) continue;
    // Multifurcations are folded pairwise, as in the upward pass.
    GaussianMessage acc = inflate(*tree.node(n.children[0]).message, current_lambda, tree.branch_length(n.children[0]));
    for (std::size_t c = 1; c < n.children.size(); ++c) {
      const int id = n.children[c];
      GaussianMessage other = inflate(*tree.node(id).message, current_lambda, tree.branch_length(id));
      Eigen::VectorXd diff = acc.mean - other.mean;
      Covariance m = acc.variance + other.variance;
      if (diag) {
        Eigen::VectorXd mv = m.diagonal_entries();
        for (Eigen::Index j = 0; j < d; ++j)
          sigma_diag[j] += mv[j] > 0.0 ? diff[j] * diff[j] / mv[j] : 0.0;
      } else {
        Eigen::VectorXd z = psd_inv_sqrt(m.dense()) * diff;
        sigma += z * z.transpose();
      }
      acc = combine(acc, other);
    }
  }
  const double denom = 2.0 * static_cast<double>(d) + static_cast<double>(tree.num_leaves()) + 2.0;
  if (diag) {
    require(sigma_diag.allFinite() && (sigma_diag.array() > 0.0).all(), ErrorKind::not_psd,
            "lambda accumulation is not positive");
    return Covariance::diagonal(sigma_diag / denom);
  }
  sigma = symmetrize(sigma);
  require(sigma.allFinite() && min_eigenvalue(sigma) > 0.0, ErrorKind::not_psd, "lambda accumulation is not PSD");
  return Covariance::full(sigma / denom);
}

Eigen::MatrixXd leaf_prior_covariance(const CoalescentTree& tree, const DiffusionCovariance& lambda, double sigma2) {
  const int k = tree.num_leaves();
  const Eigen::Index d = lambda.dim();
  const Eigen::MatrixXd lam = lambda.dense();
  const double t_root = tree.node(tree.root()).time;
  Eigen::MatrixXd out(k * d, k * d);
  for (int a = 0; a < k; ++a)
    for (int b = a; b < k; ++b) {
      int anc = lca(tree, tree.leaves()[static_cast<std::size_t>(a)], tree.leaves()[static_cast<std::size_t>(b)]);
      Eigen::MatrixXd block = (tree.node(anc).time - t_root) * lam;
      block.diagonal().array() += sigma2;
      out.block(a * d, b * d, d, d) = block;
      out.block(b * d, a * d, d, d) = block.transpose();
    }
  return out;
}

std::vector<WeightPosterior> da_estep(const std::vector<TaskDataset>& data, const CoalescentTree& tree,
                                      const DiffusionCovariance& lambda, double sigma2, double rho2,
                                      const std::vector<Eigen::VectorXd>* warm_start) {
  const int k = static_cast<int>(data.size());
  require(k == tree.num_leaves(), ErrorKind::dimension_mismatch, "one tree leaf per task required");
  const Eigen::Index d = lambda.dim();
  for (const auto& t : data)
    require(t.dim() == d, ErrorKind::dimension_mismatch, "task dimension differs from lambda");
  const Eigen::Index n = k * d;
  const Eigen::MatrixXd precision = spd_inverse(leaf_prior_covariance(tree, lambda, sigma2));

  auto task = [&](int i) -> const TaskDataset& { return data[static_cast<std::size_t>(i)]; };
  Eigen::VectorXd w = Eigen::VectorXd::Zero(n);
  if (warm_start) {
    require(static_cast<int>(warm_start->size()) == k, ErrorKind::dimension_mismatch, "warm start size mismatch");
    for (int i = 0; i < k; ++i) w.segment(i * d, d) = (*warm_start)[static_cast<std::size_t>(i)];
  }

  auto objective = [&](const Eigen::VectorXd& v) {
    double f = -0.5 * v.dot(precision * v);
    for (int i = 0; i < k; ++i) f += log_likelihood(task(i), v.segment(i * d, d), rho2);
    return f;
  };
  auto hessian = [&](const Eigen::VectorXd& v) {
    Eigen::MatrixXd h = precision;
    for (int i = 0; i < k; ++i) {
      const auto& t = task(i);
      if (t.size() == 0) continue;
      Eigen::VectorXd a = scaled_curvature(t, v.segment(i * d, d), rho2);
      h.block(i * d, i * d, d, d) += t.inputs.transpose() * a.asDiagonal() * t.inputs;
    }
    return symmetrize(h);
  };
  auto gradient = [&](const Eigen::VectorXd& v) {
    Eigen::VectorXd g = -precision * v;
    for (int i = 0; i < k; ++i) g.segment(i * d, d) += log_likelihood_gradient(task(i), v.segment(i * d, d), rho2);
    return g;
  };

  if (data.front().kind == TaskKind::regression) {
    // The objective is quadratic: one Newton step from anywhere is exact.
    Eigen::LDLT<Eigen::MatrixXd> ldlt(hessian(w));
    require(ldlt.info() == Eigen::Success, ErrorKind::singular_matrix, "E-step system is singular");
    w += ldlt.solve(gradient(w));
  } else {
    double f = objective(w);
    for (int it = 0; it < 100; ++it) {
      Eigen::VectorXd g = gradient(w);
      Eigen::LDLT<Eigen::MatrixXd> ldlt(hessian(w));
      require(ldlt.info() == Eigen::Success, ErrorKind::singular_matrix, "E-step Hessian is singular");
      Eigen::VectorXd step = ldlt.solve(g);
      const double decrement = g.dot(step);
      if (!(decrement > 1e-20)) break;
      double alpha = 1.0;
      Eigen::VectorXd w_new = w + step;
      double f_new = objective(w_new);
      while (!(f_new >= f + 1e-4 * alpha * decrement) && alpha > 1e-12) {
        alpha *= 0.5;
        w_new = w + alpha * step;
        f_new = objective(w_new);
      }
      if (!(f_new >= f)) break;
      w = std::move(w_new);
      f = f_new;
      if (decrement < 1e-18 * (1.0 + std::abs(f))) break;
    }
    require(w.allFinite(), ErrorKind::optimization_failure, "E-step diverged");
  }

  std::vector<WeightPosterior> out;
  for (int i = 0; i < k; ++i) {
    const auto& t = task(i);
    Eigen::VectorXd wi = w.segment(i * d, d);
    Eigen::MatrixXd cond_var = spd_inverse(symmetrize(precision.block(i * d, i * d, d, d)));
    WeightPosterior p;
    p.mean = wi;
    p.covariance = symmetrize(laplace_covariance(t, scaled_curvature(t, wi, rho2), cond_var));
    out.push_back(std::move(p));
  }
  return out;
}

double da_objective(const std::vector<TaskDataset>& data, const std::vector<Eigen::VectorXd>& weights,
                    const CoalescentTree& tree, const DiffusionCovariance& lambda, double sigma2, double rho2) {
  require(data.size() == weights.size(), ErrorKind::dimension_mismatch, "one weight vector per task required");
  double j = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) j += log_likelihood(data[i], weights[i], rho2);
  j += tree_data_log_likelihood(tree, point_messages(weights, lambda.is_diagonal()), lambda,
                                isotropic_prior(lambda.dim(), sigma2));
  j += coalescent_log_prior(tree);
  j += iw_log_density(lambda);
  return j;
}

double heldout_log_likelihood(const std::vector<TaskDataset>& tasks, const std::vector<Eigen::VectorXd>& weights,
                              double rho2) {
  require(tasks.size() == weights.size(), ErrorKind::dimension_mismatch, "one weight vector per task required");
  double ll = 0.0;
  for (std::size_t i = 0; i < tasks.size(); ++i) ll += log_likelihood(tasks[i], weights[i], rho2);
  return ll;
}

DaParams em_fit_da(const std::vector<TaskDataset>& data, const ModelConfig& config) {
  validate(config);
  require(config.family == ModelFamily::da, ErrorKind::invalid_argument, "config is not a DA model");
  check_problem(data);
  const int k = static_cast<int>(data.size());
  const Eigen::Index d = data.front().dim();
  const bool diag = diagonal_lambda(config.variant);
  const bool with_inputs = models_inputs(config.variant);
  const double sigma2 = config.sigma2, rho2 = config.rho2;
  if (config.fixed_tree) {
    require(config.fixed_tree->num_leaves() == k, ErrorKind::dimension_mismatch, "fixed tree must have one leaf per task");
  }
  if (config.fixed_lambda)
    require(config.fixed_lambda->dim() == d, ErrorKind::dimension_mismatch, "fixed lambda dimension differs from data");

  std::vector<TaskDataset> train = data, holdout;
  if (config.holdout > 0.0) {
    auto split = split_holdout(data, config.holdout, derive_seed(config.seed, 0x401d));
    train = std::move(split.train);
    holdout = std::move(split.holdout);
  }

  std::vector<WeightPosterior> post;
  const GaussianMessage prior0 = isotropic_prior(d, sigma2);
  const Eigen::MatrixXd prior0_var = sigma2 * Eigen::MatrixXd::Identity(d, d);
  for (const auto& t : train) {
    WeightPosterior p;
    p.mean = map_weights(t, prior0, rho2);
    p.covariance = symmetrize(laplace_covariance(t, scaled_curvature(t, p.mean, rho2), prior0_var));
    post.push_back(std::move(p));
  }

  DiffusionCovariance lambda = config.fixed_lambda ? *config.fixed_lambda : Covariance::identity(d, diag, sigma2);
  if (diag && !lambda.is_diagonal()) lambda = lambda.diagonal_projection();

  std::vector<GaussianMessage> xmsgs;
  std::optional<DiffusionCovariance> xlambda;
  std::optional<GaussianMessage> xroot;
  std::vector<FeatureKind> kinds;
  if (with_inputs) {
    kinds = resolve_kinds(config.feature_kinds, d);
    xmsgs = input_summary_messages(train, kinds);
    xlambda = initial_input_lambda(xmsgs);
    xroot = input_root_prior(xmsgs, *xlambda);
  }

  auto messages_for_tree = [&](const std::vector<WeightPosterior>& p, const DiffusionCovariance& lam,
                               const std::optional<DiffusionCovariance>& xlam)
      -> std::pair<std::vector<GaussianMessage>, DiffusionCovariance> {
    if (config.variant == Variant::data) return {xmsgs, *xlam};
    if (with_inputs) return {concat_all(weight_messages(p, diag), xmsgs), block_diagonal(lam, *xlam)};
    return {weight_messages(p, diag), lam};
  };
  auto objective = [&](const std::vector<WeightPosterior>& p, const CoalescentTree& tr, const DiffusionCovariance& lam,
                       const std::optional<DiffusionCovariance>& xlam) {
    double j = da_objective(train, means_of(p), tr, lam, sigma2, rho2);
    if (with_inputs) j += tree_data_log_likelihood(tr, xmsgs, *xlam, *xroot);
    return j;
  };
  auto build_tree = [&](const std::vector<WeightPosterior>& p, const DiffusionCovariance& lam,
                        const std::optional<DiffusionCovariance>& xlam) {
    auto [msgs, joint] = messages_for_tree(p, lam, xlam);
    return greedy_rate1_build(msgs, joint);
  };

  CoalescentTree tree = config.fixed_tree ? *config.fixed_tree : build_tree(post, lambda, xlambda);

  std::vector<Snapshot> snaps;
  std::vector<double> objective_trace;
  auto record = [&]() {
    snaps.push_back({tree, lambda, xlambda, post});
    objective_trace.push_back(objective(post, tree, lambda, xlambda));
  };
  record();

  if (config.variant == Variant::data) {
    if (config.em_iters > 0) {
      if (!config.fixed_lambda)
        lambda = mstep_lambda(bp_upward(tree, weight_messages(post, diag), lambda), lambda);
      auto w0 = means_of(post);
      post = da_estep(train, tree, lambda, sigma2, rho2, &w0);
      record();
    }
  } else {
    for (int it = 1; it <= config.em_iters; ++it) {
      // M-step: lambda first, then the tree under the new lambda. The
      // candidate is kept only if the objective does not drop.
      if (!config.fixed_lambda || !config.fixed_tree) {
        const double current = objective(post, tree, lambda, xlambda);
        DiffusionCovariance lam_new = lambda;
        std::optional<DiffusionCovariance> xlam_new = xlambda;
        if (!config.fixed_lambda) {
          lam_new = mstep_lambda(bp_upward(tree, weight_messages(post, diag), lambda), lambda);
          if (with_inputs) xlam_new = mstep_lambda(bp_upward(tree, xmsgs, *xlambda), *xlambda);
        }
        std::vector<CoalescentTree> candidates;
        if (!config.fixed_tree) candidates.push_back(build_tree(post, lam_new, xlam_new));
        candidates.push_back(tree);
        const double slack = 1e-10 * (1.0 + std::abs(current));
        for (auto& cand : candidates) {
          if (objective(post, cand, lam_new, xlam_new) >= current - slack) {
            tree = std::move(cand);
            lambda = lam_new;
            xlambda = xlam_new;
            break;
          }
        }
      }
      auto w_prev = means_of(post);
      post = da_estep(train, tree, lambda, sigma2, rho2, &w_prev);
      record();
    }
  }

  std::size_t best = snaps.size() - 1;
  std::vector<double> heldout_trace;
  if (!holdout.empty()) {
    double best_val = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < snaps.size(); ++i) {
      double h = heldout_log_likelihood(holdout, means_of(snaps[i].posteriors), rho2);
      heldout_trace.push_back(h);
      if (h > best_val) {
        best_val = h;
        best = i;
      }
    }
  }

  const Snapshot& s = snaps[best];
  DaParams out;
  out.variant = config.variant;
  out.lambda = s.lambda;
  out.input_lambda = s.input_lambda;
  out.leaf_posteriors = s.posteriors;
  out.sigma2 = sigma2;
  out.rho2 = rho2;
  out.iteration = static_cast<int>(best);
  out.heldout_trace = std::move(heldout_trace);
  out.objective_trace = std::move(objective_trace);
  const auto wmsgs = weight_messages(s.posteriors, diag);
  out.tree = bp_upward(s.tree, wmsgs, s.lambda);
  const auto smooth = bp_smooth(s.tree, wmsgs, s.lambda, prior0);
  for (int id = 0; id < out.tree.num_nodes(); ++id) out.tree.node(id).state = smooth[static_cast<std::size_t>(id)].mean;
  std::vector<std::string> names;
  for (const auto& t : data) names.push_back(t.name);
  if (std::all_of(names.begin(), names.end(), [](const std::string& n) { return !n.empty(); }))
    out.tree.set_leaf_names(names);
  if (with_inputs) {
    InputModel im;
    im.kinds = kinds;
    im.categories = category_counts(train, kinds);
    for (const auto& m : xmsgs) im.leaf_summaries.push_back(m.mean);
    out.input_model = std::move(im);
  }
  return out;
}

ModelConfig tune_da(const std::vector<TaskDataset>& data, ModelConfig config) {
  if (config.holdout <= 0.0) config.holdout = 0.1;
  const std::vector<double> grid{0.01, 0.1, 1.0, 10.0};
  const bool regression = !data.empty() && data.front().kind == TaskKind::regression;
  const std::vector<double> rho_grid = regression ? grid : std::vector<double>{config.rho2};
  ModelConfig best = config;
  double best_val = -std::numeric_limits<double>::infinity();
  for (double s2 : grid)
    for (double r2 : rho_grid) {
      ModelConfig c = config;
      c.sigma2 = s2;
      c.rho2 = r2;
      DaParams p = em_fit_da(data, c);
      double h = p.heldout_trace.at(static_cast<std::size_t>(p.iteration));
      if (h > best_val) {
        best_val = h;
        best = c;
      }
    }
  return best;
}

DaSample sample_da(const ModelConfig& config, int num_tasks, Eigen::Index dim, Eigen::Index n_per_task,
                   std::uint64_t seed, const DaSampleOptions& opts) {
  validate(config);
  require(num_tasks >= 2, ErrorKind::invalid_argument, "at least two tasks are required");
  require(dim >= 1 && n_per_task >= 0 && opts.n_test >= 0, ErrorKind::invalid_argument, "invalid sample sizes");
  const bool diag = diagonal_lambda(config.variant);

  DiffusionCovariance lambda;
  if (opts.lambda) {
    require(opts.lambda->dim() == dim, ErrorKind::dimension_mismatch, "lambda dimension differs from dim");
    lambda = *opts.lambda;
  } else {
    Rng rng(derive_seed(seed, 1));
    lambda = Covariance::full(sample_inverse_wishart(rng, config.sigma2 * Eigen::MatrixXd::Identity(dim, dim),
                                                     static_cast<double>(dim) + 1.0));
  }
  if (diag && !lambda.is_diagonal()) lambda = lambda.diagonal_projection();

  Eigen::VectorXd root;
  if (opts.root_mean) {
    require(opts.root_mean->size() == dim, ErrorKind::dimension_mismatch, "root mean dimension differs from dim");
    root = *opts.root_mean;
  } else {
    Rng rng(derive_seed(seed, 2));
    root = sample_gaussian(rng, Eigen::VectorXd::Zero(dim), lambda);
  }

  CoalescentTree tree = opts.tree ? *opts.tree : sample_coalescent(num_tasks, derive_seed(seed, 3));
  require(tree.num_leaves() == num_tasks, ErrorKind::dimension_mismatch, "tree must have one leaf per task");
  tree = diffuse_states(std::move(tree), root, lambda, derive_seed(seed, 4));

  std::vector<Eigen::VectorXd> w;
  for (int k = 0; k < num_tasks; ++k) w.push_back(*tree.node(tree.leaves()[static_cast<std::size_t>(k)]).state);

  // Optional input model: per-leaf continuous means and discrete categories.
  std::optional<InputModel> im;
  std::vector<std::vector<int>> leaf_category;  // [task][feature]
  std::vector<Eigen::VectorXd> leaf_mean;
  if (opts.model_inputs) {
    InputModel m;
    m.kinds = resolve_kinds(config.feature_kinds, dim);
    m.rates = Eigen::VectorXd::Ones(dim);
    Rng rng(derive_seed(seed, 5));
    std::vector<Eigen::VectorXd> node_mean(static_cast<std::size_t>(tree.num_nodes()));
    std::vector<std::vector<int>> node_cat(static_cast<std::size_t>(tree.num_nodes()),
                                           std::vector<int>(static_cast<std::size_t>(dim), 0));
    for (Eigen::Index j = 0; j < dim; ++j) {
      bool discrete = m.kinds[static_cast<std::size_t>(j)] == FeatureKind::discrete;
      m.categories.push_back(discrete ? 3 : 0);
      m.equilibrium.push_back(discrete ? Eigen::VectorXd::Constant(3, 1.0 / 3.0) : Eigen::VectorXd());
    }
    std::normal_distribution<double> normal;
    std::uniform_real_distribution<double> unif;
    auto draw_category = [&](const Eigen::VectorXd& p) {
      double u = unif(rng), acc = 0.0;
      for (Eigen::Index c = 0; c < p.size(); ++c) {
        acc += p[c];
        if (u < acc) return static_cast<int>(c);
      }
      return static_cast<int>(p.size() - 1);
    };
    for (int id : tree.preorder()) {
      const auto& node = tree.node(id);
      auto uid = static_cast<std::size_t>(id);
      node_mean[uid] = Eigen::VectorXd::Zero(dim);
      for (Eigen::Index j = 0; j < dim; ++j) {
        auto uj = static_cast<std::size_t>(j);
        if (!node.parent) {
          if (m.categories[uj] > 0) node_cat[uid][uj] = draw_category(m.equilibrium[uj]);
          continue;
        }
        auto up = static_cast<std::size_t>(*node.parent);
        double b = tree.branch_length(id);
        if (m.categories[uj] == 0) {
          node_mean[uid][j] = node_mean[up][j] + std::sqrt(b * m.rates[j]) * normal(rng);
        } else {
          Eigen::MatrixXd tr = discrete_transition(m.equilibrium[uj], m.rates[j], b);
          node_cat[uid][uj] = draw_category(tr.row(node_cat[up][uj]).transpose());
        }
      }
    }
    for (int k = 0; k < num_tasks; ++k) {
      auto leaf = static_cast<std::size_t>(tree.leaves()[static_cast<std::size_t>(k)]);
      leaf_mean.push_back(node_mean[leaf]);
      leaf_category.push_back(node_cat[leaf]);
      Eigen::VectorXd summary(0);
      for (Eigen::Index j = 0; j < dim; ++j) {
        auto uj = static_cast<std::size_t>(j);
        Eigen::VectorXd part;
        if (m.categories[uj] == 0) {
          part = Eigen::VectorXd::Constant(1, node_mean[leaf][j]);
        } else {
          part = discrete_transition(m.equilibrium[uj], m.rates[j], 1.0).row(node_cat[leaf][uj]).transpose();
        }
        Eigen::VectorXd next(summary.size() + part.size());
        next << summary, part;
        summary = std::move(next);
      }
      m.leaf_summaries.push_back(summary);
    }
    im = std::move(m);
  }

  auto draw_task = [&](int k, Eigen::Index n, std::uint64_t s) {
    Rng rng(s);
    TaskDataset t;
    t.name = "t" + std::to_string(k);
    t.task_id = k;
    t.kind = opts.kind;
    t.inputs = standard_normal(rng, n, dim);
    if (im) {
      std::uniform_real_distribution<double> unif;
      for (Eigen::Index j = 0; j < dim; ++j) {
        auto uj = static_cast<std::size_t>(j);
        if (im->categories[uj] == 0) {
          t.inputs.col(j).array() += leaf_mean[static_cast<std::size_t>(k)][j];
          continue;
        }
        Eigen::VectorXd p = discrete_transition(im->equilibrium[uj], im->rates[j], 1.0)
                                .row(leaf_category[static_cast<std::size_t>(k)][uj])
                                .transpose();
        for (Eigen::Index i = 0; i < n; ++i) {
          double u = unif(rng), acc = 0.0;
          int c = static_cast<int>(p.size()) - 1;
          for (Eigen::Index q = 0; q < p.size(); ++q) {
            acc += p[q];
            if (u < acc) {
              c = static_cast<int>(q);
              break;
            }
          }
          t.inputs(i, j) = c;
        }
      }
    }
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

  DaSample out;
  for (int k = 0; k < num_tasks; ++k) {
    out.train.push_back(draw_task(k, n_per_task, derive_seed(seed, 100 + static_cast<std::uint64_t>(k))));
    if (opts.n_test > 0)
      out.test.push_back(draw_task(k, opts.n_test, derive_seed(seed, 100000 + static_cast<std::uint64_t>(k))));
  }
  out.truth.variant = config.variant;
  out.truth.lambda = lambda;
  out.truth.tree = std::move(tree);
  for (const auto& wk : w) out.truth.leaf_posteriors.push_back({wk, Eigen::MatrixXd::Zero(dim, dim)});
  out.truth.sigma2 = config.sigma2;
  out.truth.rho2 = config.rho2;
  out.truth.input_model = std::move(im);
  return out;
}

}  // namespace coal
