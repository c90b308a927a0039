#include "coal/tree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "coal/error.hpp"
#include "coal/random.hpp"

namespace coal {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

std::string default_leaf_name(int k) { return "t" + std::to_string(k); }

}  // namespace

CoalescentTree::CoalescentTree(std::vector<TreeNode> nodes, int root_id, std::vector<int> leaf_ids)
    : nodes_(std::move(nodes)), root_(root_id), leaves_(std::move(leaf_ids)) {
  index();
}

void CoalescentTree::index() {
  const int n = num_nodes();
  require(root_ >= 0 && root_ < n, ErrorKind::invalid_argument, "tree root id out of range");
  for (int i = 0; i < n; ++i)
    require(nodes_[static_cast<std::size_t>(i)].id == i, ErrorKind::invalid_argument,
            "tree node ids must equal their positions");
  task_of_.assign(static_cast<std::size_t>(n), -1);
  for (std::size_t k = 0; k < leaves_.size(); ++k) {
    int id = leaves_[k];
    require(id >= 0 && id < n, ErrorKind::invalid_argument, "leaf id out of range");
    require(nodes_[static_cast<std::size_t>(id)].is_leaf(), ErrorKind::invalid_argument,
            "leaf id refers to an internal node");
    require(task_of_[static_cast<std::size_t>(id)] < 0, ErrorKind::invalid_argument, "duplicate leaf id");
    task_of_[static_cast<std::size_t>(id)] = static_cast<int>(k);
  }
  for (const auto& node : nodes_)
    if (node.is_leaf())
      require(task_of_[static_cast<std::size_t>(node.id)] >= 0, ErrorKind::invalid_argument,
              "childless node missing from the leaf list");
}

CoalescentTree CoalescentTree::star(int num_leaves, double depth) {
  require(num_leaves >= 1, ErrorKind::invalid_argument, "star tree needs at least one leaf");
  require(depth > 0.0, ErrorKind::invalid_argument, "star tree depth must be positive");
  std::vector<TreeNode> nodes(static_cast<std::size_t>(num_leaves) + 1);
  std::vector<int> leaves;
  const int root = num_leaves;
  for (int k = 0; k < num_leaves; ++k) {
    auto& n = nodes[static_cast<std::size_t>(k)];
    n.id = k;
    n.parent = root;
    n.name = default_leaf_name(k);
    leaves.push_back(k);
  }
  auto& r = nodes[static_cast<std::size_t>(root)];
  r.id = root;
  r.time = -depth;
  r.children = leaves;
  return CoalescentTree(std::move(nodes), root, std::move(leaves));
}

double CoalescentTree::branch_length(int id) const {
  const auto& n = node(id);
  if (!n.parent) return 0.0;
  return n.time - node(*n.parent).time;
}

std::vector<int> CoalescentTree::preorder() const {
  std::vector<int> order;
  order.reserve(nodes_.size());
  std::vector<int> stack{root_};
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    order.push_back(id);
    const auto& ch = node(id).children;
    for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back(*it);
  }
  return order;
}

std::vector<int> CoalescentTree::postorder() const {
  std::vector<int> order = preorder();
  // Reversed preorder visits every child before its parent.
  std::reverse(order.begin(), order.end());
  return order;
}

std::vector<double> CoalescentTree::event_durations() const {
  std::vector<double> times;
  for (const auto& n : nodes_)
    if (!n.is_leaf()) times.push_back(n.time);
  std::sort(times.begin(), times.end(), std::greater<>());
  std::vector<double> durations;
  double prev = 0.0;
  for (double t : times) {
    durations.push_back(prev - t);
    prev = t;
  }
  return durations;
}

std::vector<int> CoalescentTree::leaf_set(int id) const {
  std::vector<int> out;
  std::vector<int> stack{id};
  while (!stack.empty()) {
    int cur = stack.back();
    stack.pop_back();
    const auto& n = node(cur);
    if (n.is_leaf()) out.push_back(task_of(cur));
    for (int c : n.children) stack.push_back(c);
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool CoalescentTree::has_clade(std::vector<int> task_indices) const {
  std::sort(task_indices.begin(), task_indices.end());
  for (const auto& n : nodes_)
    if (leaf_set(n.id) == task_indices) return true;
  return false;
}

bool CoalescentTree::is_binary() const {
  return std::all_of(nodes_.begin(), nodes_.end(),
                     [](const TreeNode& n) { return n.is_leaf() || n.children.size() == 2; });
}

void CoalescentTree::validate() const {
  const int k = num_leaves();
  require(k >= 1, ErrorKind::invalid_argument, "tree has no leaves");
  require(num_nodes() == 2 * k - 1, ErrorKind::invalid_argument, "tree must have K-1 internal nodes");
  require(!node(root_).parent.has_value(), ErrorKind::invalid_argument, "root has a parent");
  for (const auto& n : nodes_) {
    if (n.is_leaf()) {
      require(n.time == 0.0, ErrorKind::invalid_argument, "leaf time must be 0");
    } else {
      require(n.children.size() == 2, ErrorKind::invalid_argument, "internal node is not binary");
    }
    if (n.id != root_)
      require(n.parent.has_value(), ErrorKind::invalid_argument, "non-root node without parent");
    for (int c : n.children) {
      require(node(c).parent == n.id, ErrorKind::invalid_argument, "parent/child links disagree");
      require(n.time < node(c).time, ErrorKind::invalid_argument, "parent must be strictly older than child");
    }
  }
  require(static_cast<int>(preorder().size()) == num_nodes(), ErrorKind::invalid_argument,
          "tree is not connected");
}

void CoalescentTree::set_leaf_names(const std::vector<std::string>& names) {
  require(names.size() == leaves_.size(), ErrorKind::dimension_mismatch, "one name per leaf required");
  for (std::size_t k = 0; k < names.size(); ++k) node(leaves_[k]).name = names[k];
}

std::vector<std::string> CoalescentTree::leaf_names() const {
  std::vector<std::string> out;
  for (int id : leaves_) out.push_back(node(id).name);
  return out;
}

CoalescentTree sample_coalescent(int num_leaves, std::uint64_t seed) {
  require(num_leaves >= 2, ErrorKind::invalid_argument, "coalescent needs at least 2 leaves");
  Rng rng(seed);
  std::vector<TreeNode> nodes;
  std::vector<int> leaves;
  for (int k = 0; k < num_leaves; ++k) {
    TreeNode n;
    n.id = k;
    n.name = default_leaf_name(k);
    nodes.push_back(n);
    leaves.push_back(k);
  }
  std::vector<int> lineages = leaves;
  double t = 0.0;
  while (lineages.size() > 1) {
    const double n = static_cast<double>(lineages.size());
    std::exponential_distribution<double> wait(n * (n - 1.0) / 2.0);
    t -= wait(rng);
    std::uniform_int_distribution<std::size_t> pick(0, lineages.size() - 1);
    std::size_t i = pick(rng);
    std::size_t j = pick(rng);
    while (j == i) j = pick(rng);
    TreeNode parent;
    parent.id = static_cast<int>(nodes.size());
    parent.time = t;
    parent.children = {lineages[i], lineages[j]};
    nodes[static_cast<std::size_t>(lineages[i])].parent = parent.id;
    nodes[static_cast<std::size_t>(lineages[j])].parent = parent.id;
    if (i < j) std::swap(i, j);
    lineages.erase(lineages.begin() + static_cast<std::ptrdiff_t>(i));
    lineages.erase(lineages.begin() + static_cast<std::ptrdiff_t>(j));
    lineages.push_back(parent.id);
    nodes.push_back(std::move(parent));
  }
  int root = lineages.front();
  return CoalescentTree(std::move(nodes), root, std::move(leaves));
}

CoalescentTree diffuse_states(CoalescentTree tree, const Eigen::VectorXd& root_state,
                              const DiffusionCovariance& lambda, std::uint64_t seed) {
  require(root_state.size() == lambda.dim(), ErrorKind::dimension_mismatch,
          "root state and diffusion covariance dimensions differ");
  require(lambda.is_psd(), ErrorKind::not_psd, "diffusion covariance must be PSD");
  Rng rng(seed);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(root_state.size());
  for (int id : tree.preorder()) {
    auto& n = tree.node(id);
    if (!n.parent) {
      n.state = root_state;
      continue;
    }
    const Eigen::VectorXd& ps = *tree.node(*n.parent).state;
    n.state = ps + sample_gaussian(rng, zero, lambda.scaled(tree.branch_length(id)));
  }
  return tree;
}

GaussianMessage combine(const GaussianMessage& a, const GaussianMessage& b) {
  require(a.dim() == b.dim() && a.variance.dim() == a.dim() && b.variance.dim() == b.dim(),
          ErrorKind::dimension_mismatch, "message dimensions differ");
  if (a.variance.is_diagonal() && b.variance.is_diagonal()) {
    const Eigen::VectorXd& va = a.variance.diag();
    const Eigen::VectorXd& vb = b.variance.diag();
    Eigen::VectorXd s = va + vb;
    require((s.array() > 0.0).all(), ErrorKind::degenerate_message,
            "both messages have zero variance in some coordinate");
    Eigen::VectorXd gain = va.cwiseQuotient(s);
    GaussianMessage out;
    out.mean = a.mean + gain.cwiseProduct(b.mean - a.mean);
    out.variance = Covariance::diagonal(gain.cwiseProduct(vb));
    return out;
  }
  Eigen::MatrixXd va = a.variance.dense();
  Eigen::MatrixXd vb = b.variance.dense();
  Eigen::LLT<Eigen::MatrixXd> llt(symmetrize(va + vb));
  require(llt.info() == Eigen::Success, ErrorKind::degenerate_message, "combined message variance is singular");
  // gain = va (va+vb)^{-1}
  Eigen::MatrixXd gain = llt.solve(va).transpose();
  GaussianMessage out;
  out.mean = a.mean + gain * (b.mean - a.mean);
  out.variance = Covariance::full(va - gain * va);
  return out;
}

GaussianMessage inflate(const GaussianMessage& m, const DiffusionCovariance& lambda, double dt) {
  if (dt == 0.0) return m;
  return GaussianMessage{m.mean, m.variance + lambda.scaled(dt)};
}

namespace {

// Upward messages indexed by node id; accumulates the pairwise
// normalizers into log_z when given.
std::vector<GaussianMessage> upward(const CoalescentTree& tree,
                                    const std::vector<GaussianMessage>& leaf_messages,
                                    const DiffusionCovariance& lambda, double* log_z) {
  require(static_cast<int>(leaf_messages.size()) == tree.num_leaves(), ErrorKind::dimension_mismatch,
          "one message per leaf required");
  const Eigen::Index d = lambda.dim();
  for (const auto& m : leaf_messages) {
    require(m.dim() == d && m.variance.dim() == d, ErrorKind::dimension_mismatch,
            "leaf message dimension differs from diffusion covariance");
    require(m.variance.is_psd(), ErrorKind::not_psd, "leaf message variance must be PSD");
  }
  std::vector<GaussianMessage> up(static_cast<std::size_t>(tree.num_nodes()));
  for (int id : tree.postorder()) {
    const auto& n = tree.node(id);
    if (n.is_leaf()) {
      up[static_cast<std::size_t>(id)] = leaf_messages[static_cast<std::size_t>(tree.task_of(id))];
      continue;
    }
    GaussianMessage acc;
    bool first = true;
    for (int c : n.children) {
      GaussianMessage m = inflate(up[static_cast<std::size_t>(c)], lambda, tree.branch_length(c));
      if (first) {
        acc = std::move(m);
        first = false;
        continue;
      }
      if (log_z) {
        Covariance s = acc.variance + m.variance;
        try {
          *log_z += gaussian_log_density(acc.mean - m.mean, s);
        } catch (const Error& e) {
          if (e.kind() == ErrorKind::singular_matrix)
            throw Error(ErrorKind::degenerate_message, "combined message variance is singular");
          throw;
        }
      }
      acc = combine(acc, m);
    }
    up[static_cast<std::size_t>(id)] = std::move(acc);
  }
  return up;
}

}  // namespace

CoalescentTree bp_upward(CoalescentTree tree, const std::vector<GaussianMessage>& leaf_messages,
                         const DiffusionCovariance& lambda) {
  require(lambda.is_psd(), ErrorKind::not_psd, "diffusion covariance must be PSD");
  auto up = upward(tree, leaf_messages, lambda, nullptr);
  for (int id = 0; id < tree.num_nodes(); ++id) tree.node(id).message = up[static_cast<std::size_t>(id)];
  return tree;
}

double tree_data_log_likelihood(const CoalescentTree& tree,
                                const std::vector<GaussianMessage>& leaf_messages,
                                const DiffusionCovariance& lambda,
                                const GaussianMessage& root_prior) {
  require(lambda.is_psd(), ErrorKind::not_psd, "diffusion covariance must be PSD");
  require(root_prior.variance.is_psd(), ErrorKind::not_psd, "root prior variance must be PSD");
  require(root_prior.dim() == lambda.dim(), ErrorKind::dimension_mismatch, "root prior dimension mismatch");
  double log_z = 0.0;
  auto up = upward(tree, leaf_messages, lambda, &log_z);
  const auto& r = up[static_cast<std::size_t>(tree.root())];
  Covariance s = r.variance + root_prior.variance;
  try {
    log_z += gaussian_log_density(r.mean - root_prior.mean, s);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::singular_matrix)
      throw Error(ErrorKind::degenerate_message, "root message and prior are both degenerate");
    throw;
  }
  return log_z;
}

std::vector<GaussianMessage> bp_smooth(const CoalescentTree& tree,
                                       const std::vector<GaussianMessage>& leaf_messages,
                                       const DiffusionCovariance& lambda,
                                       const GaussianMessage& root_prior) {
  auto up = upward(tree, leaf_messages, lambda, nullptr);
  const auto n = static_cast<std::size_t>(tree.num_nodes());
  std::vector<GaussianMessage> down(n), post(n);
  down[static_cast<std::size_t>(tree.root())] = root_prior;
  for (int id : tree.preorder()) {
    const auto& node = tree.node(id);
    const auto uid = static_cast<std::size_t>(id);
    post[uid] = combine(up[uid], down[uid]);
    for (int c : node.children) {
      GaussianMessage cavity = down[uid];
      for (int s : node.children) {
        if (s == c) continue;
        cavity = combine(cavity, inflate(up[static_cast<std::size_t>(s)], lambda, tree.branch_length(s)));
      }
      down[static_cast<std::size_t>(c)] = inflate(cavity, lambda, tree.branch_length(c));
    }
  }
  return post;
}

double coalescent_log_prior(const CoalescentTree& tree) {
  auto durations = tree.event_durations();
  double lp = 0.0;
  double lineages = static_cast<double>(tree.num_leaves());
  for (double d : durations) {
    lp -= lineages * (lineages - 1.0) / 2.0 * d;
    lineages -= 1.0;
  }
  return lp;
}

MergeProposal best_merge(const GaussianMessage& a, double time_a, const GaussianMessage& b,
                         double time_b, double last_time, const DiffusionCovariance& lambda,
                         const GreedyOptions& opts) {
  const Eigen::Index d = a.dim();
  const double base = (time_a - last_time) + (time_b - last_time);
  // Reduce to independent coordinates: B + 2*delta*Lambda = L (I + 2 delta C) L^T
  // with C = L^{-1} Lambda L^{-T} = U diag(gamma) U^T.
  Eigen::VectorXd gamma, z;
  double logdet_b = 0.0;
  Eigen::VectorXd diff = a.mean - b.mean;
  if (a.variance.is_diagonal() && b.variance.is_diagonal() && lambda.is_diagonal()) {
    Eigen::VectorXd bv = a.variance.diag() + b.variance.diag() + base * lambda.diag();
    bv = bv.cwiseMax(1e-300);
    gamma = lambda.diag().cwiseQuotient(bv);
    z = diff.cwiseQuotient(bv.cwiseSqrt());
    logdet_b = bv.array().log().sum();
  } else {
    Eigen::MatrixXd bm = a.variance.dense() + b.variance.dense() + base * lambda.dense();
    bm = symmetrize(bm);
    Eigen::LLT<Eigen::MatrixXd> llt(bm);
    if (llt.info() != Eigen::Success) {
      double jitter = 1e-12 * std::max(1.0, bm.diagonal().cwiseAbs().maxCoeff());
      llt.compute(bm + jitter * Eigen::MatrixXd::Identity(d, d));
      require(llt.info() == Eigen::Success, ErrorKind::degenerate_message, "merge covariance is singular");
    }
    Eigen::MatrixXd linv_lam = llt.matrixL().solve(lambda.dense());
    Eigen::MatrixXd c = llt.matrixL().solve(linv_lam.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(c));
    gamma = es.eigenvalues().cwiseMax(0.0);
    z = es.eigenvectors().transpose() * llt.matrixL().solve(diff);
    logdet_b = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  }
  const Eigen::VectorXd z2 = z.array().square();
  auto score = [&](double delta) {
    Eigen::ArrayXd s = 1.0 + 2.0 * delta * gamma.array();
    return -0.5 * (static_cast<double>(d) * kLog2Pi + logdet_b + s.log().sum() + (z2.array() / s).sum()) -
           delta;
  };

  // Coarse log-spaced scan, then golden-section refinement around the best point.
  const int n = std::max(3, opts.scan_points);
  const double lo = std::log(opts.min_duration), hi = std::log(opts.max_duration);
  std::vector<double> grid(static_cast<std::size_t>(n));
  int best = 0;
  double best_val = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    grid[static_cast<std::size_t>(i)] = std::exp(lo + (hi - lo) * i / (n - 1));
    double v = score(grid[static_cast<std::size_t>(i)]);
    if (v > best_val) {
      best_val = v;
      best = i;
    }
  }
  double left = grid[static_cast<std::size_t>(std::max(0, best - 1))];
  double right = grid[static_cast<std::size_t>(std::min(n - 1, best + 1))];
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double x1 = right - inv_phi * (right - left);
  double x2 = left + inv_phi * (right - left);
  double f1 = score(x1), f2 = score(x2);
  for (int it = 0; it < 100 && (right - left) > 1e-10 * (1.0 + left); ++it) {
    if (f1 < f2) {
      left = x1;
      x1 = x2;
      f1 = f2;
      x2 = left + inv_phi * (right - left);
      f2 = score(x2);
    } else {
      right = x2;
      x2 = x1;
      f2 = f1;
      x1 = right - inv_phi * (right - left);
      f1 = score(x1);
    }
  }
  MergeProposal out{grid[static_cast<std::size_t>(best)], best_val};
  double mid = 0.5 * (left + right);
  double fm = score(mid);
  if (fm > out.log_score) out = {mid, fm};
  return out;
}

CoalescentTree greedy_rate1_build(const std::vector<GaussianMessage>& leaf_messages,
                                  const DiffusionCovariance& lambda, const GreedyOptions& opts) {
  const int k = static_cast<int>(leaf_messages.size());
  require(k >= 2, ErrorKind::invalid_argument, "greedy construction needs at least 2 leaves");
  require(lambda.is_psd(), ErrorKind::not_psd, "diffusion covariance must be PSD");
  for (const auto& m : leaf_messages)
    require(m.dim() == lambda.dim() && m.variance.dim() == lambda.dim(), ErrorKind::dimension_mismatch,
            "leaf message dimension differs from diffusion covariance");

  std::vector<TreeNode> nodes;
  std::vector<int> leaves;
  std::vector<GaussianMessage> msg;
  for (int i = 0; i < k; ++i) {
    TreeNode n;
    n.id = i;
    n.name = default_leaf_name(i);
    n.message = leaf_messages[static_cast<std::size_t>(i)];
    nodes.push_back(n);
    leaves.push_back(i);
    msg.push_back(leaf_messages[static_cast<std::size_t>(i)]);
  }
  std::vector<int> active = leaves;  // kept in ascending id order
  double last_time = 0.0;
  while (active.size() > 1) {
    std::size_t bi = 0, bj = 1;
    MergeProposal best{0.0, -std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < active.size(); ++i) {
      for (std::size_t j = i + 1; j < active.size(); ++j) {
        const auto& ni = nodes[static_cast<std::size_t>(active[i])];
        const auto& nj = nodes[static_cast<std::size_t>(active[j])];
        MergeProposal p = best_merge(msg[static_cast<std::size_t>(active[i])], ni.time,
                                     msg[static_cast<std::size_t>(active[j])], nj.time, last_time, lambda, opts);
        if (p.log_score > best.log_score) {
          best = p;
          bi = i;
          bj = j;
        }
      }
    }
    const int a = active[bi], b = active[bj];
    const double t = last_time - best.duration;
    TreeNode parent;
    parent.id = static_cast<int>(nodes.size());
    parent.time = t;
    parent.children = {a, b};
    nodes[static_cast<std::size_t>(a)].parent = parent.id;
    nodes[static_cast<std::size_t>(b)].parent = parent.id;
    GaussianMessage ma = inflate(msg[static_cast<std::size_t>(a)], lambda, nodes[static_cast<std::size_t>(a)].time - t);
    GaussianMessage mb = inflate(msg[static_cast<std::size_t>(b)], lambda, nodes[static_cast<std::size_t>(b)].time - t);
    GaussianMessage merged = combine(ma, mb);
    parent.message = merged;
    msg.push_back(std::move(merged));
    nodes.push_back(std::move(parent));
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bj));
    active.erase(active.begin() + static_cast<std::ptrdiff_t>(bi));
    active.push_back(static_cast<int>(nodes.size()) - 1);
    last_time = t;
  }
  int root = active.front();
  return CoalescentTree(std::move(nodes), root, std::move(leaves));
}

}  // namespace coal
