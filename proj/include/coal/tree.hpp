#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coal/covariance.hpp"

namespace coal {

// Mean/variance pair passed between nodes during belief propagation.
struct GaussianMessage {
  Eigen::VectorXd mean;
  Covariance variance;

  Eigen::Index dim() const { return mean.size(); }
};

// Brownian diffusion covariance per unit of coalescent time.
using DiffusionCovariance = Covariance;

struct TreeNode {
  int id = 0;
  std::optional<int> parent;
  std::vector<int> children;
  double time = 0.0;  // <= 0, leaves at 0
  std::string name;
  std::optional<GaussianMessage> message;
  std::optional<Eigen::VectorXd> state;

  bool is_leaf() const { return children.empty(); }
};

// Rooted tree over K task leaves. Leaf k of the tree belongs to task k; node
// ids index into nodes(). Trees produced by the coalescent are binary; the
// star factory yields a multifurcating tree used for the shared-prior
// special case.
class CoalescentTree {
 public:
  CoalescentTree() = default;
  CoalescentTree(std::vector<TreeNode> nodes, int root_id, std::vector<int> leaf_ids);

  // One root at time -depth with every leaf as a direct child.
  static CoalescentTree star(int num_leaves, double depth);

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
  TreeNode& node(int id) { return nodes_.at(static_cast<std::size_t>(id)); }
  int root() const { return root_; }
  const std::vector<int>& leaves() const { return leaves_; }
  int num_leaves() const { return static_cast<int>(leaves_.size()); }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  // Task index of a leaf node, or -1 for internal nodes.
  int task_of(int node_id) const { return task_of_.at(static_cast<std::size_t>(node_id)); }

  // time(child) - time(parent); zero for the root.
  double branch_length(int id) const;
  std::vector<int> postorder() const;
  std::vector<int> preorder() const;
  // Inter-event gaps, ordered from the event nearest the leaves to the root.
  std::vector<double> event_durations() const;
  // Sorted task indices below a node.
  std::vector<int> leaf_set(int id) const;
  bool has_clade(std::vector<int> task_indices) const;
  bool is_binary() const;

  // Throws invalid_argument unless the coalescent invariants hold: binary,
  // K-1 internal nodes, leaves at time 0, parents strictly older.
  void validate() const;

  void set_leaf_names(const std::vector<std::string>& names);
  std::vector<std::string> leaf_names() const;

 private:
  void index();

  std::vector<TreeNode> nodes_;
  int root_ = -1;
  std::vector<int> leaves_;
  std::vector<int> task_of_;
};

CoalescentTree sample_coalescent(int num_leaves, std::uint64_t seed);

// Top-down Brownian diffusion; node states end up in TreeNode::state.
CoalescentTree diffuse_states(CoalescentTree tree, const Eigen::VectorXd& root_state,
                              const DiffusionCovariance& lambda, std::uint64_t seed);

// Product of two Gaussian messages about the same variable. Uses the form
// V = A (A+B)^{-1} B, which tolerates one side having zero variance; throws
// degenerate_message when A+B is singular.
GaussianMessage combine(const GaussianMessage& a, const GaussianMessage& b);
// Adds dt * lambda to the variance.
GaussianMessage inflate(const GaussianMessage& m, const DiffusionCovariance& lambda, double dt);

// Upward pass: every internal node receives the precision-weighted
// combination of its children's messages inflated by branch length.
CoalescentTree bp_upward(CoalescentTree tree, const std::vector<GaussianMessage>& leaf_messages,
                         const DiffusionCovariance& lambda);

// Log marginal likelihood of the leaf messages (treated as noisy
// observations of the leaf states) under diffusion from a root drawn from
// root_prior.
double tree_data_log_likelihood(const CoalescentTree& tree,
                                const std::vector<GaussianMessage>& leaf_messages,
                                const DiffusionCovariance& lambda,
                                const GaussianMessage& root_prior);

// Posterior of every node's state given all leaf messages and the root
// prior (upward then downward pass). Indexed by node id. A zero-variance
// root prior clamps the root.
std::vector<GaussianMessage> bp_smooth(const CoalescentTree& tree,
                                       const std::vector<GaussianMessage>& leaf_messages,
                                       const DiffusionCovariance& lambda,
                                       const GaussianMessage& root_prior);

// log density of the tree under the K-coalescent: sum_i -C(n_i,2) delta_i.
double coalescent_log_prior(const CoalescentTree& tree);

struct GreedyOptions {
  double min_duration = 1e-6;
  double max_duration = 50.0;
  int scan_points = 48;
};

struct MergeProposal {
  double duration = 0.0;
  double log_score = 0.0;
};

// Best duration for merging two subtrees whose roots sit at time_a/time_b
// when the last merge happened at last_time: maximizes the pair likelihood
// times an Exp(1) duration density.
MergeProposal best_merge(const GaussianMessage& a, double time_a, const GaussianMessage& b,
                         double time_b, double last_time, const DiffusionCovariance& lambda,
                         const GreedyOptions& opts = {});

// Greedy-Rate1 agglomeration. Ties in merge score go to the pair that comes
// first in ascending node-id order.
CoalescentTree greedy_rate1_build(const std::vector<GaussianMessage>& leaf_messages,
                                  const DiffusionCovariance& lambda, const GreedyOptions& opts = {});

}  // namespace coal
