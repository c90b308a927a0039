#include "coal/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "coal/error.hpp"
#include "coal/newick.hpp"

namespace coal {

using json = nlohmann::json;

namespace {

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

json mat_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

Eigen::VectorXd json_vec(const json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Eigen::MatrixXd json_mat(const json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows == 0 ? Eigen::Index{0} : static_cast<Eigen::Index>(j.at(0).size());
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) m.row(i) = json_vec(j.at(static_cast<std::size_t>(i))).transpose();
  return m;
}

json cov_json(const Covariance& c) {
  if (c.is_diagonal()) return {{"diagonal", vec_json(c.diag())}};
  return {{"full", mat_json(c.matrix())}};
}

Covariance json_cov(const json& j) {
  if (j.contains("diagonal")) return Covariance::diagonal(json_vec(j.at("diagonal")));
  return Covariance::full(json_mat(j.at("full")));
}

json tree_json(const CoalescentTree& tree) {
  json nodes = json::array();
  for (const auto& n : tree.nodes()) {
    json jn;
    jn["id"] = n.id;
    jn["parent"] = n.parent ? json(*n.parent) : json(nullptr);
    jn["children"] = n.children;
    jn["time"] = n.time;
    jn["name"] = n.name;
    if (n.state) jn["state"] = vec_json(*n.state);
    if (n.message) jn["message"] = {{"mean", vec_json(n.message->mean)}, {"variance", cov_json(n.message->variance)}};
    nodes.push_back(std::move(jn));
  }
  return {{"root", tree.root()}, {"leaves", tree.leaves()}, {"newick", export_newick(tree)}, {"nodes", nodes}};
}

CoalescentTree json_tree(const json& j) {
  std::vector<TreeNode> nodes;
  for (const auto& jn : j.at("nodes")) {
    TreeNode n;
    n.id = jn.at("id").get<int>();
    if (!jn.at("parent").is_null()) n.parent = jn.at("parent").get<int>();
    n.children = jn.at("children").get<std::vector<int>>();
    n.time = jn.at("time").get<double>();
    n.name = jn.at("name").get<std::string>();
    if (jn.contains("state")) n.state = json_vec(jn.at("state"));
    if (jn.contains("message"))
      n.message = GaussianMessage{json_vec(jn.at("message").at("mean")), json_cov(jn.at("message").at("variance"))};
    nodes.push_back(std::move(n));
  }
  return CoalescentTree(std::move(nodes), j.at("root").get<int>(), j.at("leaves").get<std::vector<int>>());
}

json config_json(const ModelConfig& c) {
  return {{"model", std::string(to_string(c.family))},
          {"variant", std::string(to_string(c.variant))},
          {"sigma2", c.sigma2},
          {"rho2", c.rho2},
          {"em_iters", c.em_iters},
          {"holdout", c.holdout},
          {"seed", c.seed}};
}

ModelConfig json_config(const json& j) {
  ModelConfig c;
  c.family = parse_family(j.at("model").get<std::string>());
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.sigma2 = j.at("sigma2").get<double>();
  c.rho2 = j.at("rho2").get<double>();
  c.em_iters = j.at("em_iters").get<int>();
  c.holdout = j.at("holdout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

}  // namespace

const CoalescentTree& Checkpoint::tree() const { return da ? da->tree : mtl.value().tree; }

std::vector<Eigen::VectorXd> Checkpoint::weights() const { return da ? da->weights() : mtl.value().leaf_w; }

int Checkpoint::iteration() const { return da ? da->iteration : mtl.value().iteration; }

std::string tree_to_json(const CoalescentTree& tree, int indent) { return tree_json(tree).dump(indent); }

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  require(ckpt.da.has_value() != ckpt.mtl.has_value(), ErrorKind::invalid_argument,
          "checkpoint must hold exactly one model");
  json j;
  j["model"] = std::string(to_string(ckpt.config.family));
  j["variant"] = std::string(to_string(ckpt.config.variant));
  j["iteration"] = ckpt.iteration();
  j["config"] = config_json(ckpt.config);
  j["tree"] = tree_json(ckpt.tree());
  if (ckpt.da) {
    const auto& p = *ckpt.da;
    j["lambda"] = cov_json(p.lambda);
    if (p.input_lambda) j["input_lambda"] = cov_json(*p.input_lambda);
    json post = json::array();
    for (const auto& lp : p.leaf_posteriors) post.push_back({{"mean", vec_json(lp.mean)}, {"covariance", mat_json(lp.covariance)}});
    j["leaf_posteriors"] = post;
    j["heldout_trace"] = p.heldout_trace;
    j["objective_trace"] = p.objective_trace;
  } else {
    const auto& p = *ckpt.mtl;
    j["lambda"] = cov_json(p.lambda);
    j["R"] = mat_json(p.R);
    json s = json::array(), w = json::array();
    for (const auto& v : p.leaf_S) s.push_back(vec_json(v));
    for (const auto& v : p.leaf_w) w.push_back(vec_json(v));
    j["leaf_S"] = s;
    j["leaf_w"] = w;
    j["heldout_trace"] = p.heldout_trace;
    j["objective_trace"] = p.objective_trace;
  }
  if (ckpt.pca)
    j["pca"] = {{"mean", vec_json(ckpt.pca->mean)},
                {"components", mat_json(ckpt.pca->components)},
                {"eigenvalues", vec_json(ckpt.pca->eigenvalues)},
                {"retained_fraction", ckpt.pca->retained_fraction}};
  return j.dump(2) + "\n";
}

Checkpoint checkpoint_from_json(const std::string& text) {
  Checkpoint c;
  try {
    json j = json::parse(text);
    c.config = json_config(j.at("config"));
    CoalescentTree tree = json_tree(j.at("tree"));
    if (c.config.family == ModelFamily::da) {
      DaParams p;
      p.variant = c.config.variant;
      p.lambda = json_cov(j.at("lambda"));
      if (j.contains("input_lambda")) p.input_lambda = json_cov(j.at("input_lambda"));
      for (const auto& lp : j.at("leaf_posteriors"))
        p.leaf_posteriors.push_back({json_vec(lp.at("mean")), json_mat(lp.at("covariance"))});
      p.tree = std::move(tree);
      p.sigma2 = c.config.sigma2;
      p.rho2 = c.config.rho2;
      p.iteration = j.at("iteration").get<int>();
      p.heldout_trace = j.at("heldout_trace").get<std::vector<double>>();
      p.objective_trace = j.at("objective_trace").get<std::vector<double>>();
      c.da = std::move(p);
    } else {
      MtlParams p;
      p.variant = c.config.variant;
      p.lambda = json_cov(j.at("lambda"));
      p.R = json_mat(j.at("R"));
      for (const auto& v : j.at("leaf_S")) p.leaf_S.push_back(json_vec(v));
      for (const auto& v : j.at("leaf_w")) p.leaf_w.push_back(json_vec(v));
      p.tree = std::move(tree);
      p.sigma2 = c.config.sigma2;
      p.rho2 = c.config.rho2;
      p.iteration = j.at("iteration").get<int>();
      p.heldout_trace = j.at("heldout_trace").get<std::vector<double>>();
      p.objective_trace = j.at("objective_trace").get<std::vector<double>>();
      c.mtl = std::move(p);
    }
    if (j.contains("pca")) {
      PcaProjection pca;
      pca.mean = json_vec(j.at("pca").at("mean"));
      pca.components = json_mat(j.at("pca").at("components"));
      pca.eigenvalues = json_vec(j.at("pca").at("eigenvalues"));
      pca.retained_fraction = j.at("pca").at("retained_fraction").get<double>();
      c.pca = std::move(pca);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::parse_error, std::string("bad checkpoint: ") + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string text = checkpoint_to_json(ckpt);
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorKind::io_error, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io_error, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace coal
