// coal: fit, evaluate and compare coalescent transfer-learning models.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "coal/checkpoint.hpp"
#include "coal/da_model.hpp"
#include "coal/data_io.hpp"
#include "coal/error.hpp"
#include "coal/experiment.hpp"
#include "coal/metrics.hpp"
#include "coal/mtl_model.hpp"
#include "coal/newick.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct ModelFlags {
  std::string model = "da";
  std::string variant = "full";
  double sigma2 = 1.0;
  double rho2 = 1.0;
  int em_iters = 20;
  double holdout = 0.1;
  std::uint64_t seed = 0;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--model", model, "da or mtl")->check(CLI::IsMember({"da", "mtl"}));
    cmd->add_option("--variant", variant, "full, diag, full+x, diag+x or data");
    cmd->add_option("--sigma2", sigma2, "root prior scale");
    cmd->add_option("--rho2", rho2, "regression noise variance");
    cmd->add_option("--em-iters", em_iters, "EM iterations");
    cmd->add_option("--holdout", holdout, "held-out fraction for iterate selection (0 disables)");
    cmd->add_option("--seed", seed, "random seed");
  }

  coal::ModelConfig config() const {
    coal::ModelConfig c;
    c.family = coal::parse_family(model);
    c.variant = coal::parse_variant(variant);
    c.sigma2 = sigma2;
    c.rho2 = rho2;
    c.em_iters = em_iters;
    c.holdout = holdout;
    c.seed = seed;
    return c;
  }
};

coal::TaskKind parse_kind(const std::string& s) {
  if (s == "classification") return coal::TaskKind::classification;
  if (s == "regression") return coal::TaskKind::regression;
  throw coal::Error(coal::ErrorKind::invalid_argument, "unknown task kind '" + s + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  coal::require(static_cast<bool>(out), coal::ErrorKind::io_error, "cannot write " + path.string());
  out << text;
}

void print_error(std::string_view kind, const std::string& message) {
  std::cerr << json{{"error", {{"kind", std::string(kind)}, {"message", message}}}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical Bayesian domain adaptation and multitask learning over a coalescent tree"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic problem bundle");
  ModelFlags synth_flags;
  synth_flags.add_to(synth);
  int synth_tasks = 6;
  long synth_dim = 5, synth_n = 50, synth_test = 200;
  std::string synth_kind = "classification", synth_format = "csv", synth_out;
  double synth_lambda = 0.0;
  synth->add_option("--tasks", synth_tasks, "number of tasks");
  synth->add_option("--dim", synth_dim, "feature dimension");
  synth->add_option("--n", synth_n, "training examples per task");
  synth->add_option("--n-test", synth_test, "test examples per task");
  synth->add_option("--kind", synth_kind, "classification or regression");
  synth->add_option("--format", synth_format, "csv or sparse");
  synth->add_option("--lambda-scale", synth_lambda, "fix the generating diffusion to this multiple of I");
  synth->add_option("--out", synth_out, "output directory")->required();

  // train
  auto* train = app.add_subcommand("train", "Fit a model and write a checkpoint");
  ModelFlags train_flags;
  train_flags.add_to(train);
  std::string train_data, train_format = "csv", train_kind = "classification", train_out, train_kinds;
  long train_pca = 0;
  bool train_tune = false;
  train->add_option("--data", train_data, "manifest file or task directory")->required();
  train->add_option("--format", train_format, "csv or sparse (directories only)");
  train->add_option("--kind", train_kind, "classification or regression (directories only)");
  train->add_option("--pca-dim", train_pca, "project inputs to this many principal components");
  train->add_option("--feature-kinds", train_kinds, "comma-separated c/d per feature for input-modeling variants");
  train->add_flag("--tune", train_tune, "select sigma2/rho2 from {0.01,0.1,1,10} on held-out likelihood");
  train->add_option("--out", train_out, "checkpoint path")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
  std::string eval_ckpt, eval_data, eval_format = "csv", eval_kind = "classification", eval_metric = "accuracy";
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
  eval->add_option("--data", eval_data, "manifest file or task directory")->required();
  eval->add_option("--format", eval_format, "csv or sparse (directories only)");
  eval->add_option("--kind", eval_kind, "classification or regression (directories only)");
  eval->add_option("--metric", eval_metric, "accuracy or auc");

  // experiment
  auto* experiment = app.add_subcommand("experiment", "Run a configured comparison and write result tables");
  std::string exp_config, exp_output;
  experiment->add_option("--config", exp_config, "key=value config file")->required();
  experiment->add_option("--output", exp_output, "output directory (overrides the config)");

  // export-tree
  auto* export_tree = app.add_subcommand("export-tree", "Write the tree of a checkpoint");
  std::string tree_ckpt, tree_format = "newick", tree_out;
  export_tree->add_option("--checkpoint", tree_ckpt, "checkpoint path")->required();
  export_tree->add_option("--format", tree_format, "newick or json")->check(CLI::IsMember({"newick", "json"}));
  export_tree->add_option("--out", tree_out, "output file (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("invalid-argument", e.what());
    return 2;
  }

  try {
    if (*synth) {
      coal::ModelConfig mc = synth_flags.config();
      coal::ProblemBundle bundle;
      json truth;
      if (mc.family == coal::ModelFamily::da) {
        coal::DaSampleOptions opts;
        opts.kind = parse_kind(synth_kind);
        opts.n_test = synth_test;
        opts.model_inputs = coal::models_inputs(mc.variant);
        if (synth_lambda > 0.0) opts.lambda = coal::Covariance::identity(synth_dim, false, synth_lambda);
        coal::DaSample s = coal::sample_da(mc, synth_tasks, synth_dim, synth_n, mc.seed, opts);
        bundle.tasks = std::move(s.train);
        bundle.test_tasks = std::move(s.test);
        truth["newick"] = coal::export_newick(s.truth.tree);
        for (const auto& w : s.truth.weights()) truth["weights"].push_back(std::vector<double>(w.data(), w.data() + w.size()));
      } else {
        coal::MtlSampleOptions opts;
        opts.kind = parse_kind(synth_kind);
        opts.n_test = synth_test;
        if (synth_lambda > 0.0) opts.lambda = coal::Covariance::identity(synth_dim, false, synth_lambda);
        coal::MtlSample s = coal::sample_mtl(mc, synth_tasks, synth_dim, synth_n, mc.seed, opts);
        bundle.tasks = std::move(s.train);
        bundle.test_tasks = std::move(s.test);
        truth["newick"] = coal::export_newick(s.truth.tree);
        for (const auto& v : s.truth.leaf_S) truth["leaf_S"].push_back(std::vector<double>(v.data(), v.data() + v.size()));
      }
      bundle.feature_dim = synth_dim;
      bundle.holdout_fraction = mc.holdout > 0.0 ? mc.holdout : 0.1;
      for (const auto& t : bundle.tasks) bundle.names.push_back(t.name);
      coal::save_problem(bundle, synth_out, coal::parse_format(synth_format));
      write_text(fs::path(synth_out) / "truth.json", truth.dump(2) + "\n");
      std::cout << json{{"tasks", bundle.num_tasks()}, {"dim", bundle.feature_dim}, {"out", synth_out}}.dump() << "\n";
    } else if (*train) {
      coal::ModelConfig mc = train_flags.config();
      coal::ProblemBundle bundle = coal::load_problem(train_data, coal::parse_format(train_format), parse_kind(train_kind));
      std::optional<coal::PcaProjection> pca;
      if (train_pca > 0 && train_pca < bundle.feature_dim) {
        pca = coal::fit_pca(bundle, train_pca);
        bundle = coal::apply_pca(bundle, *pca);
      }
      if (!train_kinds.empty()) {
        for (char c : train_kinds) {
          if (c == ',') continue;
          coal::require(c == 'c' || c == 'd', coal::ErrorKind::invalid_argument, "feature kinds are c or d");
          mc.feature_kinds.push_back(c == 'd' ? coal::FeatureKind::discrete : coal::FeatureKind::continuous);
        }
      }
      coal::Checkpoint ckpt;
      if (mc.family == coal::ModelFamily::da) {
        if (train_tune) mc = coal::tune_da(bundle.tasks, mc);
        ckpt.da = coal::em_fit_da(bundle.tasks, mc);
      } else {
        ckpt.mtl = coal::em_fit_mtl(bundle.tasks, mc);
      }
      ckpt.config = mc;
      ckpt.pca = pca;
      coal::save_checkpoint(ckpt, train_out);
      std::cout << json{{"checkpoint", train_out}, {"iteration", ckpt.iteration()}, {"sigma2", mc.sigma2}, {"rho2", mc.rho2}}.dump()
                << "\n";
    } else if (*eval) {
      coal::Checkpoint ckpt = coal::load_checkpoint(eval_ckpt);
      coal::ProblemBundle bundle = coal::load_problem(eval_data, coal::parse_format(eval_format), parse_kind(eval_kind));
      if (ckpt.pca) bundle = coal::apply_pca(bundle, *ckpt.pca);
      const auto& tasks = bundle.test_tasks.empty() ? bundle.tasks : bundle.test_tasks;
      const auto w = ckpt.weights();
      coal::require(w.size() == tasks.size(), coal::ErrorKind::dimension_mismatch, "checkpoint and data disagree on task count");
      const coal::MetricKind metric = coal::parse_metric(eval_metric);
      json per_task = json::array();
      double sum = 0.0;
      int counted = 0;
      for (std::size_t k = 0; k < tasks.size(); ++k) {
        Eigen::VectorXd scores = coal::decision_values(w[k], tasks[k].inputs);
        json entry{{"task", tasks[k].name}};
        if (tasks[k].kind == coal::TaskKind::regression) {
          entry["mse"] = (scores - tasks[k].labels).squaredNorm() / static_cast<double>(std::max<Eigen::Index>(1, tasks[k].size()));
        } else {
          double v = coal::evaluate_metric(metric, scores, tasks[k].labels);
          entry[std::string(coal::to_string(metric))] = v;
          sum += v;
          ++counted;
        }
        per_task.push_back(entry);
      }
      json result{{"tasks", per_task}};
      if (counted > 0) result["mean"] = sum / counted;
      std::cout << result.dump(2) << "\n";
    } else if (*experiment) {
      coal::ExperimentConfig cfg = coal::load_experiment_config(exp_config);
      if (!exp_output.empty()) cfg.output = exp_output;
      coal::require(!cfg.output.empty(), coal::ErrorKind::invalid_argument, "no output directory given");
      fs::create_directories(cfg.output);
      coal::ResultTable table = coal::run_experiment(cfg, cfg.output);
      coal::emit_table(table, fs::path(cfg.output) / "results.tsv");
      coal::emit_timings(table, fs::path(cfg.output) / "timings.tsv");
      std::cout << coal::format_table(table);
    } else if (*export_tree) {
      coal::Checkpoint ckpt = coal::load_checkpoint(tree_ckpt);
      std::string text = tree_format == "json" ? coal::tree_to_json(ckpt.tree()) + "\n" : coal::export_newick(ckpt.tree()) + "\n";
      if (tree_out.empty()) {
        std::cout << text;
      } else {
        write_text(tree_out, text);
      }
    }
  } catch (const coal::Error& e) {
    print_error(coal::to_string(e.kind()), e.what());
    return 1;
  } catch (const fs::filesystem_error& e) {
    print_error("io-error", e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal-error", e.what());
    return 1;
  }
  return 0;
}
