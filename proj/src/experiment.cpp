#include "coal/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <thread>

#include "coal/baselines.hpp"
#include "coal/da_model.hpp"
#include "coal/error.hpp"
#include "coal/mtl_model.hpp"
#include "coal/newick.hpp"
#include "coal/random.hpp"

namespace coal {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_value(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out{};
  in >> out;
  require(!in.fail() && in.eof(), ErrorKind::parse_error, "bad value for '" + key + "': " + v);
  return out;
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  for (const auto& item : split_list(v)) out.push_back(parse_value<T>(key, item));
  require(!out.empty(), ErrorKind::parse_error, "empty list for '" + key + "'");
  return out;
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

bool is_coal_method(const std::string& m) { return m.rfind("coal-", 0) == 0; }
bool is_mtl_method(const std::string& m) { return m.rfind("mtl-", 0) == 0; }

std::vector<Eigen::VectorXd> replicate(const Eigen::VectorXd& w, std::size_t k) {
  return std::vector<Eigen::VectorXd>(k, w);
}

struct Job {
  std::size_t method, point, seed;
};

struct Prepared {
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
};

}  // namespace

std::string_view to_string(ScenarioKind s) {
  switch (s) {
    case ScenarioKind::all_tasks: return "all";
    case ScenarioKind::per_target: return "per-target";
    case ScenarioKind::noise: return "noise";
  }
  return "all";
}

ScenarioKind parse_scenario(std::string_view s) {
  if (s == "all" || s == "all-tasks-vary-N") return ScenarioKind::all_tasks;
  if (s == "per-target") return ScenarioKind::per_target;
  if (s == "noise" || s == "noise-injection") return ScenarioKind::noise;
  throw Error(ErrorKind::invalid_argument, "unknown scenario '" + std::string(s) + "'");
}

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> m{"indp",        "pool",        "feda",      "coal-full", "coal-diag",
                                          "coal-full+x", "coal-diag+x", "coal-data", "mtl-full",  "mtl-diag"};
  return m;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::parse_error,
            "config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key == "data") c.data = v;
    else if (key == "format") c.format = parse_format(v);
    else if (key == "synth") c.synth = v;
    else if (key == "synth_tasks") c.synth_tasks = parse_value<int>(key, v);
    else if (key == "synth_dim") c.synth_dim = parse_value<Eigen::Index>(key, v);
    else if (key == "synth_n") c.synth_n = parse_value<Eigen::Index>(key, v);
    else if (key == "synth_test") c.synth_test = parse_value<Eigen::Index>(key, v);
    else if (key == "synth_lambda") c.synth_lambda = parse_value<double>(key, v);
    else if (key == "methods") c.methods = split_list(v);
    else if (key == "scenario") c.scenario = parse_scenario(v);
    else if (key == "grid") c.grid = parse_list<long>(key, v);
    else if (key == "target") c.target = parse_value<int>(key, v);
    else if (key == "scramble_source") c.scramble_source = parse_value<int>(key, v);
    else if (key == "scramble") c.scramble = parse_list<double>(key, v);
    else if (key == "seeds") c.seeds = parse_list<std::uint64_t>(key, v);
    else if (key == "metric") c.metric = parse_metric(v);
    else if (key == "em_iters") c.em_iters = parse_value<int>(key, v);
    else if (key == "holdout") c.holdout = parse_value<double>(key, v);
    else if (key == "sigma2") c.sigma2 = parse_value<double>(key, v);
    else if (key == "rho2") c.rho2 = parse_value<double>(key, v);
    else if (key == "tune") c.tune = v == "1" || v == "true" || v == "yes";
    else if (key == "pca_dim") c.pca_dim = parse_value<Eigen::Index>(key, v);
    else if (key == "output") c.output = v;
    else if (key == "threads") c.threads = parse_value<int>(key, v);
    else throw Error(ErrorKind::parse_error, "config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
  }
  require(!c.methods.empty(), ErrorKind::invalid_argument, "config lists no methods");
  for (const auto& m : c.methods)
    require(std::find(known_methods().begin(), known_methods().end(), m) != known_methods().end(),
            ErrorKind::invalid_argument, "unknown method '" + m + "'");
  require(c.data.empty() != c.synth.empty(), ErrorKind::invalid_argument, "set exactly one of data and synth");
  require(c.synth.empty() || c.synth == "da", ErrorKind::invalid_argument, "synth must be 'da'");
  for (long n : c.grid) require(n >= 0, ErrorKind::invalid_argument, "grid sizes must be non-negative");
  if (c.scenario == ScenarioKind::noise) {
    require(!c.scramble.empty(), ErrorKind::invalid_argument, "noise scenario needs scramble fractions");
    for (double f : c.scramble) require(f >= 0.0 && f <= 1.0, ErrorKind::invalid_argument, "scramble fractions lie in [0,1]");
  }
  require(c.threads >= 1, ErrorKind::invalid_argument, "threads must be at least 1");
  return c;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io_error, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

MethodFit fit_method(const std::string& method, const std::vector<TaskDataset>& train, const ExperimentConfig& config,
                     std::uint64_t seed) {
  MethodFit fit;
  if (method == "indp") {
    fit.weights = baseline_indp(train, config.sigma2, config.rho2);
  } else if (method == "pool") {
    fit.weights = replicate(baseline_pool(train, config.sigma2, config.rho2), train.size());
  } else if (method == "feda") {
    FedaModel m = baseline_feda(train, config.sigma2, config.rho2);
    for (int k = 0; k < m.num_tasks; ++k) fit.weights.push_back(m.task_weights(k));
  } else if (is_coal_method(method) || is_mtl_method(method)) {
    ModelConfig mc;
    mc.family = is_coal_method(method) ? ModelFamily::da : ModelFamily::mtl;
    mc.variant = parse_variant(method.substr(method.find('-') + 1));
    mc.sigma2 = config.sigma2;
    mc.rho2 = config.rho2;
    mc.em_iters = config.em_iters;
    mc.holdout = config.holdout;
    mc.seed = derive_seed(seed, 17);
    if (mc.family == ModelFamily::da) {
      if (config.tune) mc = tune_da(train, mc);
      DaParams p = em_fit_da(train, mc);
      fit.weights = p.weights();
      fit.newick = export_newick(p.tree);
    } else {
      MtlParams p = em_fit_mtl(train, mc);
      fit.weights = p.leaf_w;
      fit.newick = export_newick(p.tree);
    }
  } else {
    throw Error(ErrorKind::invalid_argument, "unknown method '" + method + "'");
  }
  return fit;
}

ResultTable run_experiment(const ExperimentConfig& config, const fs::path& artifact_dir) {
  require(!config.methods.empty(), ErrorKind::invalid_argument, "config lists no methods");
  for (const auto& m : config.methods)
    require(std::find(known_methods().begin(), known_methods().end(), m) != known_methods().end(),
            ErrorKind::invalid_argument, "unknown method '" + m + "'");

  // One bundle per seed (synthetic) or one shared bundle (loaded).
  std::vector<ProblemBundle> bundles;
  auto finish_bundle = [&](ProblemBundle b) {
    require(!b.test_tasks.empty(), ErrorKind::invalid_argument, "experiments need a test split for every task");
    for (const auto& t : b.tasks)
      require(t.kind == TaskKind::classification, ErrorKind::invalid_argument, "experiments need classification tasks");
    if (config.pca_dim > 0 && config.pca_dim < b.feature_dim) b = pca_reduce(b, config.pca_dim);
    return b;
  };
  if (config.synth.empty()) {
    bundles.push_back(finish_bundle(load_problem(config.data, config.format)));
  } else {
    for (auto seed : config.seeds) {
      ModelConfig mc;
      mc.sigma2 = config.sigma2;
      DaSampleOptions opts;
      opts.n_test = config.synth_test;
      if (config.synth_lambda > 0.0)
        opts.lambda = Covariance::identity(config.synth_dim, false, config.synth_lambda);
      DaSample s = sample_da(mc, config.synth_tasks, config.synth_dim, config.synth_n, derive_seed(seed, 99), opts);
      ProblemBundle b;
      b.tasks = std::move(s.train);
      b.test_tasks = std::move(s.test);
      b.feature_dim = config.synth_dim;
      for (const auto& t : b.tasks) b.names.push_back(t.name);
      bundles.push_back(finish_bundle(std::move(b)));
    }
  }
  const int k = bundles.front().num_tasks();
  if (config.scenario == ScenarioKind::per_target)
    require(config.target >= 0 && config.target < k, ErrorKind::invalid_argument, "target task out of range");
  if (config.scenario == ScenarioKind::noise)
    require(config.scramble_source >= 0 && config.scramble_source < k, ErrorKind::invalid_argument,
            "scramble source out of range");

  const std::size_t n_points = config.scenario == ScenarioKind::noise ? config.scramble.size() : config.grid.size();
  auto point_label = [&](std::size_t p) {
    if (config.scenario == ScenarioKind::noise) return format_double(config.scramble[p]);
    return config.grid[p] == 0 ? std::string("all") : std::to_string(config.grid[p]);
  };

  auto prepare = [&](std::size_t p, std::size_t s) {
    const std::uint64_t seed = config.seeds[s];
    const ProblemBundle& b = bundles[config.synth.empty() ? 0 : s];
    Prepared out{b.tasks, b.test_tasks};
    for (int i = 0; i < k; ++i) {
      auto ui = static_cast<std::size_t>(i);
      bool shrink = config.scenario == ScenarioKind::all_tasks ||
                    (config.scenario == ScenarioKind::per_target && i == config.target);
      if (shrink && config.grid[p] > 0)
        out.train[ui] = subsample(out.train[ui], config.grid[p], derive_seed(seed, 1000 + ui));
    }
    if (config.scenario == ScenarioKind::noise) {
      auto src = static_cast<std::size_t>(config.scramble_source);
      out.train[src] = scramble_task(out.train[src], config.scramble[p], derive_seed(seed, 0x5c4a));
    }
    return out;
  };

  auto evaluate = [&](const Prepared& data, const std::vector<Eigen::VectorXd>& w) {
    std::vector<std::size_t> tasks;
    if (config.scenario == ScenarioKind::per_target) {
      tasks.push_back(static_cast<std::size_t>(config.target));
    } else {
      for (std::size_t i = 0; i < data.test.size(); ++i) tasks.push_back(i);
    }
    double sum = 0.0;
    int counted = 0;
    for (auto i : tasks) {
      const auto& t = data.test[i];
      if (t.size() == 0) continue;
      if (config.metric == MetricKind::auc) {
        bool pos = (t.labels.array() > 0).any(), neg = (t.labels.array() < 0).any();
        if (!pos || !neg) continue;  // AUC undefined for this task
      }
      sum += evaluate_metric(config.metric, decision_values(w[i], t.inputs), t.labels);
      ++counted;
    }
    require(counted > 0, ErrorKind::undefined_metric, "no task has a usable test set for the metric");
    return sum / counted;
  };

  std::vector<Job> jobs;
  for (std::size_t m = 0; m < config.methods.size(); ++m)
    for (std::size_t p = 0; p < n_points; ++p)
      for (std::size_t s = 0; s < config.seeds.size(); ++s) jobs.push_back({m, p, s});

  std::vector<ResultRow> rows(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  auto run_job = [&](std::size_t j) {
    try {
      const Job& job = jobs[j];
      const auto start = std::chrono::steady_clock::now();
      Prepared data = prepare(job.point, job.seed);
      const std::string& method = config.methods[job.method];
      MethodFit fit = fit_method(method, data.train, config, config.seeds[job.seed]);
      ResultRow r;
      r.method = method;
      r.scenario = std::string(to_string(config.scenario));
      r.point = point_label(job.point);
      r.seed = config.seeds[job.seed];
      r.metric = config.metric;
      r.value = evaluate(data, fit.weights);
      r.newick = fit.newick;
      r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      rows[j] = std::move(r);
    } catch (...) {
      errors[j] = std::current_exception();
    }
  };
  const auto n_threads = static_cast<std::size_t>(std::max(1, config.threads));
  if (n_threads == 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run_job(j);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(n_threads, jobs.size()); ++t)
      pool.emplace_back([&] {
        for (std::size_t j = next++; j < jobs.size(); j = next++) run_job(j);
      });
    for (auto& th : pool) th.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  ResultTable table{std::move(rows)};
  if (!artifact_dir.empty()) {
    fs::create_directories(artifact_dir / "trees");
    for (const auto& r : table.rows) {
      if (!r.newick) continue;
      fs::path file = artifact_dir / "trees" / (r.method + "_" + r.point + "_" + std::to_string(r.seed) + ".nwk");
      std::ofstream out(file, std::ios::binary);
      require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + file.string());
      out << *r.newick << '\n';
    }
  }
  return table;
}

std::string format_table(const ResultTable& table) {
  require(!table.rows.empty(), ErrorKind::invalid_argument, "result table is empty");
  std::string out = "method\tscenario\tpoint\tseed\tmetric\tvalue\n";
  for (const auto& r : table.rows)
    out += r.method + '\t' + r.scenario + '\t' + r.point + '\t' + std::to_string(r.seed) + '\t' +
           std::string(to_string(r.metric)) + '\t' + fixed6(r.value) + '\n';

  // Summary groups keep first-appearance order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> groups;
  std::map<std::string, const ResultRow*> first;
  for (const auto& r : table.rows) {
    std::string key = r.method + '\t' + r.scenario + '\t' + r.point + '\t' + std::string(to_string(r.metric));
    if (!groups.count(key)) {
      order.push_back(key);
      first[key] = &r;
    }
    groups[key].push_back(r.value);
  }
  out += "\n# summary\nmethod\tscenario\tpoint\tmetric\tseeds\tmean\tstd\n";
  for (const auto& key : order) {
    const auto& v = groups[key];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
    out += key + '\t' + std::to_string(v.size()) + '\t' + fixed6(mean) + '\t' + fixed6(sd) + '\n';
  }
  return out;
}

void emit_table(const ResultTable& table, const fs::path& path) {
  std::string text = format_table(table);
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorKind::io_error, "write failed for " + path.string());
}

void emit_timings(const ResultTable& table, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + path.string());
  out << "method\tscenario\tpoint\tseed\tseconds\n";
  for (const auto& r : table.rows)
    out << r.method << '\t' << r.scenario << '\t' << r.point << '\t' << r.seed << '\t' << fixed6(r.seconds) << '\n';
}

}  // namespace coal
