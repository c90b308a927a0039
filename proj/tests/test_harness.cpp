#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

#include "coal/checkpoint.hpp"
#include "coal/da_model.hpp"
#include "coal/error.hpp"
#include "coal/experiment.hpp"
#include "coal/glm.hpp"
#include "coal/metrics.hpp"
#include "coal/mtl_model.hpp"
#include "coal/newick.hpp"
#include "coal/random.hpp"

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("coal_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

coal::ExperimentConfig small_config(const std::string& methods) {
  return coal::parse_experiment_config("synth = da\nsynth_tasks = 3\nsynth_dim = 3\nsynth_n = 30\nsynth_test = 60\n"
                                       "methods = " +
                                       methods + "\nseeds = 1, 2\nem_iters = 3\n");
}

}  // namespace

TEST_CASE("accuracy") {
  Eigen::Vector4d y(1, -1, 1, -1);
  CHECK(coal::metric_accuracy(y, y) == 1.0);
  CHECK(coal::metric_accuracy(-y, y) == 0.0);
  CHECK(coal::metric_accuracy(Eigen::Vector4d::Ones(), y) == 0.5);
  CHECK(coal::labels_from_scores(Eigen::Vector3d(-0.1, 0.0, 2.0)) == Eigen::Vector3d(-1, 1, 1));
  CHECK_THROWS_AS(coal::metric_accuracy(Eigen::Vector3d::Ones(), y), coal::Error);
}

TEST_CASE("auc") {
  Eigen::Vector4d y(1, 1, -1, -1);
  Eigen::Vector4d s(0.9, 0.8, 0.2, 0.1);
  CHECK(coal::metric_auc(s, y) == 1.0);
  CHECK(coal::metric_auc(-s, y) == 0.0);
  CHECK(coal::metric_auc(Eigen::Vector4d::Zero(), y) == 0.5);
  // Brute-force pair count on random scores with ties.
  coal::Rng rng(3);
  std::uniform_int_distribution<int> d(0, 5);
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd sc(30), lab(30);
    for (int i = 0; i < 30; ++i) {
      sc[i] = d(rng);
      lab[i] = i % 3 == 0 ? 1.0 : -1.0;
    }
    double num = 0.0, den = 0.0;
    for (int i = 0; i < 30; ++i)
      for (int j = 0; j < 30; ++j)
        if (lab[i] > 0 && lab[j] < 0) {
          num += sc[i] > sc[j] ? 1.0 : sc[i] == sc[j] ? 0.5 : 0.0;
          den += 1.0;
        }
    CHECK(coal::metric_auc(sc, lab) == doctest::Approx(num / den).epsilon(1e-12));
  }
  const int n = 10000;
  Eigen::VectorXd sc = coal::standard_normal(rng, n), lab(n);
  std::bernoulli_distribution coin(0.5);
  for (int i = 0; i < n; ++i) lab[i] = coin(rng) ? 1.0 : -1.0;
  CHECK(std::abs(coal::metric_auc(sc, lab) - 0.5) < 0.02);
  try {
    coal::metric_auc(s, Eigen::Vector4d::Ones());
    FAIL("expected undefined_metric");
  } catch (const coal::Error& e) {
    CHECK(e.kind() == coal::ErrorKind::undefined_metric);
  }
}

TEST_CASE("metric and method names") {
  CHECK(coal::parse_metric("auc") == coal::MetricKind::auc);
  CHECK(coal::parse_metric(coal::to_string(coal::MetricKind::accuracy)) == coal::MetricKind::accuracy);
  CHECK_THROWS_AS(coal::parse_metric("f1"), coal::Error);
  for (const auto& m : coal::known_methods()) CHECK_NOTHROW(small_config(m));
}

TEST_CASE("experiment config parsing") {
  auto c = coal::parse_experiment_config(
      "# comment\ndata = x.json\nmethods = indp, coal-full\nscenario = noise\nscramble = 0, 0.5\n"
      "seeds = 3,4\nmetric = auc\nthreads = 2\n");
  CHECK(c.methods.size() == 2);
  CHECK(c.scenario == coal::ScenarioKind::noise);
  CHECK(c.scramble.size() == 2);
  CHECK(c.seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(c.metric == coal::MetricKind::auc);

  auto kind = [](const std::string& text) {
    try {
      coal::parse_experiment_config(text);
    } catch (const coal::Error& e) {
      return e.kind();
    }
    FAIL("expected an error");
    return coal::ErrorKind::io_error;
  };
  CHECK(kind("data = x\nmethods = svm\n") == coal::ErrorKind::invalid_argument);
  CHECK(kind("data = x\nmethods = indp\ncolour = red\n") == coal::ErrorKind::parse_error);
  CHECK(kind("data = x\nmethods = indp\nseeds = a\n") == coal::ErrorKind::parse_error);
  CHECK(kind("data = x\nmethods indp\n") == coal::ErrorKind::parse_error);
  CHECK(kind("methods = indp\n") == coal::ErrorKind::invalid_argument);
  CHECK(kind("data = x\nmethods = indp\nscenario = noise\n") == coal::ErrorKind::invalid_argument);
  CHECK(kind("data = x\nmethods = indp\nscenario = noise\nscramble = 1.5\n") == coal::ErrorKind::invalid_argument);
  CHECK(kind("data = x\nmethods = indp\nscenario = sideways\n") == coal::ErrorKind::invalid_argument);
  CHECK_THROWS_AS(coal::load_experiment_config("/nonexistent/coal.cfg"), coal::Error);
}

TEST_CASE("a minimal experiment gives one row per method, point and seed") {
  auto c = small_config("indp, pool, feda, coal-full");
  c.grid = {0, 10};
  auto table = coal::run_experiment(c);
  CHECK(table.rows.size() == 4 * 2 * 2);
  for (const auto& r : table.rows) {
    CHECK(r.value >= 0.0);
    CHECK(r.value <= 1.0);
    CHECK(r.newick.has_value() == (r.method == "coal-full"));
  }
  CHECK(table.rows.front().point == "all");
}

TEST_CASE("unscrambled noise runs equal the clean run") {
  auto clean = small_config("indp, coal-diag");
  auto noisy = clean;
  noisy.scenario = coal::ScenarioKind::noise;
  noisy.scramble = {0.0};
  auto a = coal::run_experiment(clean), b = coal::run_experiment(noisy);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) CHECK(a.rows[i].value == b.rows[i].value);
}

TEST_CASE("per-target scenario scores only the target") {
  auto c = small_config("indp");
  c.scenario = coal::ScenarioKind::per_target;
  c.target = 1;
  c.grid = {5};
  auto table = coal::run_experiment(c);
  CHECK(table.rows.size() == 2);
  CHECK(table.rows[0].scenario == "per-target");
  c.target = 7;
  CHECK_THROWS_AS(coal::run_experiment(c), coal::Error);
}

TEST_CASE("tables") {
  coal::ResultTable one{{{"indp", "all", "all", 0, coal::MetricKind::accuracy, 0.75, 1.0, std::nullopt}}};
  std::string text = coal::format_table(one);
  auto first_block = text.substr(0, text.find("\n\n"));
  CHECK(std::count(first_block.begin(), first_block.end(), '\n') == 1);
  CHECK(first_block.rfind("method\tscenario\tpoint\tseed\tmetric\tvalue\n", 0) == 0);

  coal::ResultTable t;
  for (int s = 0; s < 3; ++s)
    t.rows.push_back({"pool", "all", "20", static_cast<std::uint64_t>(s), coal::MetricKind::auc, 0.5 + 0.1 * s, 0.0, {}});
  auto dir = scratch("tables");
  coal::emit_table(t, dir / "a.tsv");
  coal::emit_table(t, dir / "b.tsv");
  CHECK(slurp(dir / "a.tsv") == slurp(dir / "b.tsv"));
  CHECK(slurp(dir / "a.tsv").find("pool\tall\t20\tauc\t3\t0.600000\t0.100000\n") != std::string::npos);
  // Wall times never reach the table.
  t.rows[0].seconds = 123.0;
  CHECK(coal::format_table(t) == slurp(dir / "a.tsv"));
  coal::emit_timings(t, dir / "timings.tsv");
  CHECK(slurp(dir / "timings.tsv").find("123.000000") != std::string::npos);
  CHECK_THROWS_AS(coal::format_table(coal::ResultTable{}), coal::Error);
  CHECK_THROWS_AS(coal::emit_table(t, "/nonexistent/dir/x.tsv"), coal::Error);
  fs::remove_all(dir);
}

TEST_CASE("repeated experiments are byte-identical") {
  auto c = small_config("coal-full, mtl-diag");
  c.threads = 3;
  auto d1 = scratch("repeat1"), d2 = scratch("repeat2");
  auto a = coal::run_experiment(c, d1);
  auto serial = c;
  serial.threads = 1;
  auto b = coal::run_experiment(serial, d2);
  CHECK(coal::format_table(a) == coal::format_table(b));
  int trees = 0;
  for (const auto& e : fs::directory_iterator(d1 / "trees")) {
    CHECK(slurp(e.path()) == slurp(d2 / "trees" / e.path().filename()));
    ++trees;
  }
  CHECK(trees == 4);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("checkpoint round trip") {
  coal::ModelConfig cfg;
  cfg.em_iters = 3;
  auto s = coal::sample_da(cfg, 3, 3, 30, 4, {});
  auto dir = scratch("ckpt");

  coal::Checkpoint da;
  da.config = cfg;
  da.da = coal::em_fit_da(s.train, cfg);
  coal::save_checkpoint(da, dir / "da.json");
  auto back = coal::load_checkpoint(dir / "da.json");
  REQUIRE(back.da.has_value());
  CHECK(back.iteration() == da.iteration());
  CHECK(coal::export_newick(back.tree()) == coal::export_newick(da.tree()));
  for (std::size_t k = 0; k < 3; ++k) CHECK((back.weights()[k] - da.weights()[k]).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(coal::checkpoint_to_json(back) == coal::checkpoint_to_json(da));

  coal::Checkpoint mtl;
  mtl.config = cfg;
  mtl.config.family = coal::ModelFamily::mtl;
  mtl.mtl = coal::em_fit_mtl(s.train, mtl.config);
  auto mback = coal::checkpoint_from_json(coal::checkpoint_to_json(mtl));
  REQUIRE(mback.mtl.has_value());
  CHECK((mback.mtl->R - mtl.mtl->R).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(coal::checkpoint_to_json(mback) == coal::checkpoint_to_json(mtl));

  CHECK_THROWS_AS(coal::checkpoint_from_json("{\"family\": 3"), coal::Error);
  CHECK_THROWS_AS(coal::load_checkpoint(dir / "missing.json"), coal::Error);
  fs::remove_all(dir);
}

TEST_CASE("strong sharing favours the coalescent model over independent fits") {
  coal::ExperimentConfig cfg = small_config("indp, coal-full");
  cfg.em_iters = 20;
  int wins = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    // Unit-scale shared root with little diffusion away from it.
    coal::Rng rng(coal::derive_seed(seed, 7));
    coal::DaSampleOptions opts;
    opts.lambda = coal::Covariance::identity(5, false, 0.05);
    opts.root_mean = coal::standard_normal(rng, 5);
    opts.n_test = 500;
    auto s = coal::sample_da(coal::ModelConfig{}, 6, 5, 30, coal::derive_seed(seed, 8), opts);
    auto accuracy = [&](const std::string& method) {
      auto w = coal::fit_method(method, s.train, cfg, seed).weights;
      double sum = 0.0;
      for (std::size_t k = 0; k < w.size(); ++k)
        sum += coal::metric_accuracy(coal::labels_from_scores(coal::decision_values(w[k], s.test[k].inputs)),
                                     s.test[k].labels);
      return sum / static_cast<double>(w.size());
    };
    if (accuracy("coal-full") >= accuracy("indp")) ++wins;
  }
  INFO("coal-full >= indp in " << wins << "/20 seeds");
  CHECK(wins >= 16);
}
