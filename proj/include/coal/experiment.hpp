#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coal/data_io.hpp"
#include "coal/metrics.hpp"

namespace coal {

enum class ScenarioKind { all_tasks, per_target, noise };

std::string_view to_string(ScenarioKind s);
ScenarioKind parse_scenario(std::string_view s);

// Flat key=value configuration; lists are comma-separated, '#' starts a
// comment. Either `data` (manifest or directory) or `synth` (da) is set.
struct ExperimentConfig {
  std::string data;
  DataFormat format = DataFormat::dense_csv;
  std::string synth;  // "da" for a sample_da bundle drawn per seed
  int synth_tasks = 6;
  Eigen::Index synth_dim = 5;
  Eigen::Index synth_n = 50;
  Eigen::Index synth_test = 200;
  double synth_lambda = 0.0;  // > 0 fixes the generating lambda to this multiple of I

  std::vector<std::string> methods;
  ScenarioKind scenario = ScenarioKind::all_tasks;
  std::vector<long> grid{0};  // training examples per task; 0 keeps every example
  int target = 0;             // per-target scenario
  int scramble_source = 0;    // noise scenario
  std::vector<double> scramble;  // noise scenario grid
  std::vector<std::uint64_t> seeds{0};
  MetricKind metric = MetricKind::accuracy;
  int em_iters = 20;
  double holdout = 0.1;
  double sigma2 = 1.0;
  double rho2 = 1.0;
  bool tune = false;
  Eigen::Index pca_dim = 0;
  std::string output;
  int threads = 1;
};

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

const std::vector<std::string>& known_methods();

struct ResultRow {
  std::string method;
  std::string scenario;
  std::string point;
  std::uint64_t seed = 0;
  MetricKind metric = MetricKind::accuracy;
  double value = 0.0;
  double seconds = 0.0;
  std::optional<std::string> newick;  // coalescent methods only
};

struct ResultTable {
  std::vector<ResultRow> rows;
};

// Fits every method at every grid point and seed. Writes Newick trees to
// artifact_dir/trees when artifact_dir is non-empty.
ResultTable run_experiment(const ExperimentConfig& config, const std::filesystem::path& artifact_dir = {});

// Fits one method on the given tasks and returns per-task test scores.
struct MethodFit {
  std::vector<Eigen::VectorXd> weights;
  std::optional<std::string> newick;
};
MethodFit fit_method(const std::string& method, const std::vector<TaskDataset>& train, const ExperimentConfig& config,
                     std::uint64_t seed);

// TSV with header `method scenario point seed metric value`, one line per
// row, then a summary block of mean and sample std over seeds.
std::string format_table(const ResultTable& table);
void emit_table(const ResultTable& table, const std::filesystem::path& path);
// Wall times, kept apart from the table so tables stay byte-stable.
void emit_timings(const ResultTable& table, const std::filesystem::path& path);

}  // namespace coal
