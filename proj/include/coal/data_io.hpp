#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coal/glm.hpp"

namespace coal {

struct ProblemBundle {
  std::vector<TaskDataset> tasks;       // training data, one entry per task
  std::vector<TaskDataset> test_tasks;  // empty, or aligned with tasks
  double holdout_fraction = 0.1;
  Eigen::Index feature_dim = 0;
  std::vector<std::string> names;

  int num_tasks() const { return static_cast<int>(tasks.size()); }
  void validate() const;
};

// dense_csv: header row, first column is the label.
// sparse: "label idx:val ..." with 1-based indices.
enum class DataFormat { dense_csv, sparse };

std::string_view to_string(DataFormat f);
DataFormat parse_format(std::string_view s);

// `path` is either a JSON manifest or a directory holding one file per task
// (sorted by file name, task name = file stem, no test split).
//
// Manifest keys: format ("csv" | "sparse"), kind ("classification" |
// "regression"), optional dim, optional holdout, and tasks: a list of
// {name, train, test?} with paths relative to the manifest.
//
// Classification labels may be +1/-1 or 0/1; 0/1 is remapped to -1/+1.
ProblemBundle load_problem(const std::filesystem::path& path, DataFormat format = DataFormat::dense_csv,
                           TaskKind kind = TaskKind::classification);

// Writes one file per task split plus manifest.json into `dir`.
void save_problem(const ProblemBundle& bundle, const std::filesystem::path& dir, DataFormat format);

// Parsers for a single task file's contents. `dim` fixes D for sparse data;
// otherwise D is the largest index seen.
TaskDataset parse_dense_csv(const std::string& text, TaskKind kind, const std::string& name);
TaskDataset parse_sparse(const std::string& text, TaskKind kind, const std::string& name,
                         std::optional<Eigen::Index> dim);

struct PcaProjection {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // D x target_dim, columns by decreasing variance
  Eigen::VectorXd eigenvalues;  // all D, decreasing
  double retained_fraction = 1.0;

  Eigen::MatrixXd apply(const Eigen::MatrixXd& inputs) const;
};

// Fit on the pooled, centered training inputs of every task.
PcaProjection fit_pca(const ProblemBundle& bundle, Eigen::Index target_dim);
ProblemBundle apply_pca(const ProblemBundle& bundle, const PcaProjection& pca);
ProblemBundle pca_reduce(const ProblemBundle& bundle, Eigen::Index target_dim);

struct HoldoutSplit {
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> holdout;
};

// Per-task split, label-stratified for classification. Every task must keep
// at least one training and one held-out example.
HoldoutSplit split_holdout(const std::vector<TaskDataset>& tasks, double fraction, std::uint64_t seed);

// Permutes the rows of ceil(fraction * D) randomly chosen feature columns,
// each by its own random derangement. Labels are untouched.
TaskDataset scramble_task(const TaskDataset& task, double fraction, std::uint64_t seed);

TaskDataset select_rows(const TaskDataset& task, const std::vector<Eigen::Index>& rows);
// The first n rows of a seeded permutation (all rows when n >= size).
TaskDataset subsample(const TaskDataset& task, Eigen::Index n, std::uint64_t seed);

}  // namespace coal
