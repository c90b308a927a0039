#include "coal/data_io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "coal/error.hpp"
#include "coal/newick.hpp"
#include "coal/random.hpp"

namespace coal {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io_error, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::io_error, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorKind::io_error, "write failed for " + path.string());
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

bool parse_number(std::string_view s, double& out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

[[noreturn]] void parse_fail(const std::string& name, std::size_t line, const std::string& msg) {
  throw Error(ErrorKind::parse_error, name + ":" + std::to_string(line) + ": " + msg);
}

// Raw labels as written; remapped once the whole task has been read.
void finish_labels(TaskDataset& task, const std::vector<std::size_t>& lines) {
  if (task.kind == TaskKind::regression) return;
  bool has_zero = false, has_neg = false;
  for (Eigen::Index i = 0; i < task.labels.size(); ++i) {
    double y = task.labels[i];
    if (y == 0.0) has_zero = true;
    else if (y == -1.0) has_neg = true;
    else if (y != 1.0)
      parse_fail(task.name, lines[static_cast<std::size_t>(i)], "unknown label symbol");
  }
  if (has_zero && has_neg) throw Error(ErrorKind::parse_error, task.name + ": labels mix 0 and -1");
  if (has_zero)
    for (Eigen::Index i = 0; i < task.labels.size(); ++i)
      task.labels[i] = task.labels[i] == 0.0 ? -1.0 : 1.0;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

std::vector<std::string_view> lines_of(const std::string& text) {
  std::vector<std::string_view> lines = split(text, '\n');
  return lines;
}

std::string label_text(double y, TaskKind kind) {
  if (kind == TaskKind::classification) return y > 0 ? "+1" : "-1";
  return format_double(y);
}

std::string dense_text(const TaskDataset& t) {
  std::string out = "label";
  for (Eigen::Index j = 0; j < t.dim(); ++j) out += ",f" + std::to_string(j + 1);
  out += '\n';
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    out += label_text(t.labels[i], t.kind);
    for (Eigen::Index j = 0; j < t.dim(); ++j) {
      out += ',';
      out += format_double(t.inputs(i, j));
    }
    out += '\n';
  }
  return out;
}

std::string sparse_text(const TaskDataset& t) {
  std::string out;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    out += label_text(t.labels[i], t.kind);
    for (Eigen::Index j = 0; j < t.dim(); ++j) {
      if (t.inputs(i, j) == 0.0) continue;
      out += ' ';
      out += std::to_string(j + 1);
      out += ':';
      out += format_double(t.inputs(i, j));
    }
    out += '\n';
  }
  return out;
}

Eigen::Index max_sparse_index(const std::string& text) {
  Eigen::Index best = 0;
  for (auto line : lines_of(text)) {
    line = trim(line);
    for (auto tok : split(line, ' ')) {
      auto colon = tok.find(':');
      if (colon == std::string_view::npos) continue;
      long long idx = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + colon, idx);
      if (ec == std::errc() && p == tok.data() + colon) best = std::max<Eigen::Index>(best, idx);
    }
  }
  return best;
}

}  // namespace

std::string_view to_string(DataFormat f) { return f == DataFormat::dense_csv ? "csv" : "sparse"; }

DataFormat parse_format(std::string_view s) {
  if (s == "csv" || s == "dense") return DataFormat::dense_csv;
  if (s == "sparse" || s == "libsvm") return DataFormat::sparse;
  throw Error(ErrorKind::invalid_argument, "unknown data format '" + std::string(s) + "'");
}

void ProblemBundle::validate() const {
  require(!tasks.empty(), ErrorKind::invalid_argument, "bundle has no tasks");
  require(names.size() == tasks.size(), ErrorKind::invalid_argument, "one name per task required");
  require(test_tasks.empty() || test_tasks.size() == tasks.size(), ErrorKind::invalid_argument,
          "test split must cover every task");
  require(holdout_fraction > 0.0 && holdout_fraction < 1.0, ErrorKind::invalid_argument,
          "holdout fraction must lie in (0,1)");
  for (const auto* group : {&tasks, &test_tasks})
    for (const auto& t : *group) {
      t.validate();
      require(t.dim() == feature_dim, ErrorKind::dimension_mismatch,
              "task '" + t.name + "' has inconsistent feature dimension");
    }
}

TaskDataset parse_dense_csv(const std::string& text, TaskKind kind, const std::string& name) {
  TaskDataset task;
  task.name = name;
  task.kind = kind;
  auto lines = lines_of(text);
  std::size_t header_line = 0;
  while (header_line < lines.size() && trim(lines[header_line]).empty()) ++header_line;
  if (header_line >= lines.size()) throw Error(ErrorKind::empty_task, name + ": empty task file");
  const std::size_t columns = split(trim(lines[header_line]), ',').size();
  if (columns < 1) parse_fail(name, header_line + 1, "header has no columns");
  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  std::vector<std::size_t> line_numbers;
  for (std::size_t li = header_line + 1; li < lines.size(); ++li) {
    auto line = trim(lines[li]);
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (cells.size() != columns)
      parse_fail(name, li + 1, "expected " + std::to_string(columns) + " columns, got " + std::to_string(cells.size()));
    double y = 0.0;
    if (!parse_number(cells[0], y)) parse_fail(name, li + 1, "unknown label symbol");
    std::vector<double> row(columns - 1);
    for (std::size_t j = 1; j < columns; ++j)
      if (!parse_number(cells[j], row[j - 1])) parse_fail(name, li + 1, "malformed value in column " + std::to_string(j + 1));
    rows.push_back(std::move(row));
    labels.push_back(y);
    line_numbers.push_back(li + 1);
  }
  if (rows.empty()) throw Error(ErrorKind::empty_task, name + ": task file has no examples");
  task.inputs.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(columns - 1));
  task.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    task.labels[static_cast<Eigen::Index>(i)] = labels[i];
    for (std::size_t j = 0; j + 1 < columns; ++j)
      task.inputs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  finish_labels(task, line_numbers);
  return task;
}

TaskDataset parse_sparse(const std::string& text, TaskKind kind, const std::string& name,
                         std::optional<Eigen::Index> dim) {
  TaskDataset task;
  task.name = name;
  task.kind = kind;
  const Eigen::Index d = dim ? *dim : max_sparse_index(text);
  struct Entry { Eigen::Index row, col; double v; };
  std::vector<Entry> entries;
  std::vector<double> labels;
  std::vector<std::size_t> line_numbers;
  auto lines = lines_of(text);
  for (std::size_t li = 0; li < lines.size(); ++li) {
    auto line = trim(lines[li]);
    if (line.empty() || line.front() == '#') continue;
    std::vector<std::string_view> toks;
    for (auto tok : split(line, ' '))
      for (auto t2 : split(tok, '\t'))
        if (!trim(t2).empty()) toks.push_back(trim(t2));
    double y = 0.0;
    if (!parse_number(toks[0], y)) parse_fail(name, li + 1, "unknown label symbol");
    const auto row = static_cast<Eigen::Index>(labels.size());
    for (std::size_t k = 1; k < toks.size(); ++k) {
      auto colon = toks[k].find(':');
      if (colon == std::string_view::npos) parse_fail(name, li + 1, "expected idx:val");
      long long idx = 0;
      auto [p, ec] = std::from_chars(toks[k].data(), toks[k].data() + colon, idx);
      if (ec != std::errc() || p != toks[k].data() + colon) parse_fail(name, li + 1, "malformed feature index");
      if (idx < 1 || idx > d) parse_fail(name, li + 1, "feature index out of range");
      double v = 0.0;
      if (!parse_number(toks[k].substr(colon + 1), v)) parse_fail(name, li + 1, "malformed feature value");
      entries.push_back({row, static_cast<Eigen::Index>(idx - 1), v});
    }
    labels.push_back(y);
    line_numbers.push_back(li + 1);
  }
  if (labels.empty()) throw Error(ErrorKind::empty_task, name + ": task file has no examples");
  task.inputs = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), d);
  task.labels = Eigen::Map<Eigen::VectorXd>(labels.data(), static_cast<Eigen::Index>(labels.size()));
  for (const auto& e : entries) task.inputs(e.row, e.col) = e.v;
  finish_labels(task, line_numbers);
  return task;
}

ProblemBundle load_problem(const fs::path& path, DataFormat format, TaskKind kind) {
  ProblemBundle bundle;
  std::vector<std::pair<std::string, fs::path>> train_files;
  std::vector<fs::path> test_files;
  std::optional<Eigen::Index> dim;

  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.is_regular_file()) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) train_files.emplace_back(f.stem().string(), f);
  } else {
    require(fs::exists(path), ErrorKind::io_error, "missing dataset: " + path.string());
    json manifest;
    try {
      manifest = json::parse(read_file(path));
      format = parse_format(manifest.value("format", std::string(to_string(format))));
      std::string k = manifest.value("kind", std::string("classification"));
      require(k == "classification" || k == "regression", ErrorKind::invalid_argument, "unknown task kind '" + k + "'");
      kind = k == "regression" ? TaskKind::regression : TaskKind::classification;
      if (manifest.contains("dim")) dim = manifest.at("dim").get<Eigen::Index>();
      bundle.holdout_fraction = manifest.value("holdout", 0.1);
      const fs::path base = path.parent_path();
      for (const auto& t : manifest.at("tasks")) {
        train_files.emplace_back(t.at("name").get<std::string>(), base / t.at("train").get<std::string>());
        if (t.contains("test")) test_files.push_back(base / t.at("test").get<std::string>());
      }
    } catch (const json::exception& e) {
      throw Error(ErrorKind::parse_error, path.string() + ": bad manifest: " + e.what());
    }
    require(test_files.empty() || test_files.size() == train_files.size(), ErrorKind::parse_error,
            "manifest must give a test file for every task or for none");
  }
  require(!train_files.empty(), ErrorKind::invalid_argument, "no task files found in " + path.string());

  if (format == DataFormat::sparse && !dim) {
    Eigen::Index d = 0;
    for (const auto& [name, f] : train_files) d = std::max(d, max_sparse_index(read_file(f)));
    for (const auto& f : test_files) d = std::max(d, max_sparse_index(read_file(f)));
    dim = d;
  }
  auto load = [&](const fs::path& f, const std::string& name) {
    std::string text = read_file(f);
    return format == DataFormat::dense_csv ? parse_dense_csv(text, kind, name) : parse_sparse(text, kind, name, dim);
  };
  for (std::size_t k = 0; k < train_files.size(); ++k) {
    auto t = load(train_files[k].second, train_files[k].first);
    t.task_id = static_cast<int>(k);
    bundle.names.push_back(train_files[k].first);
    bundle.tasks.push_back(std::move(t));
  }
  for (std::size_t k = 0; k < test_files.size(); ++k) {
    auto t = load(test_files[k], train_files[k].first);
    t.task_id = static_cast<int>(k);
    bundle.test_tasks.push_back(std::move(t));
  }
  bundle.feature_dim = bundle.tasks.front().dim();
  for (const auto* group : {&bundle.tasks, &bundle.test_tasks})
    for (const auto& t : *group)
      require(t.dim() == bundle.feature_dim, ErrorKind::dimension_mismatch,
              "task '" + t.name + "' has " + std::to_string(t.dim()) + " features, expected " +
                  std::to_string(bundle.feature_dim));
  bundle.validate();
  return bundle;
}

void save_problem(const ProblemBundle& bundle, const fs::path& dir, DataFormat format) {
  bundle.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::io_error, "cannot create " + dir.string());
  const std::string ext = format == DataFormat::dense_csv ? ".csv" : ".svm";
  json manifest;
  manifest["format"] = std::string(to_string(format));
  manifest["kind"] = bundle.tasks.front().kind == TaskKind::regression ? "regression" : "classification";
  manifest["dim"] = bundle.feature_dim;
  manifest["holdout"] = bundle.holdout_fraction;
  manifest["tasks"] = json::array();
  auto text_of = [&](const TaskDataset& t) { return format == DataFormat::dense_csv ? dense_text(t) : sparse_text(t); };
  for (std::size_t k = 0; k < bundle.tasks.size(); ++k) {
    json entry;
    entry["name"] = bundle.names[k];
    std::string train = "task" + std::to_string(k) + "_train" + ext;
    write_file(dir / train, text_of(bundle.tasks[k]));
    entry["train"] = train;
    if (!bundle.test_tasks.empty()) {
      std::string test = "task" + std::to_string(k) + "_test" + ext;
      write_file(dir / test, text_of(bundle.test_tasks[k]));
      entry["test"] = test;
    }
    manifest["tasks"].push_back(entry);
  }
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Eigen::MatrixXd PcaProjection::apply(const Eigen::MatrixXd& inputs) const {
  require(inputs.cols() == mean.size(), ErrorKind::dimension_mismatch, "PCA input dimension mismatch");
  return (inputs.rowwise() - mean.transpose()) * components;
}

PcaProjection fit_pca(const ProblemBundle& bundle, Eigen::Index target_dim) {
  const Eigen::Index d = bundle.feature_dim;
  require(target_dim >= 1 && target_dim <= d, ErrorKind::invalid_argument, "PCA target dimension must be in [1, D]");
  Eigen::Index n = 0;
  for (const auto& t : bundle.tasks) n += t.size();
  require(n > 0, ErrorKind::empty_task, "PCA needs training examples");
  Eigen::MatrixXd pooled(n, d);
  Eigen::Index row = 0;
  for (const auto& t : bundle.tasks) {
    pooled.middleRows(row, t.size()) = t.inputs;
    row += t.size();
  }
  PcaProjection pca;
  pca.mean = pooled.colwise().mean().transpose();
  Eigen::MatrixXd centered = pooled.rowwise() - pca.mean.transpose();
  Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(symmetrize(cov));
  // Eigen sorts ascending; flip to descending.
  pca.eigenvalues = es.eigenvalues().reverse();
  Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();
  pca.components = vecs.leftCols(target_dim);
  for (Eigen::Index c = 0; c < target_dim; ++c) {
    Eigen::Index arg = 0;
    pca.components.col(c).cwiseAbs().maxCoeff(&arg);
    if (pca.components(arg, c) < 0.0) pca.components.col(c) *= -1.0;
  }
  const double total = pca.eigenvalues.cwiseMax(0.0).sum();
  pca.retained_fraction = total > 0.0 ? pca.eigenvalues.head(target_dim).cwiseMax(0.0).sum() / total : 1.0;
  return pca;
}

ProblemBundle apply_pca(const ProblemBundle& bundle, const PcaProjection& pca) {
  ProblemBundle out = bundle;
  for (auto* group : {&out.tasks, &out.test_tasks})
    for (auto& t : *group) t.inputs = pca.apply(t.inputs);
  out.feature_dim = pca.components.cols();
  return out;
}

ProblemBundle pca_reduce(const ProblemBundle& bundle, Eigen::Index target_dim) {
  return apply_pca(bundle, fit_pca(bundle, target_dim));
}

TaskDataset select_rows(const TaskDataset& task, const std::vector<Eigen::Index>& rows) {
  TaskDataset out;
  out.name = task.name;
  out.task_id = task.task_id;
  out.kind = task.kind;
  out.inputs.resize(static_cast<Eigen::Index>(rows.size()), task.dim());
  out.labels.resize(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.inputs.row(static_cast<Eigen::Index>(i)) = task.inputs.row(rows[i]);
    out.labels[static_cast<Eigen::Index>(i)] = task.labels[rows[i]];
  }
  return out;
}

TaskDataset subsample(const TaskDataset& task, Eigen::Index n, std::uint64_t seed) {
  if (n >= task.size()) return task;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(task.size()));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(static_cast<std::size_t>(n));
  std::sort(idx.begin(), idx.end());
  return select_rows(task, idx);
}

HoldoutSplit split_holdout(const std::vector<TaskDataset>& tasks, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction < 1.0, ErrorKind::invalid_argument, "holdout fraction must lie in (0,1)");
  HoldoutSplit out;
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    const auto& t = tasks[k];
    const Eigen::Index n = t.size();
    require(n >= 2, ErrorKind::invalid_argument, "task '" + t.name + "' is too small to hold out an example");
    const auto target = std::clamp<Eigen::Index>(std::llround(fraction * static_cast<double>(n)), 1, n - 1);

    // Strata: one per label value for classification, a single one otherwise.
    std::vector<std::vector<Eigen::Index>> strata;
    if (t.kind == TaskKind::classification) {
      strata.resize(2);
      for (Eigen::Index i = 0; i < n; ++i) strata[t.labels[i] > 0 ? 1 : 0].push_back(i);
    } else {
      strata.resize(1);
      for (Eigen::Index i = 0; i < n; ++i) strata[0].push_back(i);
    }
    // Largest-remainder allocation of the held-out count across strata.
    std::vector<Eigen::Index> take(strata.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    Eigen::Index assigned = 0;
    for (std::size_t s = 0; s < strata.size(); ++s) {
      double exact = fraction * static_cast<double>(strata[s].size());
      take[s] = static_cast<Eigen::Index>(std::floor(exact));
      assigned += take[s];
      remainders.emplace_back(exact - std::floor(exact), s);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < target && r < remainders.size() * 2; ++r) {
      std::size_t s = remainders[r % remainders.size()].second;
      if (take[s] < static_cast<Eigen::Index>(strata[s].size())) {
        ++take[s];
        ++assigned;
      }
    }
    // One stream per task, restarted: identical tasks get identical splits.
    Rng rng(seed);
    std::vector<Eigen::Index> hold, train;
    for (std::size_t s = 0; s < strata.size(); ++s) {
      auto idx = strata[s];
      std::shuffle(idx.begin(), idx.end(), rng);
      hold.insert(hold.end(), idx.begin(), idx.begin() + take[s]);
      train.insert(train.end(), idx.begin() + take[s], idx.end());
    }
    require(!hold.empty() && !train.empty(), ErrorKind::invalid_argument,
            "task '" + t.name + "' is too small to hold out an example");
    std::sort(hold.begin(), hold.end());
    std::sort(train.begin(), train.end());
    out.train.push_back(select_rows(t, train));
    out.holdout.push_back(select_rows(t, hold));
  }
  return out;
}

TaskDataset scramble_task(const TaskDataset& task, double fraction, std::uint64_t seed) {
  require(fraction >= 0.0 && fraction <= 1.0, ErrorKind::invalid_argument, "scramble fraction must lie in [0,1]");
  TaskDataset out = task;
  const Eigen::Index d = task.dim(), n = task.size();
  const auto m = static_cast<Eigen::Index>(std::ceil(fraction * static_cast<double>(d) - 1e-9));
  if (m <= 0 || n < 2) return out;
  Rng rng(seed);
  std::vector<Eigen::Index> cols(static_cast<std::size_t>(d));
  std::iota(cols.begin(), cols.end(), Eigen::Index{0});
  std::shuffle(cols.begin(), cols.end(), rng);
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  for (Eigen::Index c = 0; c < m; ++c) {
    // Uniform derangement by rejection; acceptance probability is about 1/e.
    while (true) {
      std::iota(perm.begin(), perm.end(), Eigen::Index{0});
      std::shuffle(perm.begin(), perm.end(), rng);
      bool fixed_point = false;
      for (Eigen::Index i = 0; i < n && !fixed_point; ++i) fixed_point = perm[static_cast<std::size_t>(i)] == i;
      if (!fixed_point) break;
    }
    const Eigen::Index col = cols[static_cast<std::size_t>(c)];
    for (Eigen::Index i = 0; i < n; ++i) out.inputs(i, col) = task.inputs(perm[static_cast<std::size_t>(i)], col);
  }
  return out;
}

}  // namespace coal
