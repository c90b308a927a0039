#include "coal/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "coal/error.hpp"

namespace coal {

std::string_view to_string(MetricKind m) { return m == MetricKind::accuracy ? "accuracy" : "auc"; }

MetricKind parse_metric(std::string_view s) {
  if (s == "accuracy" || s == "acc") return MetricKind::accuracy;
  if (s == "auc" || s == "AUC") return MetricKind::auc;
  throw Error(ErrorKind::invalid_argument, "unknown metric '" + std::string(s) + "'");
}

double metric_accuracy(const Eigen::VectorXd& predicted, const Eigen::VectorXd& labels) {
  require(predicted.size() == labels.size(), ErrorKind::dimension_mismatch, "prediction and label counts differ");
  require(labels.size() > 0, ErrorKind::undefined_metric, "accuracy of an empty set is undefined");
  Eigen::Index correct = 0;
  for (Eigen::Index i = 0; i < labels.size(); ++i) correct += (predicted[i] > 0) == (labels[i] > 0);
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double metric_auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels) {
  require(scores.size() == labels.size(), ErrorKind::dimension_mismatch, "score and label counts differ");
  const Eigen::Index n = scores.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return scores[a] < scores[b]; });
  // Sum of positive ranks with tied blocks sharing their average rank.
  double rank_sum = 0.0;
  double n_pos = 0.0;
  for (Eigen::Index i = 0; i < n;) {
    Eigen::Index j = i;
    while (j < n && scores[order[static_cast<std::size_t>(j)]] == scores[order[static_cast<std::size_t>(i)]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (Eigen::Index t = i; t < j; ++t)
      if (labels[order[static_cast<std::size_t>(t)]] > 0) {
        rank_sum += avg_rank;
        n_pos += 1.0;
      }
    i = j;
  }
  const double n_neg = static_cast<double>(n) - n_pos;
  require(n_pos > 0 && n_neg > 0, ErrorKind::undefined_metric, "AUC needs both positive and negative examples");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

Eigen::VectorXd labels_from_scores(const Eigen::VectorXd& scores) {
  return scores.unaryExpr([](double s) { return s >= 0.0 ? 1.0 : -1.0; });
}

double evaluate_metric(MetricKind m, const Eigen::VectorXd& scores, const Eigen::VectorXd& labels) {
  return m == MetricKind::accuracy ? metric_accuracy(labels_from_scores(scores), labels) : metric_auc(scores, labels);
}

}  // namespace coal
