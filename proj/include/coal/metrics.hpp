#pragma once

#include <string_view>

#include <Eigen/Dense>

namespace coal {

enum class MetricKind { accuracy, auc };

std::string_view to_string(MetricKind m);
MetricKind parse_metric(std::string_view s);

// Fraction of entries where the predicted +1/-1 label equals the true label.
double metric_accuracy(const Eigen::VectorXd& predicted, const Eigen::VectorXd& labels);
// Mann-Whitney statistic: P(score of a positive > score of a negative),
// ties counted half. Throws undefined_metric unless both classes occur.
double metric_auc(const Eigen::VectorXd& scores, const Eigen::VectorXd& labels);

// sign of a real-valued score, with 0 mapped to +1 (probability 0.5).
Eigen::VectorXd labels_from_scores(const Eigen::VectorXd& scores);

double evaluate_metric(MetricKind m, const Eigen::VectorXd& scores, const Eigen::VectorXd& labels);

}  // namespace coal
