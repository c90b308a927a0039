#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coal/tree.hpp"

namespace coal {

enum class ModelFamily { da, mtl };

// full/diag: shape of the diffusion covariance. The +x variants also learn
// the tree from per-task input summaries; data builds the tree from the
// input summaries alone and freezes it.
enum class Variant { full, diag, full_x, diag_x, data };

enum class FeatureKind { continuous, discrete };

std::string_view to_string(ModelFamily f);
std::string_view to_string(Variant v);
ModelFamily parse_family(std::string_view s);
Variant parse_variant(std::string_view s);

inline bool models_inputs(Variant v) {
  return v == Variant::full_x || v == Variant::diag_x || v == Variant::data;
}
inline bool diagonal_lambda(Variant v) { return v == Variant::diag || v == Variant::diag_x; }

struct ModelConfig {
  ModelFamily family = ModelFamily::da;
  Variant variant = Variant::full;
  double sigma2 = 1.0;  // root prior scale
  double rho2 = 1.0;    // regression noise
  int em_iters = 20;
  double holdout = 0.1;  // 0 disables held-out iterate selection
  std::uint64_t seed = 0;
  // Input feature kinds for the input-modeling variants; empty means all continuous.
  std::vector<FeatureKind> feature_kinds;
  // When set, EM keeps these fixed instead of re-estimating them.
  std::optional<CoalescentTree> fixed_tree;
  std::optional<DiffusionCovariance> fixed_lambda;
};

void validate(const ModelConfig& cfg);

}  // namespace coal
