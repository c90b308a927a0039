#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "coal/config.hpp"
#include "coal/da_model.hpp"
#include "coal/data_io.hpp"
#include "coal/mtl_model.hpp"

namespace coal {

// A fitted model on disk: exactly one of da/mtl is set.
struct Checkpoint {
  ModelConfig config;
  std::optional<DaParams> da;
  std::optional<MtlParams> mtl;
  std::optional<PcaProjection> pca;

  const CoalescentTree& tree() const;
  std::vector<Eigen::VectorXd> weights() const;
  int iteration() const;
};

// JSON with node ids, parents, children, times, names, and states/messages
// where present.
std::string tree_to_json(const CoalescentTree& tree, int indent = 2);

std::string checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const std::string& text);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace coal
