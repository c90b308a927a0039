#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "coal/tree.hpp"

namespace coal {

// Newick with branch lengths equal to parent/child time gaps. Names that
// contain whitespace or Newick punctuation are single-quoted.
std::string export_newick(const CoalescentTree& tree);

// Parses an ultrametric Newick tree; leaves are placed at time 0. When
// task_names is given, leaf k of the result is the leaf with that name;
// otherwise leaves are numbered in order of appearance.
CoalescentTree parse_newick(std::string_view text,
                            const std::optional<std::vector<std::string>>& task_names = std::nullopt);

std::string format_double(double v);

}  // namespace coal
