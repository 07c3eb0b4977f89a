#pragma once

#include <string>
#include <vector>

#include "hat/model.hpp"

namespace hat {

/// Channel-averaged TFC output of one active level for one image.
struct LevelMap {
  int level = 0;        // 1-based hierarchy level
  Tensor<float> map;    // (h, w)
};

/// Runs one normalized image (3, H, W) through the model in eval mode.
std::vector<LevelMap> aggregation_maps(HatModel<float>& model, const Tensor<float>& image);

/// Writes level<k>.png (min-max scaled grayscale; a constant map becomes mid
/// gray) and level<k>.csv (raw values) into `dir`. Returns the written paths.
std::vector<std::string> write_level_maps(const std::vector<LevelMap>& maps, const std::string& dir);

}  // namespace hat
