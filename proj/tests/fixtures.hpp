#pragma once

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "hat/config.hpp"

namespace hat::test {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hat_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// A model small enough to train for a few epochs inside a unit test.
inline FlatConfig tiny_flat(const std::string& output_dir) {
  return {{"backbone.image_height", "64"},  {"backbone.image_width", "32"},
          {"backbone.stage_channels", "8,8,16,16"},
          {"backbone.common_channels", "8"}, {"backbone.scaling_divisor", "16"},
          {"tfc.heads", "4"},                {"tfc.ffn_ratio", "2"},
          {"dsa.depths", "3,3,6,0"},         {"data.dataset", "synth://4/4/0"},
          {"data.ids_per_batch", "4"},       {"data.per_id", "2"},
          {"schedule.warmup_epochs", "2"},   {"schedule.total_epochs", "2"},
          {"train.checkpoint_every", "1"},   {"output_dir", output_dir}};
}

inline RunConfig tiny_config(const std::string& output_dir) {
  std::vector<std::string> errors;
  RunConfig cfg = from_flat(tiny_flat(output_dir), errors);
  if (!errors.empty()) throw ConfigError(errors.front());
  return cfg;
}

}  // namespace hat::test
