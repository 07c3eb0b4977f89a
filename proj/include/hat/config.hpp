#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hat/data.hpp"
#include "hat/losses.hpp"
#include "hat/model.hpp"
#include "hat/schedule.hpp"

namespace hat {

struct TrainConfig {
  int64_t checkpoint_every = 10;  // epochs; 0 keeps only the final checkpoint
  int64_t eval_batch = 64;
};

struct EvalConfig {
  std::string features = "concat";  // concat | backbone-only | hat-only
  bool l2_normalize = false;
  int64_t max_rank = 50;
};

/// Everything needed to reproduce a run. The class count is not configured;
/// it comes from the training split.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  data::SamplerConfig sampler;
  data::AugmentConfig augment;  // height/width follow model.backbone
  bool augment_enabled = true;
  std::string dataset;
  ScheduleConfig schedule;
  OptimConfig optim;
  TrainConfig train;
  EvalConfig eval;
  std::string output_dir = "runs/default";
  uint64_t seed = 0;
};

/// Dotted-key view of a configuration, e.g. {"dsa.depths": "3,3,6,0"}.
using FlatConfig = std::map<std::string, std::string>;

/// Every accepted key.
std::vector<std::string> config_keys();

FlatConfig flatten(const RunConfig& cfg);

/// Builds a config from defaults plus the given keys. Unknown keys, malformed
/// values and failed invariants are collected into `errors` (one per issue).
RunConfig from_flat(const FlatConfig& flat, std::vector<std::string>& errors);

/// Reads a YAML file (nested sections) into dotted keys.
FlatConfig read_config_file(const std::string& path);

/// Applies "key=value" overrides; malformed entries are reported in `errors`.
void apply_overrides(FlatConfig& flat, const std::vector<std::string>& overrides, std::vector<std::string>& errors);

/// Nested YAML text; read_config_file(write) round-trips.
std::string to_yaml(const RunConfig& cfg);

/// Stable 64-bit hash (hex) of the flattened configuration.
std::string config_hash(const RunConfig& cfg);

}  // namespace hat
