#pragma once

// Checkpoint container:
//   8 bytes   magic "HATCKPT\0"
//   u32       format version
//   u64       manifest length, then the manifest (JSON): format_version,
//             config_hash, config, epoch, optimizer_step, num_ids, rng, and
//             one entry {key, shape, offset, count} per array
//   payload   float32 arrays back to back, in manifest order
//   u64       FNV-1a of the payload
// Array keys are prefixed param/, buffer/, adam_m/ or adam_v/ followed by the
// dotted module path.

#include <map>
#include <stdexcept>
#include <string>

#include "hat/config.hpp"
#include "hat/model.hpp"
#include "hat/schedule.hpp"

namespace hat {

inline constexpr uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  int64_t epoch = 0;
  int64_t optimizer_step = 0;
  int64_t num_ids = 0;
  uint64_t seed = 0;
  std::string config_hash;
  FlatConfig config;
  std::map<std::string, Tensor<float>> arrays;
};

Checkpoint capture_checkpoint(const HatModel<float>& model, const Adam<float>* optimizer, int64_t epoch,
                              const RunConfig& cfg);

/// Copies parameters, buffers and (if given) optimizer moments into place.
/// Any key or shape disagreement raises CheckpointError with a keyed report.
void restore_checkpoint(const Checkpoint& ckpt, HatModel<float>& model, Adam<float>* optimizer);

/// Writes to `path.tmp` and renames over `path`.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);

Checkpoint load_checkpoint(const std::string& path);

/// Weight-import hook: copies every backbone.* parameter and buffer found in
/// the file into the model's backbone. Returns the number of arrays copied.
int64_t load_backbone_weights(HatModel<float>& model, const std::string& path);

}  // namespace hat
