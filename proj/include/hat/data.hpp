#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hat/rng.hpp"
#include "hat/tensor.hpp"

namespace hat::data {

/// One image with its identity and camera. Synthetic samples carry the pixels
/// (3 x H x W, values in [0, 1]); folder samples carry a path.
struct Sample {
  std::string path;
  Tensor<float> image;
  int64_t identity = 0;  // -1 marks a distractor
  int64_t camera = 0;
};

struct Dataset {
  std::vector<Sample> samples;

  size_t size() const { return samples.size(); }
  std::vector<int64_t> identities() const;  // sorted distinct ids, distractors excluded
};

struct DatasetSplits {
  Dataset train;
  Dataset query;
  Dataset gallery;
  std::vector<std::string> warnings;
};

/// Maps raw identity ids to contiguous class indices [0, num_classes).
struct LabelMap {
  std::vector<int64_t> raw_ids;
  std::vector<int64_t> labels;  // per sample
  int64_t num_classes() const { return static_cast<int64_t>(raw_ids.size()); }
};
LabelMap make_label_map(const Dataset& ds);

// ---------------------------------------------------------------------------
// Parsing

struct ParsedName {
  int64_t identity;
  int64_t camera;
};

/// "<id>_c<cam>..." -> (id, cam). Returns nullopt for anything else.
std::optional<ParsedName> parse_market_name(const std::string& filename);

/// Reads bounding_box_train/, query/ and bounding_box_test/ under `root`.
/// Missing directories yield empty splits; unparsable files are skipped with a
/// warning. Distractors (-1) are dropped from train and query but kept in the
/// gallery.
DatasetSplits parse_market_folder(const std::string& root);

// ---------------------------------------------------------------------------
// Synthetic data

struct SynthSpec {
  int64_t num_ids = 16;
  int64_t per_id = 8;
  uint64_t seed = 0;
};

/// Parses "synth://num_ids/per_id/seed".
std::optional<SynthSpec> parse_synth_uri(const std::string& uri);

/// Deterministic identity dataset: each identity has its own colours and
/// garment pattern; samples jitter position, brightness (per camera) and
/// pixel noise. Cameras cycle through 0..5.
Dataset synth_dataset(int64_t num_ids, int64_t per_id, int64_t height, int64_t width, uint64_t seed);

/// Train split from synth_dataset plus a held-out query/gallery split of the
/// same identities drawn from an independent noise stream (2 queries on
/// cameras 0-1 and 4 gallery images on cameras 2-5 per identity).
DatasetSplits synth_splits(const SynthSpec& spec, int64_t height, int64_t width);

/// Resolves a dataset reference: synth:// URI or a Market-style folder.
DatasetSplits load_splits(const std::string& ref, int64_t height, int64_t width);

// ---------------------------------------------------------------------------
// Images and augmentation

/// Loads an image file as RGB float in [0, 1], resized to (height, width).
Tensor<float> load_image(const std::string& path, int64_t height, int64_t width);

/// Bilinear resize of a (3 x H x W) image.
Tensor<float> resize_image(const Tensor<float>& img, int64_t height, int64_t width);

Tensor<float> horizontal_flip(const Tensor<float>& img);

struct AugmentConfig {
  int64_t height = 256;
  int64_t width = 128;
  int64_t pad = 10;
  double flip_prob = 0.5;
  double erase_prob = 0.5;
  double erase_area_min = 0.02;
  double erase_area_max = 0.4;
  double erase_aspect_min = 0.3;
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> stddev{0.229f, 0.224f, 0.225f};
  // Value written into erased pixels (normalized space), per channel.
  std::array<float, 3> erase_fill{0.485f, 0.456f, 0.406f};
};

/// Where random erasing struck, if it did.
struct EraseRegion {
  int64_t top = 0, left = 0, height = 0, width = 0;
};

/// Training: resize -> pad + random crop -> flip -> normalize -> random
/// erasing. Eval: resize -> normalize.
Tensor<float> augment(const Tensor<float>& image, const AugmentConfig& cfg, bool training, Rng& rng,
                      EraseRegion* erased = nullptr);

Tensor<float> normalize(const Tensor<float>& image, const AugmentConfig& cfg);

/// In-place random erasing on a normalized image; returns the region or nullopt.
std::optional<EraseRegion> random_erase(Tensor<float>& image, const AugmentConfig& cfg, Rng& rng);

/// Raw pixels of a sample at the configured size (loads from disk if needed).
Tensor<float> sample_pixels(const Sample& s, int64_t height, int64_t width);

// ---------------------------------------------------------------------------
// PK sampling

struct SamplerConfig {
  int64_t ids_per_batch = 16;  // P_ids
  int64_t per_id = 4;          // L
  int64_t batch_size() const { return ids_per_batch * per_id; }
};

/// Identity-balanced batches: every batch holds exactly P_ids distinct
/// identities with L samples each. Identities with fewer than L samples are
/// topped up with replacement.
class PkSampler {
 public:
  PkSampler(std::vector<int64_t> labels, SamplerConfig cfg);

  /// Sample indices for every batch of one epoch; depends only on (seed, epoch).
  std::vector<std::vector<int64_t>> epoch_batches(uint64_t seed, int64_t epoch) const;

  const SamplerConfig& config() const { return cfg_; }

 private:
  std::vector<int64_t> labels_;
  std::vector<std::vector<int64_t>> by_class_;
  SamplerConfig cfg_;
};

struct LabeledBatch {
  Tensor<float> images;          // (B, 3, H, W), normalized
  std::vector<int64_t> labels;   // class indices
  std::vector<int64_t> cameras;
};

/// Assembles a batch; each sample's augmentation stream is derived from
/// (seed, epoch, batch, position) so the result is schedule-independent.
LabeledBatch make_batch(const Dataset& ds, const std::vector<int64_t>& labels, const std::vector<int64_t>& indices,
                        const AugmentConfig& cfg, bool training, uint64_t seed, int64_t epoch, int64_t batch_index);

/// Eval-mode tensors for a whole split, chunked.
Tensor<float> eval_images(const Dataset& ds, const AugmentConfig& cfg, size_t begin, size_t end);

}  // namespace hat::data
