#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "hat/checkpoint.hpp"
#include "hat/config.hpp"
#include "hat/data.hpp"
#include "hat/metrics.hpp"
#include "hat/model.hpp"
#include "hat/schedule.hpp"

namespace hat {

/// Raised when the loss stops being finite; a snapshot is written first.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One optimizer step. id_loss and tri_loss include the backbone branch when
/// it is supervised, so total = id_loss + tri_loss + lambda * aux_total.
struct StepLog {
  int64_t epoch = 0;
  int64_t step = 0;
  double lr_base = 0;
  double lr_tfc = 0;
  double id_loss = 0;
  double tri_loss = 0;
  double aux_total = 0;
  double total = 0;
};

std::string csv_header();
std::string csv_row(const StepLog& s);

struct TrainOptions {
  std::string resume_from;         // checkpoint to continue from
  int64_t stop_after_epoch = 0;    // 0 runs to schedule.total_epochs
  bool write_outputs = true;       // CSV log, checkpoints, config snapshot
  bool verbose = false;            // one line per epoch on stderr
  std::function<void(int64_t epoch, HatModel<float>& model)> on_epoch_end;
};

struct TrainResult {
  std::unique_ptr<HatModel<float>> model;
  std::unique_ptr<Adam<float>> optimizer;
  std::vector<StepLog> log;
  int64_t last_epoch = 0;
  std::string last_checkpoint;
};

std::unique_ptr<HatModel<float>> build_model(const RunConfig& cfg, int64_t num_ids);

std::unique_ptr<Adam<float>> build_optimizer(const HatModel<float>& model, const RunConfig& cfg);

TrainResult train(const RunConfig& cfg, const data::DatasetSplits& splits, const TrainOptions& opts = {});

/// Rebuilds a model from a checkpoint using the configuration stored in it.
std::unique_ptr<HatModel<float>> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* cfg_out = nullptr);

struct FeatureSet {
  Tensor<float> backbone;  // (N, C4)
  Tensor<float> hat;       // (N, C_p)
};

/// Eval-mode features for every sample of a split.
FeatureSet extract_features(HatModel<float>& model, const data::Dataset& ds, const RunConfig& cfg);

/// concat | backbone-only | hat-only
Tensor<float> select_features(const FeatureSet& f, const std::string& mode);

std::vector<metrics::SampleMeta> sample_meta(const data::Dataset& ds);

/// Query/gallery retrieval with the configured feature mode.
metrics::EvalResult evaluate_model(HatModel<float>& model, const data::DatasetSplits& splits, const RunConfig& cfg);

/// Rank-1 of every training image retrieved against the rest of the training
/// set (same-camera matches are not excluded).
double train_rank1(HatModel<float>& model, const data::Dataset& train, const RunConfig& cfg);

}  // namespace hat
