#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "hat/inspect.hpp"
#include "hat/training.hpp"
#include "test_util.hpp"

using namespace hat;
namespace fs = std::filesystem;

namespace {

TrainOptions stop_after(int64_t epoch) {
  TrainOptions o;
  o.stop_after_epoch = epoch;
  return o;
}

TrainOptions resume(const std::string& path) {
  TrainOptions o;
  o.resume_from = path;
  return o;
}

TrainOptions no_outputs() {
  TrainOptions o;
  o.write_outputs = false;
  return o;
}

data::DatasetSplits tiny_splits(const RunConfig& cfg) {
  return data::load_splits(cfg.dataset, cfg.model.backbone.image_height, cfg.model.backbone.image_width);
}

bool same_arrays(const Checkpoint& a, const Checkpoint& b) {
  if (a.arrays.size() != b.arrays.size()) return false;
  for (const auto& [k, t] : a.arrays) {
    auto it = b.arrays.find(k);
    if (it == b.arrays.end() || it->second.shape() != t.shape() || it->second.vec() != t.vec()) return false;
  }
  return true;
}

bool same_logs(const std::vector<StepLog>& a, const std::vector<StepLog>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i)
    if (csv_row(a[i]) != csv_row(b[i])) return false;
  return true;
}

}  // namespace

TEST_CASE("lr group split") {
  RunConfig cfg = test::tiny_config("unused");
  auto model = build_model(cfg, 4);
  int64_t tfc = 0, other = 0;
  for (const auto& [name, p] : model->named_parameters()) {
    if (HatModel<float>::is_tfc_parameter(name)) {
      CHECK(name.rfind("dsa.", 0) == 0);
      ++tfc;
    } else {
      ++other;
    }
  }
  CHECK(tfc > 0);
  CHECK(other > 0);
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = test::temp_dir("ckpt");
  RunConfig cfg = test::tiny_config(dir.string());
  auto model = build_model(cfg, 4);
  auto adam = build_optimizer(*model, cfg);
  const Checkpoint ckpt = capture_checkpoint(*model, adam.get(), 3, cfg);
  const std::string a = (dir / "a.ckpt").string(), b = (dir / "b.ckpt").string();
  save_checkpoint(a, ckpt);
  CHECK_FALSE(fs::exists(a + ".tmp"));

  const Checkpoint loaded = load_checkpoint(a);
  CHECK(loaded.epoch == 3);
  CHECK(loaded.num_ids == 4);
  CHECK(loaded.config_hash == config_hash(cfg));
  CHECK(same_arrays(ckpt, loaded));
  save_checkpoint(b, loaded);
  CHECK(test::read_file(a) == test::read_file(b));

  // Restoring into a fresh model reproduces the arrays.
  RunConfig other = cfg;
  other.seed = 99;
  auto fresh = build_model(other, 4);
  auto fresh_adam = build_optimizer(*fresh, other);
  restore_checkpoint(loaded, *fresh, fresh_adam.get());
  CHECK(same_arrays(capture_checkpoint(*fresh, fresh_adam.get(), 3, cfg), ckpt));

  RunConfig from_file;
  auto rebuilt = model_from_checkpoint(loaded, &from_file);
  CHECK(config_hash(from_file) == config_hash(cfg));

  const std::string bytes = test::read_file(a);
  auto write_variant = [&](const std::string& name, std::string content) {
    const auto p = (dir / name).string();
    std::ofstream(p, std::ios::binary) << content;
    return p;
  };
  std::string bad_version = bytes;
  bad_version[8] = static_cast<char>(kCheckpointVersion + 1);
  CHECK_THROWS_AS(load_checkpoint(write_variant("version.ckpt", bad_version)), CheckpointError);
  std::string flipped = bytes;
  flipped[flipped.size() - 20] ^= 0x5a;
  CHECK_THROWS_AS(load_checkpoint(write_variant("flipped.ckpt", flipped)), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(write_variant("short.ckpt", bytes.substr(0, bytes.size() / 2))), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(write_variant("magic.ckpt", "NOTACKPT" + bytes.substr(8))), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), CheckpointError);
  fs::remove_all(dir);
}

TEST_CASE("checkpoint refuses a different hierarchy") {
  RunConfig cfg = test::tiny_config("unused");
  auto source = build_model(cfg, 4);
  const Checkpoint ckpt = capture_checkpoint(*source, nullptr, 1, cfg);
  RunConfig other = cfg;
  other.model.dsa.depths = {0, 0, 12, 0};
  auto target = build_model(other, 4);
  std::string message;
  try {
    restore_checkpoint(ckpt, *target, nullptr);
  } catch (const CheckpointError& e) {
    message = e.what();
  }
  REQUIRE_FALSE(message.empty());
  CHECK(message.find("dsa.level1") != std::string::npos);
  CHECK(message.find("missing") != std::string::npos);

  // Identity count mismatch shows up as a shape disagreement.
  auto wider = build_model(cfg, 5);
  CHECK_THROWS_AS(restore_checkpoint(ckpt, *wider, nullptr), CheckpointError);
}

TEST_CASE("backbone weight import") {
  const auto dir = test::temp_dir("import");
  RunConfig cfg = test::tiny_config(dir.string());
  auto source = build_model(cfg, 4);
  const std::string path = (dir / "src.ckpt").string();
  save_checkpoint(path, capture_checkpoint(*source, nullptr, 0, cfg));
  RunConfig other = cfg;
  other.seed = 5;
  auto target = build_model(other, 4);
  CHECK(load_backbone_weights(*target, path) > 0);
  const auto a = source->backbone().named_parameters();
  const auto b = target->backbone().named_parameters();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.value().vec() == b[i].second.value().vec());
  fs::remove_all(dir);
}

TEST_CASE("training is reproducible and resumable") {
  const auto dir = test::temp_dir("resume");
  RunConfig cfg = test::tiny_config((dir / "full").string());
  cfg.schedule.total_epochs = 3;
  const auto splits = tiny_splits(cfg);
  TrainResult full = train(cfg, splits);
  REQUIRE(full.last_epoch == 3);
  const int64_t per_epoch = static_cast<int64_t>(full.log.size()) / 3;
  CHECK(per_epoch >= 1);
  for (const auto& row : full.log) {
    CHECK(std::isfinite(row.total));
    CHECK(row.total == doctest::Approx(row.id_loss + row.tri_loss + cfg.loss.lambda * row.aux_total).epsilon(1e-5));
  }
  CHECK(fs::exists(dir / "full" / "checkpoints" / "epoch_0001.ckpt"));
  CHECK(fs::exists(dir / "full" / "checkpoints" / "last.ckpt"));
  CHECK(fs::exists(dir / "full" / "config.yaml"));

  TrainResult again = train(cfg, splits, no_outputs());
  CHECK(same_logs(full.log, again.log));

  RunConfig split_cfg = cfg;
  split_cfg.output_dir = (dir / "split").string();
  TrainResult first = train(split_cfg, splits, stop_after(1));
  CHECK(first.last_epoch == 1);
  TrainResult second = train(split_cfg, splits, resume(first.last_checkpoint));
  CHECK(second.last_epoch == 3);
  std::vector<StepLog> joined = first.log;
  joined.insert(joined.end(), second.log.begin(), second.log.end());
  CHECK(same_logs(full.log, joined));
  CHECK(test::read_file(dir / "full" / "train_log.csv") == test::read_file(dir / "split" / "train_log.csv"));
  CHECK(same_arrays(capture_checkpoint(*full.model, full.optimizer.get(), 3, cfg),
                    capture_checkpoint(*second.model, second.optimizer.get(), 3, cfg)));

  // Backbone-only and concatenated features rank the gallery differently.
  const auto q = extract_features(*full.model, splits.query, cfg);
  const auto g = extract_features(*full.model, splits.gallery, cfg);
  const auto d_bb = metrics::distance_matrix(select_features(q, "backbone-only"), select_features(g, "backbone-only"));
  const auto d_cat = metrics::distance_matrix(select_features(q, "concat"), select_features(g, "concat"));
  bool differs = false;
  for (int64_t i = 0; i < d_bb.dim(0) && !differs; ++i) {
    std::vector<int64_t> a(static_cast<size_t>(d_bb.dim(1))), b(a.size());
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), 0);
    std::stable_sort(a.begin(), a.end(), [&](int64_t x, int64_t y) { return d_bb.at({i, x}) < d_bb.at({i, y}); });
    std::stable_sort(b.begin(), b.end(), [&](int64_t x, int64_t y) { return d_cat.at({i, x}) < d_cat.at({i, y}); });
    differs = a != b;
  }
  CHECK(differs);

  const auto r = evaluate_model(*full.model, splits, cfg);
  CHECK(r.num_valid_queries > 0);
  const double rank1 = train_rank1(*full.model, splits.train, cfg);
  CHECK(rank1 >= 0.0);
  CHECK(rank1 <= 1.0);
  fs::remove_all(dir);
}

TEST_CASE("feature selection modes") {
  FeatureSet f{Tensor<float>({2, 3}, 1.0f), Tensor<float>({2, 2}, 2.0f)};
  CHECK(select_features(f, "concat").shape() == Shape{2, 5});
  CHECK(select_features(f, "backbone-only").shape() == Shape{2, 3});
  CHECK(select_features(f, "hat-only").shape() == Shape{2, 2});
  CHECK_THROWS_AS(select_features(f, "both"), ConfigError);
}

TEST_CASE("aggregation maps") {
  const auto dir = test::temp_dir("inspect");
  RunConfig cfg = test::tiny_config(dir.string());
  auto model = build_model(cfg, 4);
  Tensor<float> zero({3, 64, 32});
  auto maps = aggregation_maps(*model, zero);
  REQUIRE(maps.size() == 3);
  for (size_t i = 0; i < maps.size(); ++i) {
    CHECK(maps[i].level == static_cast<int>(i) + 1);
    CHECK(maps[i].map.shape() == Shape{4, 2});
    for (float v : maps[i].map.vec()) CHECK(std::isfinite(v));
  }
  auto again = aggregation_maps(*model, zero);
  for (size_t i = 0; i < maps.size(); ++i) CHECK(again[i].map.vec() == maps[i].map.vec());

  const auto paths = write_level_maps(maps, dir.string());
  CHECK(paths.size() == 6);
  for (const auto& p : paths) CHECK(fs::exists(p));

  Rng rng(4);
  auto other = aggregation_maps(*model, test::random_tensor<float>({3, 64, 32}, rng));
  CHECK(max_abs_diff(other[0].map, maps[0].map) > 0.0f);
  CHECK_THROWS(aggregation_maps(*model, Tensor<float>({3, 32, 32})));
  fs::remove_all(dir);
}
