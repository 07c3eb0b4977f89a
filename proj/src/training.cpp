#include "hat/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace hat {

namespace fs = std::filesystem;

std::string csv_header() { return "epoch,step,lr_base,lr_tfc,id_loss,tri_loss,aux_total,total"; }

std::string csv_row(const StepLog& s) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(s.epoch),
                static_cast<long long>(s.step), s.lr_base, s.lr_tfc, s.id_loss, s.tri_loss, s.aux_total, s.total);
  return buf;
}

std::unique_ptr<HatModel<float>> build_model(const RunConfig& cfg, int64_t num_ids) {
  ModelConfig mc = cfg.model;
  mc.num_ids = num_ids;
  Rng rng(derive_seed({cfg.seed, 0x1417}));
  return std::make_unique<HatModel<float>>(mc, rng);
}

std::unique_ptr<Adam<float>> build_optimizer(const HatModel<float>& model, const RunConfig& cfg) {
  return std::make_unique<Adam<float>>(model.named_parameters(), cfg.optim, &HatModel<float>::is_tfc_parameter);
}

namespace {

std::string checkpoint_name(int64_t epoch) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "epoch_%04lld.ckpt", static_cast<long long>(epoch));
  return buf;
}

StepLog make_log(int64_t epoch, int64_t step, const GroupRates& rates, const LossReport& r) {
  StepLog s;
  s.epoch = epoch;
  s.step = step;
  s.lr_base = rates.base;
  s.lr_tfc = rates.tfc;
  s.id_loss = r.id_loss + r.mfe_id_loss;
  s.tri_loss = r.triplet_loss + r.mfe_triplet_loss;
  s.aux_total = r.aux_total();
  s.total = r.total;
  return s;
}

std::string describe(const LossReport& r) {
  std::ostringstream os;
  os << "id=" << r.id_loss << " tri=" << r.triplet_loss << " mfe_id=" << r.mfe_id_loss
     << " mfe_tri=" << r.mfe_triplet_loss << " aux=[";
  for (size_t i = 0; i < r.aux_losses.size(); ++i) os << (i ? "," : "") << r.aux_losses[i];
  os << "] total=" << r.total;
  return os.str();
}

}  // namespace

TrainResult train(const RunConfig& cfg, const data::DatasetSplits& splits, const TrainOptions& opts) {
  if (splits.train.size() == 0) throw InputError("training split is empty");
  const data::LabelMap labels = data::make_label_map(splits.train);
  data::PkSampler sampler(labels.labels, cfg.sampler);

  TrainResult result;
  result.model = build_model(cfg, labels.num_classes());
  result.optimizer = build_optimizer(*result.model, cfg);
  HatModel<float>& model = *result.model;
  Adam<float>& adam = *result.optimizer;

  int64_t start_epoch = 1;
  if (!opts.resume_from.empty()) {
    const Checkpoint ckpt = load_checkpoint(opts.resume_from);
    restore_checkpoint(ckpt, model, &adam);
    start_epoch = ckpt.epoch + 1;
  }
  const int64_t last_epoch = opts.stop_after_epoch > 0 ? std::min(opts.stop_after_epoch, cfg.schedule.total_epochs)
                                                       : cfg.schedule.total_epochs;

  const fs::path out_dir(cfg.output_dir);
  std::ofstream csv;
  if (opts.write_outputs) {
    fs::create_directories(out_dir / "checkpoints");
    std::ofstream(out_dir / "config.yaml") << to_yaml(cfg);
    const fs::path csv_path = out_dir / "train_log.csv";
    const bool append = !opts.resume_from.empty() && fs::exists(csv_path);
    csv.open(csv_path, append ? std::ios::app : std::ios::trunc);
    if (!append) csv << csv_header() << "\n";
  }

  model.set_training(true);
  int64_t step = adam.step_count();
  for (int64_t epoch = start_epoch; epoch <= last_epoch; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const GroupRates rates = lr_at(epoch, cfg.schedule);
    const auto batches = sampler.epoch_batches(cfg.seed, epoch);
    double epoch_total = 0;
    for (size_t b = 0; b < batches.size(); ++b) {
      data::LabeledBatch batch = data::make_batch(splits.train, labels.labels, batches[b], cfg.augment,
                                                  cfg.augment_enabled, cfg.seed, epoch, static_cast<int64_t>(b));
      Var<float> images(std::move(batch.images));
      ModelOutput<float> out = model.forward(images);
      TotalLoss<float> loss = model.loss(out, batch.labels, cfg.loss);
      if (!std::isfinite(loss.report.total)) {
        std::string where = "epoch " + std::to_string(epoch) + " batch " + std::to_string(b);
        if (opts.write_outputs) {
          const std::string snap = (out_dir / "diverged.ckpt").string();
          save_checkpoint(snap, capture_checkpoint(model, &adam, epoch - 1, cfg));
          where += ", snapshot " + snap;
        }
        throw TrainingError("non-finite loss at " + where + ": " + describe(loss.report));
      }
      model.zero_grad();
      loss.value.backward();
      adam.step(rates);
      ++step;
      const StepLog row = make_log(epoch, step, rates, loss.report);
      epoch_total += row.total;
      result.log.push_back(row);
      if (csv.is_open()) csv << csv_row(row) << "\n";
    }
    if (csv.is_open()) csv.flush();
    result.last_epoch = epoch;

    if (opts.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "epoch %lld  loss %.4f  lr %.3g  %.1fs\n", static_cast<long long>(epoch),
                   epoch_total / static_cast<double>(batches.size()), rates.base, secs);
    }
    if (opts.write_outputs) {
      const bool periodic = cfg.train.checkpoint_every > 0 && epoch % cfg.train.checkpoint_every == 0;
      if (periodic || epoch == last_epoch) {
        const Checkpoint ckpt = capture_checkpoint(model, &adam, epoch, cfg);
        if (periodic) save_checkpoint((out_dir / "checkpoints" / checkpoint_name(epoch)).string(), ckpt);
        result.last_checkpoint = (out_dir / "checkpoints" / "last.ckpt").string();
        save_checkpoint(result.last_checkpoint, ckpt);
      }
    }
    if (opts.on_epoch_end) {
      opts.on_epoch_end(epoch, model);
      model.set_training(true);
    }
  }
  return result;
}

std::unique_ptr<HatModel<float>> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* cfg_out) {
  std::vector<std::string> errors;
  RunConfig cfg = from_flat(ckpt.config, errors);
  if (!errors.empty()) throw CheckpointError("checkpoint configuration is invalid: " + errors.front());
  auto model = build_model(cfg, ckpt.num_ids);
  restore_checkpoint(ckpt, *model, nullptr);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

FeatureSet extract_features(HatModel<float>& model, const data::Dataset& ds, const RunConfig& cfg) {
  NoGradGuard no_grad;
  model.set_training(false);
  const int64_t n = static_cast<int64_t>(ds.size());
  const int64_t cb = cfg.model.backbone.stage_channels[kNumLevels - 1];
  const int64_t ch = model.dsa().final_width();
  FeatureSet f{Tensor<float>({n, cb}), Tensor<float>({n, ch})};
  const int64_t chunk = std::max<int64_t>(1, cfg.train.eval_batch);
  for (int64_t begin = 0; begin < n; begin += chunk) {
    const int64_t end = std::min(n, begin + chunk);
    Var<float> images(data::eval_images(ds, cfg.augment, static_cast<size_t>(begin), static_cast<size_t>(end)));
    ModelOutput<float> out = model.forward(images);
    std::copy(out.backbone_feature.value().data(), out.backbone_feature.value().data() + (end - begin) * cb,
              f.backbone.data() + begin * cb);
    std::copy(out.hat_feature.value().data(), out.hat_feature.value().data() + (end - begin) * ch,
              f.hat.data() + begin * ch);
  }
  return f;
}

Tensor<float> select_features(const FeatureSet& f, const std::string& mode) {
  if (mode == "backbone-only") return f.backbone;
  if (mode == "hat-only") return f.hat;
  if (mode != "concat") throw ConfigError("eval.features must be concat, backbone-only or hat-only (got '" + mode + "')");
  return test_feature(Var<float>(f.backbone), Var<float>(f.hat)).value();
}

std::vector<metrics::SampleMeta> sample_meta(const data::Dataset& ds) {
  std::vector<metrics::SampleMeta> meta;
  meta.reserve(ds.size());
  for (const auto& s : ds.samples) meta.push_back({s.identity, s.camera});
  return meta;
}

metrics::EvalResult evaluate_model(HatModel<float>& model, const data::DatasetSplits& splits, const RunConfig& cfg) {
  if (splits.query.size() == 0 || splits.gallery.size() == 0) throw InputError("query or gallery split is empty");
  const Tensor<float> q = select_features(extract_features(model, splits.query, cfg), cfg.eval.features);
  const Tensor<float> g = select_features(extract_features(model, splits.gallery, cfg), cfg.eval.features);
  const Tensor<float> dist = metrics::distance_matrix(q, g, cfg.eval.l2_normalize);
  return metrics::evaluate(dist, sample_meta(splits.query), sample_meta(splits.gallery),
                           static_cast<int>(cfg.eval.max_rank));
}

double train_rank1(HatModel<float>& model, const data::Dataset& train, const RunConfig& cfg) {
  const Tensor<float> f = select_features(extract_features(model, train, cfg), cfg.eval.features);
  const Tensor<float> dist = metrics::distance_matrix(f, f, cfg.eval.l2_normalize);
  const int64_t n = f.dim(0);
  int64_t hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = -1;
    for (int64_t j = 0; j < n; ++j)
      if (j != i && (best < 0 || dist.at({i, j}) < dist.at({i, best}))) best = j;
    if (best >= 0 && train.samples[best].identity == train.samples[i].identity) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace hat
