#pragma once

// Deeply supervised aggregation. Levels with zero depth are skipped; the first
// active level fuses its aligned map with itself, every later active level s
// fuses X_s with the previous aggregate Z, low level to high level.

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "hat/backbone.hpp"
#include "hat/tfc.hpp"

namespace hat {

struct DsaConfig {
  std::array<int64_t, kNumLevels> depths{3, 3, 6, 0};
  bool use_aux_loss = true;
  bool use_nea = true;
  bool use_mfe_supervision = true;
  // false: the first active level tokenizes its aligned map alone (width C).
  bool self_concat_first = true;
  // true: each aux head standardizes its CLS with a BN neck (frozen bias) and
  // both aux terms read the necked vector; false: both read the raw CLS.
  bool aux_neck = false;

  std::vector<int> active_levels() const {
    std::vector<int> out;
    for (int s = 0; s < kNumLevels; ++s)
      if (depths[s] > 0) out.push_back(s);
    return out;
  }
  int num_active() const { return static_cast<int>(active_levels().size()); }

  std::vector<std::string> validate() const {
    std::vector<std::string> errors;
    for (auto d : depths)
      if (d < 0) errors.push_back("dsa.depths entries must be non-negative");
    if (active_levels().empty()) errors.push_back("dsa.depths must have at least one positive entry");
    return errors;
  }
};

template <typename T>
struct LevelOutput {
  int level = 0;  // 0-based hierarchy index
  TfcOutput<T> out;
};

template <typename T>
struct AggregationTrace {
  std::vector<LevelOutput<T>> levels;
  // CLS of the deepest active level.
  const Var<T>& final_cls() const { return levels.back().out.cls; }
};

/// Unrolls the aggregation recursion over `aligned` with a caller-supplied
/// calibration step fn(level, current, previous) -> TfcOutput.
template <typename T, typename Fn>
AggregationTrace<T> dsa_recursion(const std::vector<Var<T>>& aligned, const std::array<int64_t, kNumLevels>& depths,
                                  bool self_concat_first, Fn&& calibrate) {
  AggregationTrace<T> trace;
  Var<T> previous;
  for (int s = 0; s < kNumLevels; ++s) {
    if (depths[s] <= 0) continue;
    const Var<T>& current = aligned.at(static_cast<size_t>(s));
    if (!current.defined()) throw AggregationError("dsa: aligned map for level " + std::to_string(s + 1) + " missing");
    if (!previous.defined()) previous = self_concat_first ? current : Var<T>();
    TfcOutput<T> out = calibrate(s, current, previous);
    previous = out.feature;
    trace.levels.push_back({s, std::move(out)});
  }
  if (trace.levels.empty()) throw ConfigError("dsa: all depths are zero");
  return trace;
}

template <typename T>
struct HeadOutput {
  Var<T> logits;     // (B, num_ids)
  Var<T> embedding;  // (B, D)
};

template <typename T>
class Dsa : public nn::Module<T> {
 public:
  Dsa(const DsaConfig& cfg, const TfcConfig& tfc_cfg, int64_t channels, int64_t h, int64_t w, int64_t num_ids, Rng& rng)
      : cfg_(cfg) {
    if (auto errs = cfg.validate(); !errs.empty()) throw ConfigError(errs.front());
    TfcConfig tc = tfc_cfg;
    tc.use_nea = cfg.use_nea;
    bool first = true;
    for (int s = 0; s < kNumLevels; ++s) {
      if (cfg.depths[s] <= 0) continue;
      const int64_t width = (first && !cfg.self_concat_first) ? channels : 2 * channels;
      first = false;
      const std::string name = "level" + std::to_string(s + 1);
      tfcs_[s] = std::make_unique<Tfc<T>>(width, channels, cfg.depths[s], h, w, tc, rng);
      this->register_module(name, tfcs_[s].get());
      heads_[s] = std::make_unique<nn::Linear<T>>(width, num_ids, false, rng, 0.001);
      this->register_module(name + "_aux_classifier", heads_[s].get());
      if (cfg.aux_neck) {
        necks_[s] = std::make_unique<nn::BatchNorm<T>>(width);
        necks_[s]->freeze_bias();
        this->register_module(name + "_aux_neck", necks_[s].get());
      }
    }
  }

  AggregationTrace<T> aggregate(const std::vector<Var<T>>& aligned, std::vector<AttentionCapture<T>>* capture = nullptr) {
    if (capture) capture->clear();
    return dsa_recursion<T>(aligned, cfg_.depths, cfg_.self_concat_first,
                            [&](int s, const Var<T>& current, const Var<T>& previous) {
                              AttentionCapture<T>* c = nullptr;
                              if (capture) c = &capture->emplace_back();
                              return tfcs_[s]->forward(current, previous, c);
                            });
  }

  /// Identity logits and embedding per active level, read from that level's
  /// CLS (through the aux neck when enabled).
  std::vector<HeadOutput<T>> aux_heads(const AggregationTrace<T>& trace) {
    std::vector<HeadOutput<T>> out;
    for (const auto& lv : trace.levels) {
      Var<T> emb = necks_[lv.level] ? necks_[lv.level]->forward(lv.out.cls) : lv.out.cls;
      out.push_back({heads_[lv.level]->forward(emb), emb});
    }
    return out;
  }

  Tfc<T>& tfc(int s) { return *tfcs_[s]; }
  bool has_level(int s) const { return static_cast<bool>(tfcs_[s]); }
  const DsaConfig& config() const { return cfg_; }
  int64_t final_width() const {
    const auto act = cfg_.active_levels();
    return tfcs_[act.back()]->token_width();
  }

 private:
  DsaConfig cfg_;
  std::array<std::unique_ptr<Tfc<T>>, kNumLevels> tfcs_;
  std::array<std::unique_ptr<nn::Linear<T>>, kNumLevels> heads_;
  std::array<std::unique_ptr<nn::BatchNorm<T>>, kNumLevels> necks_;
};

}  // namespace hat
