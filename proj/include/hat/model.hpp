#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hat/backbone.hpp"
#include "hat/dsa.hpp"
#include "hat/losses.hpp"

namespace hat {

struct ModelConfig {
  BackboneConfig backbone;
  TfcConfig tfc;
  DsaConfig dsa;
  int64_t num_ids = 16;

  std::vector<std::string> validate() const {
    auto errors = backbone.validate();
    auto d = dsa.validate();
    errors.insert(errors.end(), d.begin(), d.end());
    if (num_ids < 2) errors.push_back("model needs at least two identities");
    if (tfc.heads <= 0) errors.push_back("tfc.heads must be positive");
    else {
      const int64_t c = backbone.common_channels;
      if ((2 * c) % tfc.heads != 0)
        errors.push_back("tfc.heads=" + std::to_string(tfc.heads) + " must divide token width " + std::to_string(2 * c));
      if (!dsa.self_concat_first && c % tfc.heads != 0)
        errors.push_back("tfc.heads must divide common_channels when the first level is not self-concatenated");
    }
    if (tfc.ffn_ratio <= 0) errors.push_back("tfc.ffn_ratio must be positive");
    return errors;
  }
};

/// Concatenation of the backbone global feature and the HAT representation
/// used for retrieval.
template <typename T>
Var<T> test_feature(const Var<T>& backbone_global, const Var<T>& hat_cls) {
  return ops::concat_features(backbone_global, hat_cls);
}

template <typename T>
struct ModelOutput {
  std::vector<Var<T>> hierarchy;
  std::vector<Var<T>> aligned;
  AggregationTrace<T> trace;
  HeadLossInput<T> main;                // logits from the necked final CLS, raw CLS embedding
  HeadLossInput<T> mfe;                 // backbone global branch
  std::vector<HeadLossInput<T>> aux;    // one per active level
  Var<T> backbone_feature;              // necked global feature (B, C4)
  Var<T> hat_feature;                   // necked final CLS (B, C_p)
};

/// Backbone -> bottleneck/scaling -> DSA of TFC blocks, with BN necks and
/// identity classifiers on both the backbone global feature and the final CLS.
template <typename T>
class HatModel : public nn::Module<T> {
 public:
  HatModel(const ModelConfig& cfg, Rng& rng)
      : cfg_(checked(cfg)),
        backbone_(cfg.backbone, rng),
        aligner_(cfg.backbone, active_mask(cfg.dsa), rng),
        dsa_(cfg.dsa, cfg.tfc, cfg.backbone.common_channels, cfg.backbone.aligned_height(), cfg.backbone.aligned_width(),
             cfg.num_ids, rng),
        backbone_neck_(cfg.backbone.stage_channels[kNumLevels - 1]),
        backbone_classifier_(cfg.backbone.stage_channels[kNumLevels - 1], cfg.num_ids, false, rng, 0.001),
        hat_neck_(dsa_.final_width()),
        hat_classifier_(dsa_.final_width(), cfg.num_ids, false, rng, 0.001) {
    backbone_neck_.freeze_bias();
    hat_neck_.freeze_bias();
    this->register_module("backbone", &backbone_);
    this->register_module("align", &aligner_);
    this->register_module("dsa", &dsa_);
    this->register_module("backbone_neck", &backbone_neck_);
    this->register_module("backbone_classifier", &backbone_classifier_);
    this->register_module("hat_neck", &hat_neck_);
    this->register_module("hat_classifier", &hat_classifier_);
  }

  ModelOutput<T> forward(const Var<T>& images, std::vector<AttentionCapture<T>>* capture = nullptr) {
    ModelOutput<T> out;
    out.hierarchy = backbone_.extract_hierarchy(images);
    out.aligned = aligner_.align(out.hierarchy);
    out.trace = dsa_.aggregate(out.aligned, capture);

    Var<T> global = ops::global_avg_pool(out.hierarchy.back());
    out.backbone_feature = backbone_neck_.forward(global);
    out.mfe = {backbone_classifier_.forward(out.backbone_feature), global};

    const Var<T>& cls = out.trace.final_cls();
    out.hat_feature = hat_neck_.forward(cls);
    out.main = {hat_classifier_.forward(out.hat_feature), cls};

    for (auto& h : dsa_.aux_heads(out.trace)) out.aux.push_back({h.logits, h.embedding});
    return out;
  }

  /// Loss per the configured supervision switches.
  TotalLoss<T> loss(const ModelOutput<T>& out, const std::vector<int64_t>& labels, const LossConfig& lc) const {
    std::vector<HeadLossInput<T>> aux;
    if (cfg_.dsa.use_aux_loss) aux = out.aux;
    std::optional<HeadLossInput<T>> mfe;
    if (cfg_.dsa.use_mfe_supervision) mfe = out.mfe;
    return total_loss(out.main, aux, mfe, labels, lc);
  }

  const ModelConfig& config() const { return cfg_; }
  Backbone<T>& backbone() { return backbone_; }
  Aligner<T>& aligner() { return aligner_; }
  Dsa<T>& dsa() { return dsa_; }

  /// Parameters owned by the transformer side (trained at the reduced rate).
  static bool is_tfc_parameter(const std::string& name) { return name.rfind("dsa.", 0) == 0; }

 private:
  static const ModelConfig& checked(const ModelConfig& cfg) {
    if (auto errs = cfg.validate(); !errs.empty()) throw ConfigError(errs.front());
    return cfg;
  }
  static std::array<bool, kNumLevels> active_mask(const DsaConfig& d) {
    std::array<bool, kNumLevels> m{};
    for (int s = 0; s < kNumLevels; ++s) m[s] = d.depths[s] > 0;
    return m;
  }

  ModelConfig cfg_;
  Backbone<T> backbone_;
  Aligner<T> aligner_;
  Dsa<T> dsa_;
  nn::BatchNorm<T> backbone_neck_;
  nn::Linear<T> backbone_classifier_;
  nn::BatchNorm<T> hat_neck_;
  nn::Linear<T> hat_classifier_;
};

}  // namespace hat
