#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "hat/nn.hpp"

namespace hat {

inline constexpr int kNumLevels = 4;

struct BackboneConfig {
  int64_t image_height = 256;
  int64_t image_width = 128;
  std::array<int64_t, kNumLevels> stage_channels{32, 64, 128, 256};
  std::array<int64_t, kNumLevels> blocks_per_stage{1, 1, 1, 1};
  int64_t common_channels = 64;
  int64_t scaling_divisor = 16;

  // Aligned map size (H/d, W/d).
  int64_t aligned_height() const { return image_height / scaling_divisor; }
  int64_t aligned_width() const { return image_width / scaling_divisor; }

  // Stage s (0-based) output size under strides {4, 2, 2, 2}.
  int64_t stage_height(int s) const { return image_height / (int64_t{4} << s); }
  int64_t stage_width(int s) const { return image_width / (int64_t{4} << s); }

  std::vector<std::string> validate() const {
    std::vector<std::string> errors;
    if (scaling_divisor != 8 && scaling_divisor != 16 && scaling_divisor != 32)
      errors.push_back("backbone.scaling_divisor must be one of 8, 16, 32 (got " + std::to_string(scaling_divisor) + ")");
    else if (image_height % scaling_divisor != 0 || image_width % scaling_divisor != 0)
      errors.push_back("backbone.scaling_divisor " + std::to_string(scaling_divisor) + " must divide the input size " +
                       std::to_string(image_height) + "x" + std::to_string(image_width));
    if (image_height % 32 != 0 || image_width % 32 != 0)
      errors.push_back("input size must be a multiple of 32 for a 4-stage backbone");
    if (common_channels <= 0) errors.push_back("backbone.common_channels must be positive");
    for (int s = 0; s < kNumLevels; ++s) {
      if (stage_channels[s] <= 0) errors.push_back("backbone.stage_channels entries must be positive");
      if (blocks_per_stage[s] <= 0) errors.push_back("backbone.blocks_per_stage entries must be positive");
    }
    return errors;
  }
};

/// Two 3x3 convolutions with a projected shortcut when shape changes.
template <typename T>
class BasicBlock : public nn::Module<T> {
 public:
  BasicBlock(int64_t in, int64_t out, int64_t stride, Rng& rng)
      : conv1_(in, out, 3, stride, 1, false, rng), bn1_(out), conv2_(out, out, 3, 1, 1, false, rng), bn2_(out) {
    this->register_module("conv1", &conv1_);
    this->register_module("bn1", &bn1_);
    this->register_module("conv2", &conv2_);
    this->register_module("bn2", &bn2_);
    if (stride != 1 || in != out) {
      down_conv_ = std::make_unique<nn::Conv2d<T>>(in, out, 1, stride, 0, false, rng);
      down_bn_ = std::make_unique<nn::BatchNorm<T>>(out);
      this->register_module("down_conv", down_conv_.get());
      this->register_module("down_bn", down_bn_.get());
    }
  }

  Var<T> forward(const Var<T>& x) {
    Var<T> y = ops::relu(bn1_.forward(conv1_.forward(x)));
    y = bn2_.forward(conv2_.forward(y));
    Var<T> shortcut = down_conv_ ? down_bn_->forward(down_conv_->forward(x)) : x;
    return ops::relu(ops::add(y, shortcut));
  }

 private:
  nn::Conv2d<T> conv1_;
  nn::BatchNorm<T> bn1_;
  nn::Conv2d<T> conv2_;
  nn::BatchNorm<T> bn2_;
  std::unique_ptr<nn::Conv2d<T>> down_conv_;
  std::unique_ptr<nn::BatchNorm<T>> down_bn_;
};

/// Multi-scale feature extractor: a stride-4 stem followed by four residual
/// stages (strides 1, 2, 2, 2), one feature map per stage.
template <typename T>
class Backbone : public nn::Module<T> {
 public:
  Backbone(const BackboneConfig& cfg, Rng& rng)
      : cfg_(cfg), stem_conv_(3, cfg.stage_channels[0], 3, 2, 1, false, rng), stem_bn_(cfg.stage_channels[0]) {
    this->register_module("stem_conv", &stem_conv_);
    this->register_module("stem_bn", &stem_bn_);
    int64_t in = cfg.stage_channels[0];
    for (int s = 0; s < kNumLevels; ++s) {
      for (int64_t b = 0; b < cfg.blocks_per_stage[s]; ++b) {
        const int64_t stride = (s > 0 && b == 0) ? 2 : 1;
        blocks_[s].push_back(std::make_unique<BasicBlock<T>>(in, cfg.stage_channels[s], stride, rng));
        in = cfg.stage_channels[s];
        this->register_module("stage" + std::to_string(s + 1) + "." + std::to_string(b), blocks_[s].back().get());
      }
    }
  }

  /// One feature map per stage, strictly decreasing in spatial size.
  std::vector<Var<T>> extract_hierarchy(const Var<T>& images) {
    const Shape& s = images.shape();
    if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.image_height || s[3] != cfg_.image_width)
      throw ConfigError("backbone: expected images (B x 3 x " + std::to_string(cfg_.image_height) + " x " +
                        std::to_string(cfg_.image_width) + "), got " + shape_str(s));
    Var<T> x = ops::max_pool(ops::relu(stem_bn_.forward(stem_conv_.forward(images))), 2, 2);
    std::vector<Var<T>> levels;
    for (int st = 0; st < kNumLevels; ++st) {
      for (auto& block : blocks_[st]) x = block->forward(x);
      levels.push_back(x);
    }
    return levels;
  }

  const BackboneConfig& config() const { return cfg_; }

 private:
  BackboneConfig cfg_;
  nn::Conv2d<T> stem_conv_;
  nn::BatchNorm<T> stem_bn_;
  std::array<std::vector<std::unique_ptr<BasicBlock<T>>>, kNumLevels> blocks_;
};

/// Residual projection of a stage output to the common channel width:
/// output = transform(x) + shortcut(x), where transform is
/// 1x1 conv-BN-ReLU-3x3 conv-BN and shortcut is a 1x1 projection.
template <typename T>
class Bottleneck : public nn::Module<T> {
 public:
  Bottleneck(int64_t in, int64_t out, Rng& rng)
      : reduce_(in, out, 1, 1, 0, false, rng),
        reduce_bn_(out),
        conv_(out, out, 3, 1, 1, false, rng),
        conv_bn_(out),
        shortcut_(in, out, 1, 1, 0, false, rng) {
    this->register_module("reduce", &reduce_);
    this->register_module("reduce_bn", &reduce_bn_);
    this->register_module("conv", &conv_);
    this->register_module("conv_bn", &conv_bn_);
    this->register_module("shortcut", &shortcut_);
  }

  Var<T> forward(const Var<T>& x) {
    Var<T> y = ops::relu(reduce_bn_.forward(reduce_.forward(x)));
    y = conv_bn_.forward(conv_.forward(y));
    return ops::add(y, shortcut_.forward(x));
  }

  Var<T> shortcut(const Var<T>& x) const { return shortcut_.forward(x); }

  // The affine scale of the final normalization; zero makes the block a pure
  // shortcut projection.
  nn::BatchNorm<T>& final_norm() { return conv_bn_; }

 private:
  nn::Conv2d<T> reduce_;
  nn::BatchNorm<T> reduce_bn_;
  nn::Conv2d<T> conv_;
  nn::BatchNorm<T> conv_bn_;
  nn::Conv2d<T> shortcut_;
};

/// Scaling module: max pooling when the map is larger than the target,
/// bilinear upsampling when smaller, identity when equal.
template <typename T>
Var<T> rescale(const Var<T>& x, int64_t target_h, int64_t target_w) {
  const int64_t H = x.dim(2), W = x.dim(3);
  if (H == target_h && W == target_w) return x;
  if (H >= target_h && W >= target_w) {
    if (H % target_h != 0 || W % target_w != 0)
      throw ConfigError("rescale: " + std::to_string(H) + "x" + std::to_string(W) + " does not pool evenly to " +
                        std::to_string(target_h) + "x" + std::to_string(target_w));
    return ops::max_pool(x, H / target_h, W / target_w);
  }
  if (H <= target_h && W <= target_w) return ops::upsample_bilinear(x, target_h, target_w);
  throw ConfigError("rescale: cannot pool one axis and upsample the other (" + std::to_string(H) + "x" +
                    std::to_string(W) + " -> " + std::to_string(target_h) + "x" + std::to_string(target_w) + ")");
}

/// Bottleneck and scaling per hierarchy level. Only levels flagged in `levels`
/// get parameters.
template <typename T>
class Aligner : public nn::Module<T> {
 public:
  Aligner(const BackboneConfig& cfg, std::array<bool, kNumLevels> levels, Rng& rng) : cfg_(cfg), levels_(levels) {
    for (int s = 0; s < kNumLevels; ++s) {
      if (!levels[s]) continue;
      bottlenecks_[s] = std::make_unique<Bottleneck<T>>(cfg.stage_channels[s], cfg.common_channels, rng);
      this->register_module("level" + std::to_string(s + 1), bottlenecks_[s].get());
    }
  }

  bool has_level(int s) const { return levels_[s]; }

  Var<T> align_level(int s, const Var<T>& x) {
    if (!levels_[s]) throw ConfigError("align: level " + std::to_string(s + 1) + " has no bottleneck");
    return rescale(bottlenecks_[s]->forward(x), cfg_.aligned_height(), cfg_.aligned_width());
  }

  /// Aligns every enabled level; disabled levels yield an undefined Var.
  std::vector<Var<T>> align(const std::vector<Var<T>>& hierarchy) {
    if (hierarchy.size() != kNumLevels) throw ConfigError("align: expected 4 hierarchy levels");
    std::vector<Var<T>> out(kNumLevels);
    for (int s = 0; s < kNumLevels; ++s)
      if (levels_[s]) out[s] = align_level(s, hierarchy[s]);
    return out;
  }

  Bottleneck<T>& bottleneck(int s) { return *bottlenecks_[s]; }

 private:
  BackboneConfig cfg_;
  std::array<bool, kNumLevels> levels_;
  std::array<std::unique_ptr<Bottleneck<T>>, kNumLevels> bottlenecks_;
};

}  // namespace hat
