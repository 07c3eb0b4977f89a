#pragma once

// Transformer-based feature calibration: [current; previous] -> tokens with a
// CLS slot -> post-norm encoder layers -> CLS vector plus a convolutional
// neighborhood adjustment of the spatial tokens.

#include <memory>
#include <string>
#include <vector>

#include "hat/nn.hpp"

namespace hat {

struct TfcConfig {
  int64_t heads = 8;
  int64_t ffn_ratio = 4;  // hidden width = ffn_ratio * token width
  bool use_nea = true;
  double init_std = 0.02;
};

/// Softmax(Q K^T / sqrt(d)) V for single-head (n x d) operands.
template <typename T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               Tensor<T>* weights = nullptr) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape())
    throw InputError("attention: Q, K, V must share an (n x d) shape");
  const int64_t n = q.dim(0), d = q.dim(1);
  Tensor<T> out({n, d}), probs({n, n});
  kernels::attention_forward(q.data(), k.data(), v.data(), 1, n, 1, d, out.data(), probs.data());
  if (weights) *weights = std::move(probs);
  return out;
}

template <typename T>
class MsaBlock : public nn::Module<T> {
 public:
  MsaBlock(int64_t width, int64_t heads, Rng& rng, double init_std)
      : heads_(heads),
        q_(width, width, true, rng, init_std),
        k_(width, width, true, rng, init_std),
        v_(width, width, true, rng, init_std),
        proj_(width, width, true, rng, init_std),
        norm_(width) {
    if (heads <= 0 || width % heads != 0)
      throw ConfigError("tfc.heads=" + std::to_string(heads) + " must divide token width " + std::to_string(width));
    this->register_module("q", &q_);
    this->register_module("k", &k_);
    this->register_module("v", &v_);
    this->register_module("proj", &proj_);
    this->register_module("norm", &norm_);
  }

  /// Multi-head self-attention without the residual/normalization.
  Var<T> attend(const Var<T>& x, Tensor<T>* weights = nullptr) const {
    Var<T> a = ops::multi_head_attention(q_.forward(x), k_.forward(x), v_.forward(x), heads_, weights);
    return proj_.forward(a);
  }

  // LayerNorm(x + MSA(x))
  Var<T> forward(const Var<T>& x, Tensor<T>* weights = nullptr) const {
    return norm_.forward(ops::add(x, attend(x, weights)));
  }

  int64_t heads() const { return heads_; }
  nn::Linear<T>& q() { return q_; }
  nn::Linear<T>& k() { return k_; }
  nn::Linear<T>& v() { return v_; }
  nn::Linear<T>& proj() { return proj_; }
  nn::LayerNorm<T>& norm() { return norm_; }

 private:
  int64_t heads_;
  nn::Linear<T> q_, k_, v_, proj_;
  nn::LayerNorm<T> norm_;
};

template <typename T>
class FfnBlock : public nn::Module<T> {
 public:
  FfnBlock(int64_t width, int64_t hidden, Rng& rng, double init_std)
      : fc1_(width, hidden, true, rng, init_std), fc2_(hidden, width, true, rng, init_std), norm_(width) {
    this->register_module("fc1", &fc1_);
    this->register_module("fc2", &fc2_);
    this->register_module("norm", &norm_);
  }

  // LayerNorm(x + W2 gelu(W1 x))
  Var<T> forward(const Var<T>& x) const {
    return norm_.forward(ops::add(x, fc2_.forward(ops::gelu(fc1_.forward(x)))));
  }

  nn::Linear<T>& fc1() { return fc1_; }
  nn::Linear<T>& fc2() { return fc2_; }

 private:
  nn::Linear<T> fc1_, fc2_;
  nn::LayerNorm<T> norm_;
};

template <typename T>
class TransformerLayer : public nn::Module<T> {
 public:
  TransformerLayer(int64_t width, const TfcConfig& cfg, Rng& rng)
      : msa_(width, cfg.heads, rng, cfg.init_std), ffn_(width, cfg.ffn_ratio * width, rng, cfg.init_std) {
    this->register_module("msa", &msa_);
    this->register_module("ffn", &ffn_);
  }

  Var<T> forward(const Var<T>& x, Tensor<T>* weights = nullptr) const { return ffn_.forward(msa_.forward(x, weights)); }

  MsaBlock<T>& msa() { return msa_; }
  FfnBlock<T>& ffn() { return ffn_; }

 private:
  MsaBlock<T> msa_;
  FfnBlock<T> ffn_;
};

/// Spatial tokens -> (B, C_p, h, w) -> convolution stack down to C channels.
/// With NeA on: 3x3 conv-BN-ReLU-3x3 conv-BN. Off: a single 1x1 projection.
template <typename T>
class NeighborhoodAdjust : public nn::Module<T> {
 public:
  NeighborhoodAdjust(int64_t in, int64_t out, bool enabled, Rng& rng) : enabled_(enabled) {
    if (enabled) {
      conv1_ = std::make_unique<nn::Conv2d<T>>(in, in, 3, 1, 1, false, rng);
      bn1_ = std::make_unique<nn::BatchNorm<T>>(in);
      conv2_ = std::make_unique<nn::Conv2d<T>>(in, out, 3, 1, 1, false, rng);
      bn2_ = std::make_unique<nn::BatchNorm<T>>(out);
      this->register_module("conv1", conv1_.get());
      this->register_module("bn1", bn1_.get());
      this->register_module("conv2", conv2_.get());
      this->register_module("bn2", bn2_.get());
    } else {
      conv1_ = std::make_unique<nn::Conv2d<T>>(in, out, 1, 1, 0, true, rng);
      this->register_module("proj", conv1_.get());
    }
  }

  Var<T> forward(const Var<T>& tokens, int64_t h, int64_t w) {
    Var<T> x = ops::spatial_tokens_to_map(tokens, h, w);
    if (!enabled_) return conv1_->forward(x);
    x = ops::relu(bn1_->forward(conv1_->forward(x)));
    return bn2_->forward(conv2_->forward(x));
  }

  bool enabled() const { return enabled_; }

 private:
  bool enabled_;
  std::unique_ptr<nn::Conv2d<T>> conv1_, conv2_;
  std::unique_ptr<nn::BatchNorm<T>> bn1_, bn2_;
};

template <typename T>
struct TfcOutput {
  Var<T> feature;  // (B, C, h, w), the aggregate passed to the next level
  Var<T> cls;      // (B, C_p)
};

/// Optional per-layer attention weights, (B, heads, S, S) each.
template <typename T>
using AttentionCapture = std::vector<Tensor<T>>;

template <typename T>
class Tfc : public nn::Module<T> {
 public:
  /// token_width is C_p, out_channels is C, (h, w) is the aligned map size.
  Tfc(int64_t token_width, int64_t out_channels, int64_t depth, int64_t h, int64_t w, const TfcConfig& cfg, Rng& rng)
      : width_(token_width), h_(h), w_(w), nea_(token_width, out_channels, cfg.use_nea, rng) {
    if (cfg.heads <= 0 || token_width % cfg.heads != 0)
      throw ConfigError("tfc.heads=" + std::to_string(cfg.heads) + " must divide token width " +
                        std::to_string(token_width));
    cls_ = this->register_parameter("cls", nn::trunc_normal_tensor<T>({token_width}, cfg.init_std, rng));
    pos_ = this->register_parameter("pos_embed", nn::trunc_normal_tensor<T>({h * w + 1, token_width}, cfg.init_std, rng));
    for (int64_t i = 0; i < depth; ++i) {
      layers_.push_back(std::make_unique<TransformerLayer<T>>(token_width, cfg, rng));
      this->register_module("layer" + std::to_string(i), layers_.back().get());
    }
    this->register_module("nea", &nea_);
  }

  /// [current; previous] along channels (previous may be undefined), flattened
  /// row-major, CLS prepended, position embedding added.
  Var<T> tokenize(const Var<T>& current, const Var<T>& previous) const {
    if (previous.defined() && current.shape() != previous.shape())
      throw AggregationError("tfc: current " + shape_str(current.shape()) + " and previous " +
                             shape_str(previous.shape()) + " differ");
    Var<T> z = previous.defined() ? ops::concat_channels(current, previous) : current;
    if (z.dim(1) != width_)
      throw AggregationError("tfc: concatenated width " + std::to_string(z.dim(1)) + " != token width " +
                             std::to_string(width_));
    return ops::tokens_with_cls(z, cls_, pos_);
  }

  Var<T> encode(const Var<T>& tokens, AttentionCapture<T>* capture = nullptr) const {
    Var<T> x = tokens;
    for (const auto& layer : layers_) {
      Tensor<T> weights;
      x = layer->forward(x, capture ? &weights : nullptr);
      if (capture) capture->push_back(std::move(weights));
    }
    return x;
  }

  TfcOutput<T> forward(const Var<T>& current, const Var<T>& previous, AttentionCapture<T>* capture = nullptr) {
    Var<T> x = encode(tokenize(current, previous), capture);
    return {nea_.forward(x, h_, w_), ops::select_token(x, 0)};
  }

  int64_t depth() const { return static_cast<int64_t>(layers_.size()); }
  int64_t token_width() const { return width_; }
  int64_t sequence_length() const { return h_ * w_ + 1; }
  Var<T>& cls_embedding() { return cls_; }
  Var<T>& position_embedding() { return pos_; }
  TransformerLayer<T>& layer(size_t i) { return *layers_[i]; }

 private:
  int64_t width_, h_, w_;
  Var<T> cls_, pos_;
  std::vector<std::unique_ptr<TransformerLayer<T>>> layers_;
  NeighborhoodAdjust<T> nea_;
};

}  // namespace hat
