#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hat/ops.hpp"
#include "hat/rng.hpp"

namespace hat::nn {

/// Base for anything owning parameters. Parameters and children are registered
/// by name so checkpoints can address them as dotted module paths. Modules are
/// pinned in memory (no copy/move) because the registry stores pointers.
template <typename T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  virtual ~Module() = default;

  void set_training(bool on) {
    training_ = on;
    for (auto& [name, child] : children_) child->set_training(on);
  }
  bool training() const { return training_; }

  std::vector<std::pair<std::string, Var<T>>> named_parameters(const std::string& prefix = "") const {
    std::vector<std::pair<std::string, Var<T>>> out;
    for (const auto& [name, p] : params_) out.emplace_back(prefix + name, p);
    for (const auto& [name, child] : children_) {
      auto sub = child->named_parameters(prefix + name + ".");
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_buffers(const std::string& prefix = "") const {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (const auto& [name, b] : buffers_) out.emplace_back(prefix + name, b);
    for (const auto& [name, child] : children_) {
      auto sub = child->named_buffers(prefix + name + ".");
      out.insert(out.end(), sub.begin(), sub.end());
    }
    return out;
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, p] : named_parameters()) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, p] : named_parameters()) p.zero_grad();
  }

 protected:
  Var<T> register_parameter(std::string name, Tensor<T> init) {
    Var<T> v(std::move(init), true);
    params_.emplace_back(std::move(name), v);
    return v;
  }
  void register_buffer(std::string name, Tensor<T>* buffer) { buffers_.emplace_back(std::move(name), buffer); }
  void register_module(std::string name, Module* child) { children_.emplace_back(std::move(name), child); }

 private:
  bool training_ = true;
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
};

template <typename T>
Tensor<T> normal_tensor(Shape s, double stddev, Rng& rng) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.vec()) v = static_cast<T>(rng.normal() * stddev);
  return t;
}

template <typename T>
Tensor<T> trunc_normal_tensor(Shape s, double stddev, Rng& rng) {
  Tensor<T> t(std::move(s));
  for (auto& v : t.vec()) v = static_cast<T>(rng.trunc_normal(stddev));
  return t;
}

template <typename T>
class Linear : public Module<T> {
 public:
  // Weights ~ truncated normal(0.02) unless `stddev` says otherwise.
  Linear(int64_t in, int64_t out, bool bias, Rng& rng, double stddev = 0.02) : in_(in), out_(out) {
    weight = this->register_parameter("weight", trunc_normal_tensor<T>({out, in}, stddev, rng));
    if (bias) this->bias = this->register_parameter("bias", Tensor<T>({out}));
  }

  Var<T> forward(const Var<T>& x) const { return ops::linear(x, weight, bias); }

  int64_t in_features() const { return in_; }
  int64_t out_features() const { return out_; }

  Var<T> weight;
  Var<T> bias;

 private:
  int64_t in_, out_;
};

template <typename T>
class Conv2d : public Module<T> {
 public:
  // He initialization (fan-out, ReLU gain).
  Conv2d(int64_t in, int64_t out, int64_t kernel, int64_t stride, int64_t pad, bool bias, Rng& rng)
      : stride_(stride), pad_(pad) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(out * kernel * kernel));
    weight = this->register_parameter("weight", normal_tensor<T>({out, in, kernel, kernel}, stddev, rng));
    if (bias) this->bias = this->register_parameter("bias", Tensor<T>({out}));
  }

  Var<T> forward(const Var<T>& x) const { return ops::conv2d(x, weight, bias, stride_, pad_); }

  Var<T> weight;
  Var<T> bias;

 private:
  int64_t stride_, pad_;
};

/// Batch normalization for (B,C) or (B,C,H,W) inputs.
template <typename T>
class BatchNorm : public Module<T> {
 public:
  explicit BatchNorm(int64_t channels) {
    gamma = this->register_parameter("weight", Tensor<T>({channels}, T(1)));
    beta = this->register_parameter("bias", Tensor<T>({channels}));
    state_.running_mean = Tensor<T>({channels});
    state_.running_var = Tensor<T>({channels}, T(1));
    this->register_buffer("running_mean", &state_.running_mean);
    this->register_buffer("running_var", &state_.running_var);
  }

  Var<T> forward(const Var<T>& x) { return ops::batch_norm(x, gamma, beta, state_, this->training()); }

  // Freezing beta keeps a BNNeck-style feature bias-free.
  void freeze_bias() { beta.node()->requires_grad = false; }

  Var<T> gamma;
  Var<T> beta;

 private:
  ops::BatchNormState<T> state_;
};

template <typename T>
class LayerNorm : public Module<T> {
 public:
  explicit LayerNorm(int64_t width) {
    gamma = this->register_parameter("weight", Tensor<T>({width}, T(1)));
    beta = this->register_parameter("bias", Tensor<T>({width}));
  }
  Var<T> forward(const Var<T>& x) const { return ops::layer_norm(x, gamma, beta); }

  Var<T> gamma;
  Var<T> beta;
};

}  // namespace hat::nn
