#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "hat/nn.hpp"

namespace hat {

struct ScheduleConfig {
  double base_lr = 4e-4;
  double warmup_start_lr = 4e-6;
  int64_t warmup_epochs = 10;
  int64_t decay_start_epoch = 50;
  int64_t decay_every = 20;
  double decay_factor = 0.4;
  int64_t total_epochs = 150;
  double tfc_lr_scale = 0.5;

  std::vector<std::string> validate() const {
    std::vector<std::string> e;
    if (!(base_lr > 0)) e.push_back("schedule.base_lr must be positive");
    if (!(warmup_start_lr > 0)) e.push_back("schedule.warmup_start_lr must be positive");
    if (warmup_epochs < 0) e.push_back("schedule.warmup_epochs must be non-negative");
    if (decay_every <= 0) e.push_back("schedule.decay_every must be positive");
    if (!(decay_factor > 0 && decay_factor <= 1)) e.push_back("schedule.decay_factor must lie in (0, 1]");
    if (total_epochs <= 0) e.push_back("schedule.total_epochs must be positive");
    if (!(tfc_lr_scale > 0)) e.push_back("schedule.tfc_lr_scale must be positive");
    return e;
  }
};

struct GroupRates {
  double base;
  double tfc;
};

/// Learning rates for epoch (1-based): linear warmup over epochs
/// 1..warmup_epochs, flat until decay_start_epoch, then one decay_factor step
/// at decay_start_epoch and every decay_every epochs after it. The TFC group
/// always runs at tfc_lr_scale times the base rate.
inline GroupRates lr_at(int64_t epoch, const ScheduleConfig& cfg) {
  if (epoch < 1 || epoch > cfg.total_epochs)
    throw InputError("lr_at: epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(cfg.total_epochs) + "]");
  double lr = cfg.base_lr;
  if (epoch < cfg.warmup_epochs) {
    lr = cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * static_cast<double>(epoch - 1) /
                                   static_cast<double>(cfg.warmup_epochs - 1);
  } else if (epoch >= cfg.decay_start_epoch) {
    const int64_t steps = 1 + (epoch - cfg.decay_start_epoch) / cfg.decay_every;
    for (int64_t i = 0; i < steps; ++i) lr *= cfg.decay_factor;
  }
  return {lr, lr * cfg.tfc_lr_scale};
}

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 5e-4;
};

/// Adam with coupled L2 weight decay and two learning-rate groups.
template <typename T>
class Adam {
 public:
  // `in_tfc_group(name)` selects parameters trained at the TFC rate.
  template <typename Pred>
  Adam(std::vector<std::pair<std::string, Var<T>>> params, OptimConfig cfg, Pred in_tfc_group)
      : params_(std::move(params)), cfg_(cfg) {
    for (const auto& [name, p] : params_) {
      tfc_.push_back(in_tfc_group(name));
      m_.emplace(name, Tensor<T>(p.shape()));
      v_.emplace(name, Tensor<T>(p.shape()));
    }
  }

  void step(const GroupRates& rates) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      auto& [name, p] = params_[i];
      if (!p.requires_grad() || p.grad().empty()) continue;
      const T lr = static_cast<T>(tfc_[i] ? rates.tfc : rates.base);
      Tensor<T>& w = p.mutable_value();
      const Tensor<T>& g = p.grad();
      Tensor<T>& m = m_.at(name);
      Tensor<T>& v = v_.at(name);
      const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2), wd = static_cast<T>(cfg_.weight_decay);
      const T c1 = static_cast<T>(bc1), c2 = static_cast<T>(bc2), eps = static_cast<T>(cfg_.eps);
      for (int64_t k = 0; k < w.numel(); ++k) {
        const T gk = g[k] + wd * w[k];
        m[k] = b1 * m[k] + (T(1) - b1) * gk;
        v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
        w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::map<std::string, Tensor<T>>& first_moments() { return m_; }
  std::map<std::string, Tensor<T>>& second_moments() { return v_; }
  const std::map<std::string, Tensor<T>>& first_moments() const { return m_; }
  const std::map<std::string, Tensor<T>>& second_moments() const { return v_; }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
  std::vector<bool> tfc_;
  OptimConfig cfg_;
  std::map<std::string, Tensor<T>> m_, v_;
  int64_t t_ = 0;
};

}  // namespace hat
