#pragma once

// Parameter registry and AdamW with decoupled weight decay, bias correction,
// and global-norm gradient clipping.

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "bevnet/random.hpp"
#include "bevnet/tensor.hpp"

namespace bevnet {

// Named parameters in registration order. Modules create their weights here
// so the optimizer and checkpoints see a flat, stable list.
template <typename S>
class ParamStore {
 public:
  Tensor<S>& create(const std::string& name, Shape shape,
                    std::vector<S> init) {
    if (index_.count(name))
      throw std::invalid_argument("duplicate parameter name: " + name);
    Tensor<S> t(std::move(shape), std::move(init));
    t.set_requires_grad(true);
    index_[name] = names_.size();
    names_.push_back(name);
    params_.push_back(std::move(t));
    return params_.back();
  }

  Tensor<S>& create_fill(const std::string& name, Shape shape, S value) {
    size_t n = shape_numel(shape);
    return create(name, std::move(shape), std::vector<S>(n, value));
  }

  // He-style fan-in scaled normal init.
  Tensor<S>& create_random(const std::string& name, Shape shape, Rng& rng,
                           double fan_in_override = 0.0) {
    size_t n = shape_numel(shape);
    double fan_in = fan_in_override;
    if (fan_in <= 0.0) {
      fan_in = 1.0;
      for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    }
    double stddev = std::sqrt(2.0 / fan_in);
    std::vector<S> v(n);
    for (auto& x : v) x = static_cast<S>(rng.normal(0.0, stddev));
    return create(name, std::move(shape), std::move(v));
  }

  Tensor<S>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::invalid_argument("unknown parameter: " + name);
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name); }

  size_t size() const { return params_.size(); }
  const std::string& name(size_t i) const { return names_[i]; }
  Tensor<S>& param(size_t i) { return params_[i]; }
  const Tensor<S>& param(size_t i) const { return params_[i]; }

  size_t total_scalars() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<S>> params_;
  std::map<std::string, size_t> index_;
};

struct AdamWConfig {
  double lr = 4e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 35.0;  // global gradient norm limit; 0 disables
};

template <typename S>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  int64_t step_count() const { return t_; }

  // One update over every parameter that accumulated a gradient this step.
  // Throws on non-finite gradients, naming the offending parameter.
  void step(ParamStore<S>& params) {
    if (m_.size() != params.size()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params.param(i).numel(), 0.0);
        v_[i].assign(params.param(i).numel(), 0.0);
      }
    }
    double sq = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
      const auto& g = params.param(i).grad();
      for (S gv : g) {
        double d = static_cast<double>(gv);
        if (!std::isfinite(d))
          throw std::runtime_error("non-finite gradient in parameter " +
                                   params.name(i));
        sq += d * d;
      }
    }
    double norm = std::sqrt(sq);
    last_grad_norm_ = norm;
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm)
      scale = cfg_.clip_norm / norm;

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params.param(i);
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      S* pd = p.data();
      for (size_t j = 0; j < g.size(); ++j) {
        double gj = static_cast<double>(g[j]) * scale;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        double upd = mhat / (std::sqrt(vhat) + cfg_.eps) +
                     cfg_.weight_decay * static_cast<double>(pd[j]);
        pd[j] = static_cast<S>(static_cast<double>(pd[j]) - cfg_.lr * upd);
      }
    }
  }

  double last_grad_norm() const { return last_grad_norm_; }

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  double last_grad_norm_ = 0.0;
  // Moments kept in double regardless of the parameter scalar type.
  std::vector<std::vector<double>> m_, v_;
};

// Linear warmup to base lr, then step decay at the given milestones.
struct LrSchedule {
  double base_lr = 4e-4;
  int warmup_steps = 2000;
  std::vector<int> decay_milestones;
  double decay_factor = 0.1;

  double at(int step) const {
    double lr = base_lr;
    if (warmup_steps > 0 && step < warmup_steps)
      lr = base_lr * (static_cast<double>(step) + 1.0) / warmup_steps;
    for (int m : decay_milestones)
      if (step >= m) lr *= decay_factor;
    return lr;
  }
};

}  // namespace bevnet
