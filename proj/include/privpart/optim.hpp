#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "privpart/nn.hpp"
#include "privpart/tensor.hpp"

namespace privpart {

struct OptimizerConfig {
  enum class Kind { sgd, adam };

  Kind kind = Kind::adam;
  double lr = 1e-4;
  double momentum = 0.0;      // sgd
  double weight_decay = 0.0;  // sgd
  double beta1 = 0.9;         // adam
  double beta2 = 0.999;       // adam
  double eps = 1e-8;          // adam
  // Multiply lr by decay_factor after every decay_every completed epochs.
  double decay_factor = 1.0;
  size_t decay_every = 0;

  static OptimizerConfig sgd(double lr, double momentum = 0.0,
                             double weight_decay = 0.0) {
    OptimizerConfig c;
    c.kind = Kind::sgd;
    c.lr = lr;
    c.momentum = momentum;
    c.weight_decay = weight_decay;
    return c;
  }
  static OptimizerConfig adam(double lr) {
    OptimizerConfig c;
    c.kind = Kind::adam;
    c.lr = lr;
    return c;
  }
};

// Applies gradients to a ParamStore. State (momentum / Adam moments) is keyed
// by parameter name and created lazily on first touch.
template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg), lr_(cfg.lr) {
    if (cfg_.lr <= 0.0) throw Error("optimizer: lr must be positive");
  }

  double lr() const { return lr_; }
  size_t steps() const { return step_count_; }

  // grads pair parameter names with gradient tensors; every name must exist
  // in the store with a matching shape.
  void step(ParamStore<T>& params,
            const std::vector<std::pair<std::string, Tensor<T>>>& grads) {
    ++step_count_;
    for (const auto& [name, g] : grads) {
      Tensor<T>& p = params.at(name);
      if (!p.same_shape(g))
        throw ShapeError("optimizer: gradient for " + name + " has shape " +
                         shape_str(g.shape()) + ", parameter is " +
                         shape_str(p.shape()));
      if (cfg_.kind == OptimizerConfig::Kind::sgd)
        sgd_update(name, p, g);
      else
        adam_update(name, p, g);
    }
  }

  // Call once after each completed epoch (1-based count).
  void on_epoch_end(size_t completed_epochs) {
    if (cfg_.decay_every > 0 && completed_epochs % cfg_.decay_every == 0)
      lr_ *= cfg_.decay_factor;
  }

 private:
  void sgd_update(const std::string& name, Tensor<T>& p, const Tensor<T>& g) {
    Tensor<T>& v = slot(velocity_, name, p.shape());
    const T mu = static_cast<T>(cfg_.momentum);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T lr = static_cast<T>(lr_);
    for (size_t i = 0; i < p.size(); ++i) {
      v[i] = mu * v[i] + g[i];
      p[i] -= lr * (v[i] + wd * p[i]);
    }
  }

  void adam_update(const std::string& name, Tensor<T>& p, const Tensor<T>& g) {
    Tensor<T>& m = slot(moment1_, name, p.shape());
    Tensor<T>& v = slot(moment2_, name, p.shape());
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
    for (size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = b1 * m[i] + (1.0 - b1) * gi;
      const double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / corr1;
      const double vhat = vi / corr2;
      p[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }

  Tensor<T>& slot(std::unordered_map<std::string, Tensor<T>>& table,
                  const std::string& name, const Shape& shape) {
    auto it = table.find(name);
    if (it == table.end())
      it = table.emplace(name, Tensor<T>(shape)).first;
    return it->second;
  }

  OptimizerConfig cfg_;
  double lr_;
  size_t step_count_ = 0;
  std::unordered_map<std::string, Tensor<T>> velocity_;
  std::unordered_map<std::string, Tensor<T>> moment1_;
  std::unordered_map<std::string, Tensor<T>> moment2_;
};

}  // namespace privpart
