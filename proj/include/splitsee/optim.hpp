#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitsee/autograd.hpp"

namespace splitsee {

enum class OptimizerKind { sgd, momentum, adam };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd:
      return "sgd";
    case OptimizerKind::momentum:
      return "momentum";
    case OptimizerKind::adam:
      return "adam";
  }
  return "adam";
}

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") {
    return OptimizerKind::sgd;
  }
  if (s == "momentum") {
    return OptimizerKind::momentum;
  }
  if (s == "adam") {
    return OptimizerKind::adam;
  }
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd, momentum or adam)");
}

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First-order optimizer over a ParamStore. Parameters without a gradient in
/// a step are left untouched, state included.
template <class S>
class Optimizer {
 public:
  Optimizer(const OptimizerConfig& cfg, const ParamStore<S>& params) : cfg_(cfg) {
    if (!(cfg.learning_rate >= 0.0)) {
      throw std::invalid_argument("optimizer: learning rate must be nonnegative");
    }
    if (cfg.kind != OptimizerKind::sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        first_.push_back(Matrix<S>::Zero(params.value(i).rows(), params.value(i).cols()));
        if (cfg.kind == OptimizerKind::adam) {
          second_.push_back(Matrix<S>::Zero(params.value(i).rows(), params.value(i).cols()));
        }
      }
    }
  }

  void step(ParamStore<S>& params, const std::vector<Matrix<S>>& grads) {
    ++steps_;
    const double lr = cfg_.learning_rate;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const Matrix<S>& g = grads[i];
      if (g.size() == 0) {
        continue;
      }
      Matrix<S>& p = params.value(i);
      switch (cfg_.kind) {
        case OptimizerKind::sgd:
          p -= static_cast<S>(lr) * g;
          break;
        case OptimizerKind::momentum:
          first_[i] = static_cast<S>(cfg_.momentum) * first_[i] + g;
          p -= static_cast<S>(lr) * first_[i];
          break;
        case OptimizerKind::adam: {
          first_[i] = static_cast<S>(cfg_.beta1) * first_[i] + static_cast<S>(1.0 - cfg_.beta1) * g;
          second_[i] = static_cast<S>(cfg_.beta2) * second_[i] + static_cast<S>(1.0 - cfg_.beta2) * g.cwiseAbs2();
          const S step_size = static_cast<S>(lr / bc1);
          const S inv_bc2 = static_cast<S>(1.0 / bc2);
          const S eps = static_cast<S>(cfg_.eps);
          p.array() -= step_size * first_[i].array() / ((second_[i].array() * inv_bc2).sqrt() + eps);
          break;
        }
      }
    }
  }

  const OptimizerConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return steps_; }

  /// Optimizer state as named tensors (`m.<param>`, `v.<param>`).
  ParamStore<S> export_state(const ParamStore<S>& params) const {
    ParamStore<S> out;
    for (std::size_t i = 0; i < first_.size(); ++i) {
      out.add("m." + params.name(i), first_[i]);
    }
    for (std::size_t i = 0; i < second_.size(); ++i) {
      out.add("v." + params.name(i), second_[i]);
    }
    return out;
  }

  void import_state(const ParamStore<S>& params, const ParamStore<S>& state, std::uint64_t steps) {
    for (std::size_t i = 0; i < first_.size(); ++i) {
      first_[i] = state.value(state.id("m." + params.name(i), first_[i].rows(), first_[i].cols()));
    }
    for (std::size_t i = 0; i < second_.size(); ++i) {
      second_[i] = state.value(state.id("v." + params.name(i), second_[i].rows(), second_[i].cols()));
    }
    steps_ = steps;
  }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix<S>> first_;
  std::vector<Matrix<S>> second_;
  std::uint64_t steps_ = 0;
};

}  // namespace splitsee
