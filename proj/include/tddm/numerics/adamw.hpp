#pragma once

#include <cmath>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/layers.hpp"
#include "tddm/numerics/tensor.hpp"

namespace tddm::numerics {

struct AdamWConfig {
  double learning_rate = 5e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamWConfig config;
  long step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
};

inline OptimizerState make_optimizer_state(const std::vector<const Tensor*>& params,
                                           AdamWConfig config) {
  OptimizerState state;
  state.config = config;
  for (const Tensor* p : params) {
    state.first_moment.emplace_back(p->shape());
    state.second_moment.emplace_back(p->shape());
  }
  return state;
}

inline OptimizerState make_optimizer_state(const ParameterStore& store, AdamWConfig config) {
  std::vector<const Tensor*> params;
  for (const auto& [_, v] : store.entries()) params.push_back(&v.value());
  return make_optimizer_state(params, config);
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
/// An empty gradient tensor counts as zero.
inline void adamw_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                       OptimizerState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw DimensionError("adamw_step: parameter/gradient/state counts disagree");
  }
  const AdamWConfig& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = *grads[k];
    Tensor& m = state.first_moment[k];
    Tensor& v = state.second_moment[k];
    if (m.shape() != p.shape() || (!g.empty() && g.shape() != p.shape())) {
      throw DimensionError("adamw_step: shape mismatch for parameter " + std::to_string(k));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.empty() ? 0.0 : g[i];
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
      p[i] -= c.learning_rate * c.weight_decay * p[i];
      p[i] -= c.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
    }
  }
}

inline void adamw_step(ParameterStore& store, OptimizerState& state) {
  std::vector<Tensor*> params;
  std::vector<const Tensor*> grads;
  for (auto& [_, v] : store.entries()) {
    params.push_back(&v.mutable_value());
    grads.push_back(&v.grad());
  }
  adamw_step(params, grads, state);
}

}  // namespace tddm::numerics
