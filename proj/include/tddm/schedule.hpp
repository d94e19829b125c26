#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/tensor.hpp"

namespace tddm::schedule {

using numerics::Tensor;

/// Weak-noise time used for frozen far-term priors and as the solver's
/// terminal time.
inline constexpr double kWeakNoiseT = 0.001;

/// Continuous-time variance-preserving schedule with a linear beta ramp over
/// t in [0, 1]:
///
///   alpha_bar(t) = exp(-beta_min t - (beta_max - beta_min) t^2 / 2)
///   alpha(t) = sqrt(alpha_bar), sigma(t) = sqrt(1 - alpha_bar),
///   lambda(t) = log(alpha / sigma).
struct VpSchedule {
  double beta_min = 0.1;
  double beta_max = 20.0;

  void validate() const {
    if (!(beta_min > 0.0) || !(beta_min < beta_max)) {
      throw ConfigError("VP schedule requires 0 < beta_min < beta_max");
    }
  }

  double alpha_bar(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) {
      throw DomainError("diffusion time must lie in [0, 1], got " + std::to_string(t));
    }
    return std::exp(-beta_min * t - 0.5 * (beta_max - beta_min) * t * t);
  }

  double alpha(double t) const { return std::sqrt(alpha_bar(t)); }

  // -expm1 keeps precision near t = 0 where alpha_bar -> 1.
  double sigma(double t) const {
    if (!(t >= 0.0 && t <= 1.0)) {
      throw DomainError("diffusion time must lie in [0, 1], got " + std::to_string(t));
    }
    return std::sqrt(-std::expm1(-beta_min * t - 0.5 * (beta_max - beta_min) * t * t));
  }

  double log_snr(double t) const { return std::log(alpha(t)) - std::log(sigma(t)); }
};

/// tau0 * alpha(t) + eps * sigma(t), elementwise.
inline Tensor forward_noise(const Tensor& clean, double t, const Tensor& eps,
                            const VpSchedule& schedule) {
  numerics::require_same_shape(clean, eps, "forward_noise");
  const double a = schedule.alpha(t);
  const double s = schedule.sigma(t);
  Tensor out(clean.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * clean[i] + s * eps[i];
  return out;
}

/// A clean-data prediction made at an earlier solver time.
struct PriorPrediction {
  Tensor x0;
  double t = 1.0;
};

/// One DPM-Solver++ step in data-prediction form from t_from to t_to.
///
/// Without `prior` this is the first-order update
///   x_to = (sigma_to / sigma_from) x_t - alpha_to (e^{-h} - 1) x0_hat,
/// with h = lambda(t_to) - lambda(t_from). With `prior` the x0 estimate is
/// linearly extrapolated in lambda (2M multistep correction).
inline Tensor solver_step(const VpSchedule& schedule, const Tensor& x_t, const Tensor& x0_hat,
                          double t_from, double t_to, const PriorPrediction* prior = nullptr) {
  if (!(t_from > t_to)) {
    throw ContractError("solver_step requires t_from > t_to, got " + std::to_string(t_from) +
                        " -> " + std::to_string(t_to));
  }
  numerics::require_same_shape(x_t, x0_hat, "solver_step");
  const double lam_from = schedule.log_snr(t_from);
  const double lam_to = schedule.log_snr(t_to);
  const double h = lam_to - lam_from;
  const double ratio = schedule.sigma(t_to) / schedule.sigma(t_from);
  const double coeff = -schedule.alpha(t_to) * std::expm1(-h);

  Tensor denoised = x0_hat;
  if (prior != nullptr) {
    numerics::require_same_shape(prior->x0, x0_hat, "solver_step prior");
    const double h_last = lam_from - schedule.log_snr(prior->t);
    if (h_last > 0.0) {
      const double r = h_last / h;
      const double w_now = 1.0 + 1.0 / (2.0 * r);
      const double w_prev = 1.0 / (2.0 * r);
      for (std::size_t i = 0; i < denoised.size(); ++i) {
        denoised[i] = w_now * x0_hat[i] - w_prev * prior->x0[i];
      }
    }
  }
  Tensor out(x_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ratio * x_t[i] + coeff * denoised[i];
  return out;
}

/// Strictly decreasing time grid t_0 > ... > t_K with a per-step order.
struct SolverPlan {
  std::vector<double> grid;
  std::vector<int> order;

  std::size_t evaluations() const { return grid.empty() ? 0 : grid.size() - 1; }

  void validate(double floor = kWeakNoiseT) const {
    if (grid.size() < 2) throw ConfigError("solver plan needs at least one step");
    if (order.size() != grid.size() - 1) throw ConfigError("solver plan order/grid mismatch");
    for (std::size_t i = 1; i < grid.size(); ++i) {
      if (!(grid[i] < grid[i - 1])) throw ConfigError("solver grid must be strictly decreasing");
    }
    if (grid.back() < floor) throw ConfigError("solver grid ends below the weak-noise floor");
    for (int o : order) {
      if (o != 1 && o != 2) throw ConfigError("solver order must be 1 or 2");
    }
  }
};

/// Uniform-in-t grid from `start` down to `floor` with `steps` evaluations.
/// Step 0 is first order; later steps use the multistep correction when
/// `multistep` is set. steps=2 yields {1.0, 0.5, 0.001}.
inline SolverPlan make_solver_plan(std::size_t steps, double floor = kWeakNoiseT,
                                   bool multistep = true, double start = 1.0) {
  if (steps == 0) throw ConfigError("inference needs at least one denoising step");
  SolverPlan plan;
  for (std::size_t k = 0; k < steps; ++k) {
    plan.grid.push_back(start * (1.0 - static_cast<double>(k) / static_cast<double>(steps)));
  }
  plan.grid.push_back(floor);
  for (std::size_t k = 0; k < steps; ++k) plan.order.push_back(k == 0 || !multistep ? 1 : 2);
  plan.validate(floor);
  return plan;
}

}  // namespace tddm::schedule
