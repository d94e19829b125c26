#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/model.hpp"
#include "tddm/schedule.hpp"
#include "tddm/scene/record.hpp"
#include "tddm/vocabulary.hpp"

namespace tddm::guidance {

using model::AdaLnMode;
using model::Denoiser;
using numerics::CounterRng;
using numerics::Tensor;
using vocabulary::SegmentLayout;
using vocabulary::Trajectory;
using vocabulary::Waypoint;

struct GuidanceConfig {
  double scale = 1.25;           // w
  std::size_t near_groups = 0;   // groups in the near-term set; 0 picks ceil(G/2)
  double weak_noise_t = schedule::kWeakNoiseT;
  std::size_t steps = 2;
  bool multistep = true;
  bool enabled = true;                // false: unconditional path only
  bool independent_selection = false; // each path picks its own argmax
  bool shared_segment_noise = false;  // one eps per anchor, repeated over its segments
  bool near_only_fusion = false;      // far-term taken from the conditional path unfused
  AdaLnMode mode = AdaLnMode::kDecoupled;
  schedule::VpSchedule schedule;
  std::uint64_t seed = 0;

  std::size_t near_count(std::size_t groups) const { return near_groups == 0 ? (groups + 1) / 2 : near_groups; }

  void validate(std::size_t groups) const {
    if (!(scale >= 0.0)) throw ConfigError("guidance scale must be non-negative");
    if (steps == 0) throw ConfigError("inference needs at least one step");
    if (near_count(groups) == 0 || near_count(groups) > groups) {
      throw ConfigError("near/far split must put between 1 and G groups in the near term");
    }
    if (!(weak_noise_t > 0.0 && weak_noise_t < 1.0)) throw ConfigError("weak-noise time must lie in (0, 1)");
    schedule.validate();
  }
};

struct PathResult {
  Tensor x0;                          // [N x F] final clean estimate of the selected anchor
  double score = 0.0;                 // sigmoid of the selected logit at the final evaluation
  std::size_t selected = 0;           // zero-based anchor index
  std::vector<Tensor> x0_history;     // clean estimate at each evaluation (all candidates at step 0)
  std::vector<std::size_t> candidates;  // candidate count at each evaluation
  std::vector<Tensor> model_inputs;   // noised input at each evaluation
};

/// Per-anchor noise shared by both paths: [M*N x F].
inline Tensor path_noise(std::size_t anchors, std::size_t segments, std::size_t features, std::uint64_t seed,
                         bool shared_segments) {
  CounterRng rng = CounterRng(seed).derive(0x9u);
  Tensor eps({anchors * segments, features});
  for (std::size_t a = 0; a < anchors; ++a) {
    for (std::size_t n = 0; n < segments; ++n) {
      for (std::size_t j = 0; j < features; ++j) {
        const std::size_t idx = (a * segments + n) * features + j;
        eps[idx] = shared_segments && n > 0 ? eps[(a * segments) * features + j] : rng.normal();
      }
    }
  }
  return eps;
}

namespace detail {

inline Tensor take_anchor(const Tensor& rows, std::size_t anchor, std::size_t segments) {
  const std::size_t F = rows.cols();
  Tensor out({segments, F});
  std::copy(rows.data() + anchor * segments * F, rows.data() + (anchor + 1) * segments * F, out.data());
  return out;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

/// One denoising path. Group g starts at `start_times[g]`; frozen groups are
/// held at their initial weak-noised values and conditioned on that time at
/// every evaluation. Non-frozen groups must start at the first grid time.
/// After the first evaluation the candidates are pruned to `forced_selection`
/// if given, otherwise to the highest-scoring anchor.
inline PathResult run_path(const Denoiser& model, const model::EncodedContext& ctx, const Tensor& anchors,
                           const std::vector<double>& start_times, const std::vector<bool>& frozen,
                           const schedule::SolverPlan& plan, const Tensor& eps, const schedule::VpSchedule& sched,
                           AdaLnMode mode = AdaLnMode::kDecoupled,
                           std::optional<std::size_t> forced_selection = std::nullopt) {
  const SegmentLayout layout = model.config().layout();
  const std::size_t N = layout.segments, G = layout.groups, F = model.config().token_features();
  if (ctx.samples != 1) throw DimensionError("run_path plans one scene at a time");
  if (start_times.size() != G || frozen.size() != G) throw DimensionError("mask must give one entry per group");
  if (anchors.rank() != 2 || anchors.cols() != F || anchors.rows() % N != 0) {
    throw DimensionError("anchors must be [M*N x (L+1)*3]");
  }
  if (eps.shape() != anchors.shape()) throw DimensionError("noise must match the anchor tensor");
  plan.validate(0.0);
  for (std::size_t g = 0; g < G; ++g) {
    if (!frozen[g] && start_times[g] != plan.grid.front()) {
      throw ContractError("non-frozen groups must start at the first solver time");
    }
  }
  const std::size_t M = anchors.rows() / N;
  if (forced_selection && *forced_selection >= M) throw ContractError("forced selection out of range");

  // Initial state: each group noised at its own start time.
  Tensor x(anchors.shape());
  for (std::size_t r = 0; r < anchors.rows(); ++r) {
    const double t = start_times[layout.group_of(r % N)];
    const double a = sched.alpha(t), s = sched.sigma(t);
    for (std::size_t j = 0; j < F; ++j) x[r * F + j] = a * anchors[r * F + j] + s * eps[r * F + j];
  }
  Tensor pinned = x;

  PathResult result;
  std::optional<schedule::PriorPrediction> prior;
  for (std::size_t k = 0; k + 1 < plan.grid.size(); ++k) {
    Tensor times({1, G});
    for (std::size_t g = 0; g < G; ++g) times[g] = frozen[g] ? start_times[g] : plan.grid[k];
    result.model_inputs.push_back(x);
    result.candidates.push_back(x.rows() / N);

    Tensor x0, logits;
    {
      numerics::NoGradGuard guard;
      const auto out = model.forward(x, times, ctx, mode);
      x0 = out.segments.value();
      logits = out.logits.value();
    }
    result.x0_history.push_back(x0);

    if (k == 0) {
      std::size_t best = 0;
      for (std::size_t a = 1; a < M; ++a) {
        if (logits[a] > logits[best]) best = a;
      }
      result.selected = forced_selection.value_or(best);
      x = detail::take_anchor(x, result.selected, N);
      pinned = detail::take_anchor(pinned, result.selected, N);
      x0 = detail::take_anchor(x0, result.selected, N);
      result.score = detail::sigmoid(logits[result.selected]);
    } else {
      result.score = detail::sigmoid(logits[0]);
    }
    result.x0 = x0;

    const schedule::PriorPrediction* use_prior = plan.order[k] == 2 && prior ? &*prior : nullptr;
    const Tensor stepped = schedule::solver_step(sched, x, x0, plan.grid[k], plan.grid[k + 1], use_prior);
    for (std::size_t r = 0; r < N; ++r) {
      const Tensor& src = frozen[layout.group_of(r)] ? pinned : stepped;
      std::copy(src.data() + r * F, src.data() + (r + 1) * F, x.data() + r * F);
    }
    prior = schedule::PriorPrediction{x0, plan.grid[k]};
  }
  return result;
}

/// Affine guidance u + w (c - u), written so that w = 0 and w = 1 return
/// the endpoints exactly.
inline Tensor cfg_fuse(const Tensor& uncond, const Tensor& cond, double w) {
  numerics::require_same_shape(uncond, cond, "cfg_fuse");
  Tensor out(uncond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - w) * uncond[i] + w * cond[i];
  return out;
}

struct PlanResult {
  Trajectory trajectory;   // metric, ego frame, [T x 3]
  Trajectory normalized;   // same in model units
  Tensor segments;         // fused segments before stitching, model units [N x F]
  std::size_t selected = 0;
  double score = 0.0;
  std::optional<PathResult> conditional;
  PathResult unconditional;
};

/// Asymmetric guidance: conditional path (near-term from full noise, far-term
/// pinned at the weak-noise prior of each anchor) then the unconditional
/// full-sequence path, fused and stitched.
inline PlanResult plan(const Denoiser& model, const scene::SceneContext& ctx, const Tensor& anchors,
                       const scene::NormalizationStats& stats, const GuidanceConfig& cfg) {
  const SegmentLayout layout = model.config().layout();
  const std::size_t N = layout.segments, G = layout.groups, F = model.config().token_features();
  cfg.validate(G);
  const auto enc = model.encode_context({&ctx});
  const schedule::SolverPlan splan = schedule::make_solver_plan(cfg.steps, cfg.weak_noise_t, cfg.multistep);
  const Tensor eps = path_noise(anchors.rows() / N, N, F, cfg.seed, cfg.shared_segment_noise);

  PlanResult result;
  const std::size_t near = cfg.near_count(G);
  if (cfg.enabled) {
    std::vector<double> start(G, splan.grid.front());
    std::vector<bool> frozen(G, false);
    for (std::size_t g = near; g < G; ++g) {
      start[g] = cfg.weak_noise_t;
      frozen[g] = true;
    }
    result.conditional = run_path(model, enc, anchors, start, frozen, splan, eps, cfg.schedule, cfg.mode);
  }
  std::optional<std::size_t> forced;
  if (result.conditional && !cfg.independent_selection) forced = result.conditional->selected;
  result.unconditional = run_path(model, enc, anchors, std::vector<double>(G, splan.grid.front()),
                                  std::vector<bool>(G, false), splan, eps, cfg.schedule, cfg.mode, forced);

  if (result.conditional) {
    const PathResult& c = *result.conditional;
    result.segments = cfg_fuse(result.unconditional.x0, c.x0, cfg.scale);
    if (cfg.near_only_fusion) {
      for (std::size_t r = 0; r < N; ++r) {
        if (layout.group_of(r) < near) continue;
        std::copy(c.x0.data() + r * F, c.x0.data() + (r + 1) * F, result.segments.data() + r * F);
      }
    }
    result.selected = c.selected;
    result.score = c.score;
  } else {
    result.segments = result.unconditional.x0;
    result.selected = result.unconditional.selected;
    result.score = result.unconditional.score;
  }

  vocabulary::SegmentedTrajectory seg{layout, result.segments.reshaped({N, layout.points_per_segment(), 3})};
  result.normalized = vocabulary::stitch(seg);
  result.trajectory = scene::denormalize(result.normalized, stats);
  for (std::size_t i = 0; i < result.trajectory.horizon(); ++i) {
    Waypoint w = result.trajectory[i];
    w.heading = vocabulary::wrap_angle(w.heading);
    result.trajectory.set(i, w);
  }
  return result;
}

}  // namespace tddm::guidance
