#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/guidance.hpp"
#include "tddm/scene.hpp"

namespace tddm::harness {

using numerics::Tensor;
using scene::OrientedBox;
using scene::ScenarioRecord;
using vocabulary::Trajectory;

struct DisplacementError {
  double ade = 0.0;
  double fde = 0.0;
};

inline DisplacementError displacement_error(const Trajectory& pred, const Trajectory& gt) {
  if (pred.horizon() != gt.horizon()) throw DimensionError("prediction and ground truth differ in length");
  DisplacementError e;
  for (std::size_t i = 0; i < gt.horizon(); ++i) {
    const double d = std::hypot(pred[i].x - gt[i].x, pred[i].y - gt[i].y);
    e.ade += d;
    if (i + 1 == gt.horizon()) e.fde = d;
  }
  e.ade /= static_cast<double>(gt.horizon());
  return e;
}

/// Largest metric distance between the end of one segment and the start of
/// the next, before stitching. `segments` is [N x (L+1)*3] in model units.
inline double boundary_gap(const Tensor& segments, const scene::NormalizationStats& stats) {
  if (segments.rank() != 2 || segments.cols() % 3 != 0) throw DimensionError("segments must be [N x (L+1)*3]");
  const std::size_t N = segments.rows(), P = segments.cols() / 3;
  const Tensor metric = scene::denormalize_trajectory(segments.reshaped({N * P, 3}), stats);
  double gap = 0.0;
  for (std::size_t n = 0; n + 1 < N; ++n) {
    const std::size_t end = n * P + P - 1, start = (n + 1) * P;
    gap = std::max(gap, std::hypot(metric.at(end, 0) - metric.at(start, 0), metric.at(end, 1) - metric.at(start, 1)));
  }
  return gap;
}

inline OrientedBox ego_box(const vocabulary::Waypoint& w) {
  return {w.x, w.y, w.heading, scene::kEgoLength, scene::kEgoWidth};
}

/// Footprint of agent slot `slot` at future step `k`, sized from its latest history row.
inline OrientedBox agent_future_box(const ScenarioRecord& r, std::size_t slot, std::size_t k) {
  const std::size_t H = r.context.agents.dim(1);
  const double* last = r.context.agents.data() + (slot * H + H - 1) * scene::kAgentDim;
  const std::size_t T = r.agent_futures.dim(1);
  const double* p = r.agent_futures.data() + (slot * T + k) * 3;
  return {p[0], p[1], p[2], last[4], last[5]};
}

inline OrientedBox obstacle_box(const ScenarioRecord& r, std::size_t slot) {
  const double* o = r.context.obstacles.data() + slot * scene::kObstacleDim;
  return {o[0], o[1], o[2], o[3], o[4]};
}

/// True if any planned ego footprint overlaps a valid agent at the same step
/// or any valid static obstacle. `r` must be in metric ego-frame units.
inline bool plan_collides(const Trajectory& plan, const ScenarioRecord& r) {
  const std::size_t T = std::min(plan.horizon(), r.agent_futures.dim(1));
  for (std::size_t k = 0; k < plan.horizon(); ++k) {
    const OrientedBox ego = ego_box(plan[k]);
    for (std::size_t o = 0; o < r.context.obstacle_mask.size(); ++o) {
      if (r.context.obstacle_mask[o] && scene::boxes_overlap(ego, obstacle_box(r, o))) return true;
    }
    if (k >= T) continue;
    for (std::size_t a = 0; a < r.context.agent_mask.size(); ++a) {
      if (r.context.agent_mask[a] && scene::boxes_overlap(ego, agent_future_box(r, a, k))) return true;
    }
  }
  return false;
}

inline scene::Polyline route_polyline(const ScenarioRecord& r) {
  std::vector<scene::Point2> pts;
  for (std::size_t i = 0; i < r.route.rows(); ++i) pts.push_back({r.route.at(i, 0), r.route.at(i, 1)});
  return scene::Polyline(std::move(pts));
}

/// Mean unsigned distance of the plan from the route centerline.
inline double route_lateral_deviation(const Trajectory& plan, const ScenarioRecord& r) {
  const scene::Polyline route = route_polyline(r);
  double sum = 0.0;
  for (std::size_t k = 0; k < plan.horizon(); ++k) sum += std::abs(route.project({plan[k].x, plan[k].y}).lateral);
  return sum / static_cast<double>(plan.horizon());
}

struct ScenarioMetrics {
  std::uint64_t seed = 0;
  std::string tag;
  double ade = 0.0;
  double fde = 0.0;
  double boundary_gap = 0.0;
  bool collision = false;
  double lateral = 0.0;
  double closed_loop = std::numeric_limits<double>::quiet_NaN();  // NaN when no episode was run
  std::size_t selected = 0;
  double confidence = 0.0;
};

struct EvalReport {
  std::vector<ScenarioMetrics> scenarios;
  double ade = 0.0;
  double fde = 0.0;
  double boundary_gap = 0.0;
  double collision_rate = 0.0;
  double lateral = 0.0;
  double closed_loop = 0.0;
  std::size_t episodes = 0;
  double composite = 0.0;

  std::string to_text() const;
};

/// Open-loop part: 100 (1 - collision rate) / (1 + ADE/2 + lateral/2).
/// With closed-loop episodes present, the two parts are averaged.
inline double composite_score(double ade, double lateral, double collision_rate, double closed_loop,
                              std::size_t episodes) {
  const double open = 100.0 * (1.0 - collision_rate) / (1.0 + 0.5 * ade + 0.5 * lateral);
  const double c = episodes == 0 ? open : 0.5 * (open + closed_loop);
  return std::clamp(c, 0.0, 100.0);
}

inline void finalize(EvalReport& r) {
  r.ade = r.fde = r.boundary_gap = r.collision_rate = r.lateral = r.closed_loop = 0.0;
  r.episodes = 0;
  for (const auto& s : r.scenarios) {
    r.ade += s.ade;
    r.fde += s.fde;
    r.boundary_gap += s.boundary_gap;
    r.collision_rate += s.collision ? 1.0 : 0.0;
    r.lateral += s.lateral;
    if (!std::isnan(s.closed_loop)) {
      r.closed_loop += s.closed_loop;
      ++r.episodes;
    }
  }
  const double n = std::max<std::size_t>(1, r.scenarios.size());
  r.ade /= n;
  r.fde /= n;
  r.boundary_gap /= n;
  r.collision_rate /= n;
  r.lateral /= n;
  if (r.episodes > 0) r.closed_loop /= static_cast<double>(r.episodes);
  r.composite = composite_score(r.ade, r.lateral, r.collision_rate, r.closed_loop, r.episodes);
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "# synthetic desk-scale benchmark; scores are not comparable to any published leaderboard\n";
  os << "scenarios = " << scenarios.size() << "\n";
  os << "ade_m = " << fmt(ade) << "\n";
  os << "fde_m = " << fmt(fde) << "\n";
  os << "boundary_gap_m = " << fmt(boundary_gap) << "\n";
  os << "collision_rate = " << fmt(collision_rate) << "\n";
  os << "lateral_m = " << fmt(lateral) << "\n";
  os << "closed_loop_episodes = " << episodes << "\n";
  os << "closed_loop_score = " << fmt(closed_loop) << "\n";
  os << "composite = " << fmt(composite) << "\n";
  os << "seed,tag,ade,fde,boundary_gap,collision,lateral,closed_loop,selected,confidence\n";
  for (const auto& s : scenarios) {
    os << s.seed << ',' << s.tag << ',' << fmt(s.ade) << ',' << fmt(s.fde) << ',' << fmt(s.boundary_gap) << ','
       << (s.collision ? 1 : 0) << ',' << fmt(s.lateral) << ',' << (std::isnan(s.closed_loop) ? "nan" : fmt(s.closed_loop))
       << ',' << s.selected << ',' << fmt(s.confidence) << "\n";
  }
  return os.str();
}

/// Metrics of one plan against its metric ego-frame record.
inline ScenarioMetrics score_plan(const guidance::PlanResult& plan, const ScenarioRecord& raw,
                                  const scene::NormalizationStats& stats) {
  ScenarioMetrics m;
  m.seed = raw.seed;
  m.tag = raw.tag;
  const auto d = displacement_error(plan.trajectory, raw.trajectory());
  m.ade = d.ade;
  m.fde = d.fde;
  m.boundary_gap = boundary_gap(plan.segments, stats);
  m.collision = plan_collides(plan.trajectory, raw);
  m.lateral = route_lateral_deviation(plan.trajectory, raw);
  m.selected = plan.selected;
  m.confidence = plan.score;
  return m;
}

/// Plans every record (metric, ego frame) and scores it.
inline EvalReport evaluate_open_loop(const model::Denoiser& model, const Tensor& anchors,
                                     const scene::NormalizationStats& stats,
                                     const std::vector<ScenarioRecord>& records,
                                     const guidance::GuidanceConfig& gcfg) {
  EvalReport report;
  for (const ScenarioRecord& raw : records) {
    const ScenarioRecord norm = scene::normalize(raw, stats);
    const auto plan = guidance::plan(model, norm.context, anchors, stats, gcfg);
    report.scenarios.push_back(score_plan(plan, raw, stats));
  }
  finalize(report);
  return report;
}

}  // namespace tddm::harness
