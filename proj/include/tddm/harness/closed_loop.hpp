#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "tddm/guidance.hpp"
#include "tddm/harness/metrics.hpp"
#include "tddm/scene.hpp"

namespace tddm::harness {

using scene::EgoKinematics;
using scene::World;

struct ClosedLoopConfig {
  double episode_seconds = 15.0;
  double replan_seconds = 0.5;
  double accel_bound = 4.0;   // m/s^2
  double jerk_bound = 8.0;    // m/s^3
  double min_progress = 0.2;  // ratio below which the ego is not making progress

  void validate() const {
    if (!(episode_seconds > 0.0) || !(replan_seconds > 0.0)) throw ConfigError("episode and replan times must be positive");
    if (replan_seconds > episode_seconds) throw ConfigError("replan interval longer than the episode");
  }
};

struct EpisodeResult {
  double score = 0.0;
  double progress_ratio = 0.0;
  double comfort = 1.0;
  bool collision = false;
  bool off_route = false;
  std::vector<EgoKinematics> states;  // executed ego states, one per simulation step
};

/// Maps a metric ego-frame record to a metric ego-frame plan.
using Planner = std::function<Trajectory(const ScenarioRecord&)>;

/// Expert rollout from an arbitrary state and time.
inline std::vector<EgoKinematics> expert_from(const World& w, EgoKinematics e, double time, std::size_t steps) {
  scene::ExpertDriver driver(w);
  std::vector<EgoKinematics> out;
  for (std::size_t i = 0; i < steps; ++i) {
    e = driver.step(e, time + static_cast<double>(i) * scene::kDt);
    out.push_back(e);
  }
  return out;
}

/// Scene as seen by the planner at `time`, in the ego frame. The future field
/// holds the expert's continuation from the current state.
inline ScenarioRecord snapshot(const World& w, double time, const std::vector<EgoKinematics>& history) {
  const auto& caps = w.params.caps;
  const EgoKinematics& ego = history.back();
  ScenarioRecord r;
  r.seed = w.seed;
  r.tag = scene::family_name(w.family);
  r.params = w.params;
  r.context = scene::render_world_context(w, time, history);
  const auto future = expert_from(w, ego, time, caps.horizon);
  r.future = Tensor({caps.horizon, 3});
  for (std::size_t i = 0; i < caps.horizon; ++i) {
    r.future.at(i, 0) = future[i].pose.x;
    r.future.at(i, 1) = future[i].pose.y;
    r.future.at(i, 2) = future[i].pose.heading;
  }
  r.agent_futures = scene::agent_futures_for(w, time, r.context, caps.horizon);
  r.route = scene::sample_route(w, w.route().project({ego.pose.x, ego.pose.y}).s);
  r.ego_pose = ego.pose;
  return scene::to_ego_frame(r);
}

/// One tracking step towards `target` (world frame): the circular arc tangent
/// to the current heading through the target, at the speed that covers it in dt.
inline EgoKinematics track_step(const EgoKinematics& e, const vocabulary::Waypoint& target,
                                const scene::GenerationParams& p) {
  const double dt = scene::kDt;
  const double c = std::cos(e.pose.heading), s = std::sin(e.pose.heading);
  const double dx = target.x - e.pose.x, dy = target.y - e.pose.y;
  const double lx = c * dx + s * dy, ly = -s * dx + c * dy;
  const double d2 = lx * lx + ly * ly;
  double kappa = 0.0, arc = 0.0;
  // A target at or behind the ego means stop; no reversing.
  if (lx > 0.0) {
    kappa = 2.0 * ly / d2;
    arc = std::abs(kappa) > 1e-9 ? 2.0 * std::atan2(ly, lx) / kappa : lx;
  }
  kappa = std::clamp(kappa, -p.kappa_max, p.kappa_max);
  // Mean-speed integration: covering `arc` needs v_new = 2 arc/dt - v.
  const double v_new = std::max(0.0, 2.0 * arc / dt - e.speed);
  const double accel = std::clamp((v_new - e.speed) / dt, -p.decel_max, p.accel_max);
  return scene::bicycle_step(e, accel, kappa, dt);
}

inline bool ego_collides(const World& w, const EgoKinematics& e, double time) {
  const OrientedBox ego = ego_box(e.pose);
  for (std::size_t i = 0; i < w.agents.size(); ++i) {
    if (scene::boxes_overlap(ego, w.agent_box(i, time))) return true;
  }
  for (const auto& o : w.obstacles) {
    if (scene::boxes_overlap(ego, o.box)) return true;
  }
  return false;
}

/// Fraction of steps within the acceleration and jerk bounds.
inline double comfort_factor(const std::vector<EgoKinematics>& states, const ClosedLoopConfig& cfg) {
  if (states.empty()) return 1.0;
  std::size_t bad = 0;
  for (std::size_t i = 0; i < states.size(); ++i) {
    bool ok = std::abs(states[i].accel) <= cfg.accel_bound;
    if (i > 0) ok = ok && std::abs(states[i].accel - states[i - 1].accel) / scene::kDt <= cfg.jerk_bound;
    if (!ok) ++bad;
  }
  return 1.0 - static_cast<double>(bad) / static_cast<double>(states.size());
}

/// Non-reactive episode: agents follow their logged motion, the ego replans
/// every replan interval and tracks the first waypoints of each plan.
inline EpisodeResult run_episode(const World& w, const Planner& planner, const ClosedLoopConfig& cfg = {}) {
  cfg.validate();
  const double dt = scene::kDt;
  const auto total = static_cast<std::size_t>(std::llround(cfg.episode_seconds / dt));
  const auto every = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cfg.replan_seconds / dt)));
  const std::size_t H = w.params.caps.history;

  std::vector<EgoKinematics> history = scene::logged_history(w, H);
  EpisodeResult res;
  const scene::Polyline& route = w.route();
  const double s_start = route.project({history.back().pose.x, history.back().pose.y}).s;

  std::vector<vocabulary::Waypoint> plan_world;
  for (std::size_t k = 0; k < total; ++k) {
    const double time = static_cast<double>(k) * dt;
    if (k % every == 0) {
      const ScenarioRecord rec = snapshot(w, time, history);
      const Trajectory plan = planner(rec);
      const scene::Rigid2 to_world{history.back().pose.x, history.back().pose.y, history.back().pose.heading};
      plan_world.clear();
      for (std::size_t i = 0; i < plan.horizon(); ++i) plan_world.push_back(to_world.apply(plan[i]));
    }
    const std::size_t idx = std::min(k % every, plan_world.size() - 1);
    const EgoKinematics next = track_step(history.back(), plan_world[idx], w.params);
    history.push_back(next);
    if (history.size() > H) history.erase(history.begin());
    res.states.push_back(next);

    const double t_next = time + dt;
    if (ego_collides(w, next, t_next)) res.collision = true;
    if (std::abs(route.project({next.pose.x, next.pose.y}).lateral) > w.params.lane_width) res.off_route = true;
    if (res.collision || res.off_route) break;
  }

  const auto expert = scene::expert_rollout(w, total);
  const double expert_progress = route.project({expert.back().pose.x, expert.back().pose.y}).s - s_start;
  const double ego_progress = route.project({res.states.back().pose.x, res.states.back().pose.y}).s - s_start;
  res.progress_ratio = expert_progress > 0.0 ? std::clamp(ego_progress / expert_progress, 0.0, 1.0) : 1.0;
  res.comfort = comfort_factor(res.states, cfg);
  if (res.collision || res.off_route || res.progress_ratio < cfg.min_progress) {
    res.score = 0.0;
  } else {
    res.score = 100.0 * res.progress_ratio * res.comfort;
  }
  return res;
}

/// Planner backed by the trained model.
inline Planner model_planner(const model::Denoiser& model, const Tensor& anchors, const scene::NormalizationStats& stats,
                             const guidance::GuidanceConfig& gcfg) {
  return [&model, &anchors, stats, gcfg](const ScenarioRecord& rec) {
    const ScenarioRecord norm = scene::normalize(rec, stats);
    return guidance::plan(model, norm.context, anchors, stats, gcfg).trajectory;
  };
}

/// Replays the expert continuation carried in each snapshot.
inline Planner expert_planner() {
  return [](const ScenarioRecord& rec) { return rec.trajectory(); };
}

}  // namespace tddm::harness
