#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/tensor.hpp"
#include "tddm/scene/geometry.hpp"
#include "tddm/scene/world.hpp"
#include "tddm/vocabulary.hpp"

namespace tddm::scene {

using numerics::Tensor;
using vocabulary::Trajectory;

// Feature layouts.
inline constexpr std::size_t kEgoHistoryDim = 4;  // x, y, heading, v
inline constexpr std::size_t kEgoStateDim = 10;   // x, y, cos, sin, vx, vy, ax, ay, steering, yaw rate
inline constexpr std::size_t kAgentDim = 9;       // x, y, heading, v, length, width, one-hot(3)
inline constexpr std::size_t kObstacleDim = 5;    // x, y, heading, length, width

/// Condition for the planner. Padded slots are zero with mask 0.
struct SceneContext {
  Tensor ego_history;  // [H x 4]
  Tensor ego_state;    // [10]
  Tensor agents;       // [A x H x 9]
  std::vector<std::uint8_t> agent_mask;
  Tensor obstacles;  // [S x 5]
  std::vector<std::uint8_t> obstacle_mask;
  Tensor map_lanes;  // [K_map x P x 2]
  std::vector<std::uint8_t> lane_mask;
  Tensor navi;  // [K x P x D_route]
  std::vector<std::uint8_t> navi_mask;

  static SceneContext empty(const SceneCaps& caps) {
    SceneContext c;
    c.ego_history = Tensor({caps.history, kEgoHistoryDim});
    c.ego_state = Tensor({kEgoStateDim});
    c.agents = Tensor({caps.agents, caps.history, kAgentDim});
    c.agent_mask.assign(caps.agents, 0);
    c.obstacles = Tensor({caps.obstacles, kObstacleDim});
    c.obstacle_mask.assign(caps.obstacles, 0);
    c.map_lanes = Tensor({caps.map_lanes, caps.points, 2});
    c.lane_mask.assign(caps.map_lanes, 0);
    c.navi = Tensor({caps.route_lanes, caps.points, caps.route_dim});
    c.navi_mask.assign(caps.route_lanes, 0);
    return c;
  }

  SceneCaps caps() const {
    SceneCaps c;
    c.history = ego_history.dim(0);
    c.agents = agents.dim(0);
    c.obstacles = obstacles.dim(0);
    c.map_lanes = map_lanes.dim(0);
    c.points = map_lanes.dim(1);
    c.route_lanes = navi.dim(0);
    c.route_dim = navi.dim(2);
    return c;
  }

  bool operator==(const SceneContext&) const = default;
};

struct ScenarioRecord {
  SceneContext context;
  Tensor future;         // [T x 3] ego future, t = dt .. T*dt
  Tensor agent_futures;  // [A x T x 3]
  Waypoint ego_pose;     // current ego pose in this record's frame
  Tensor route;          // [R x 2] dense route centerline
  std::uint64_t seed = 0;
  std::string tag;
  GenerationParams params;

  Trajectory trajectory() const { return Trajectory(future); }
  std::size_t horizon() const { return future.dim(0); }

  bool operator==(const ScenarioRecord& o) const {
    return context == o.context && future == o.future && agent_futures == o.agent_futures &&
           ego_pose.x == o.ego_pose.x && ego_pose.y == o.ego_pose.y &&
           ego_pose.heading == o.ego_pose.heading && route == o.route && seed == o.seed &&
           tag == o.tag && params == o.params;
  }
};

namespace detail {

inline void set_row(Tensor& t, std::size_t offset, std::initializer_list<double> values) {
  std::size_t i = offset;
  for (double v : values) t[i++] = v;
}

inline std::array<double, 3> one_hot(AgentCategory c) {
  std::array<double, 3> h{0.0, 0.0, 0.0};
  h[static_cast<std::size_t>(c)] = 1.0;
  return h;
}

}  // namespace detail

/// Scene around the ego at `time`, in world coordinates. `history` holds the
/// ego states up to and including the current one (oldest first); only the
/// last caps.history entries are used.
inline SceneContext render_world_context(const World& w, double time,
                                         const std::vector<EgoKinematics>& history) {
  const SceneCaps& caps = w.params.caps;
  if (history.empty()) throw ContractError("render needs at least the current ego state");
  SceneContext c = SceneContext::empty(caps);
  const EgoKinematics& ego = history.back();

  for (std::size_t i = 0; i < caps.history; ++i) {
    const std::size_t back = caps.history - 1 - i;
    const EgoKinematics& e = history[history.size() > back ? history.size() - 1 - back : 0];
    detail::set_row(c.ego_history, i * kEgoHistoryDim, {e.pose.x, e.pose.y, e.pose.heading, e.speed});
  }
  {
    const double h = ego.pose.heading, ch = std::cos(h), sh = std::sin(h);
    const double a_lat = ego.speed * ego.speed * ego.curvature;
    detail::set_row(c.ego_state, 0,
                    {ego.pose.x, ego.pose.y, ch, sh, ego.speed * ch, ego.speed * sh,
                     ego.accel * ch - a_lat * sh, ego.accel * sh + a_lat * ch,
                     std::atan(kWheelbase * ego.curvature), ego.speed * ego.curvature});
  }

  // Closest agents first.
  std::vector<std::size_t> order(w.agents.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto dist = [&](std::size_t i) {
    const Waypoint p = w.agent_pose(i, time);
    return std::hypot(p.x - ego.pose.x, p.y - ego.pose.y);
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist(a) < dist(b); });
  for (std::size_t slot = 0; slot < std::min(order.size(), caps.agents); ++slot) {
    const std::size_t i = order[slot];
    const WorldAgent& a = w.agents[i];
    const auto hot = detail::one_hot(a.category);
    for (std::size_t k = 0; k < caps.history; ++k) {
      const double tk = time - static_cast<double>(caps.history - 1 - k) * kDt;
      const Waypoint p = w.agent_pose(i, tk);
      detail::set_row(c.agents, (slot * caps.history + k) * kAgentDim,
                      {p.x, p.y, p.heading, a.speed, a.length, a.width, hot[0], hot[1], hot[2]});
    }
    c.agent_mask[slot] = 1;
  }

  for (std::size_t i = 0; i < std::min(w.obstacles.size(), caps.obstacles); ++i) {
    const OrientedBox& b = w.obstacles[i].box;
    detail::set_row(c.obstacles, i * kObstacleDim, {b.x, b.y, b.heading, b.length, b.width});
    c.obstacle_mask[i] = 1;
  }

  // Lane chunks of P points every 2 m, the K_map closest to the ego.
  struct Chunk {
    double distance;
    std::vector<Point2> pts;
  };
  std::vector<Chunk> chunks;
  const double spacing = 2.0;
  const double chunk_len = spacing * static_cast<double>(caps.points - 1);
  for (const Polyline& lane : w.lanes) {
    const double s0 = lane.project({ego.pose.x, ego.pose.y}).s - 20.0;
    for (int j = 0; j < 5; ++j) {
      Chunk ch{INFINITY, {}};
      for (std::size_t k = 0; k < caps.points; ++k) {
        const Waypoint p = lane.pose_at(s0 + j * (chunk_len + spacing) + spacing * static_cast<double>(k));
        ch.pts.push_back({p.x, p.y});
        ch.distance = std::min(ch.distance, std::hypot(p.x - ego.pose.x, p.y - ego.pose.y));
      }
      chunks.push_back(std::move(ch));
    }
  }
  std::stable_sort(chunks.begin(), chunks.end(),
                   [](const Chunk& a, const Chunk& b) { return a.distance < b.distance; });
  for (std::size_t i = 0; i < std::min(chunks.size(), caps.map_lanes); ++i) {
    for (std::size_t k = 0; k < caps.points; ++k) {
      detail::set_row(c.map_lanes, (i * caps.points + k) * 2, {chunks[i].pts[k].x, chunks[i].pts[k].y});
    }
    c.lane_mask[i] = 1;
  }

  // Route lanes ahead of the ego, 4 m spacing.
  const double s_ego = w.route().project({ego.pose.x, ego.pose.y}).s;
  const double navi_spacing = 4.0;
  for (std::size_t r = 0; r < caps.route_lanes; ++r) {
    for (std::size_t k = 0; k < caps.points; ++k) {
      const double s = s_ego + navi_spacing * static_cast<double>(r * caps.points + k);
      const Waypoint p = w.route().pose_at(s);
      const std::size_t off = (r * caps.points + k) * caps.route_dim;
      c.navi[off] = p.x;
      c.navi[off + 1] = p.y;
      if (caps.route_dim > 2) c.navi[off + 2] = p.heading;
    }
    c.navi_mask[r] = 1;
  }
  return c;
}

/// Applies a rigid transform to every geometric quantity of a context.
inline SceneContext transform_context(const SceneContext& in, const Rigid2& T) {
  SceneContext c = in;
  const SceneCaps caps = in.caps();
  for (std::size_t i = 0; i < caps.history; ++i) {
    double* r = c.ego_history.data() + i * kEgoHistoryDim;
    const Waypoint p = T.apply(Waypoint{r[0], r[1], r[2]});
    r[0] = p.x, r[1] = p.y, r[2] = p.heading;
  }
  {
    double* s = c.ego_state.data();
    const Point2 p = T.apply(Point2{s[0], s[1]});
    const Point2 d = T.rotate({s[2], s[3]});
    const Point2 v = T.rotate({s[4], s[5]});
    const Point2 a = T.rotate({s[6], s[7]});
    s[0] = p.x, s[1] = p.y, s[2] = d.x, s[3] = d.y, s[4] = v.x, s[5] = v.y, s[6] = a.x, s[7] = a.y;
  }
  for (std::size_t i = 0; i < caps.agents; ++i) {
    if (!c.agent_mask[i]) continue;
    for (std::size_t k = 0; k < caps.history; ++k) {
      double* r = c.agents.data() + (i * caps.history + k) * kAgentDim;
      const Waypoint p = T.apply(Waypoint{r[0], r[1], r[2]});
      r[0] = p.x, r[1] = p.y, r[2] = p.heading;
    }
  }
  for (std::size_t i = 0; i < caps.obstacles; ++i) {
    if (!c.obstacle_mask[i]) continue;
    double* r = c.obstacles.data() + i * kObstacleDim;
    const Waypoint p = T.apply(Waypoint{r[0], r[1], r[2]});
    r[0] = p.x, r[1] = p.y, r[2] = p.heading;
  }
  for (std::size_t i = 0; i < caps.map_lanes; ++i) {
    if (!c.lane_mask[i]) continue;
    for (std::size_t k = 0; k < caps.points; ++k) {
      double* r = c.map_lanes.data() + (i * caps.points + k) * 2;
      const Point2 p = T.apply(Point2{r[0], r[1]});
      r[0] = p.x, r[1] = p.y;
    }
  }
  for (std::size_t i = 0; i < caps.route_lanes; ++i) {
    if (!c.navi_mask[i]) continue;
    for (std::size_t k = 0; k < caps.points; ++k) {
      double* r = c.navi.data() + (i * caps.points + k) * caps.route_dim;
      const Point2 p = T.apply(Point2{r[0], r[1]});
      r[0] = p.x, r[1] = p.y;
      if (caps.route_dim > 2) r[2] = wrap_angle(r[2] + T.theta);
    }
  }
  return c;
}

namespace detail {

inline void transform_poses(Tensor& t, const Rigid2& T) {
  for (std::size_t i = 0; i + 2 < t.size(); i += 3) {
    const Waypoint p = T.apply(Waypoint{t[i], t[i + 1], t[i + 2]});
    t[i] = p.x, t[i + 1] = p.y, t[i + 2] = p.heading;
  }
}

}  // namespace detail

inline ScenarioRecord transform_record(const ScenarioRecord& in, const Rigid2& T) {
  ScenarioRecord r = in;
  r.context = transform_context(in.context, T);
  detail::transform_poses(r.future, T);
  const std::size_t a = r.agent_futures.dim(0), h = r.agent_futures.dim(1);
  for (std::size_t i = 0; i < a; ++i) {
    if (!r.context.agent_mask[i]) continue;
    for (std::size_t k = 0; k < h; ++k) {
      double* p = r.agent_futures.data() + (i * h + k) * 3;
      const Waypoint w = T.apply(Waypoint{p[0], p[1], p[2]});
      p[0] = w.x, p[1] = w.y, p[2] = w.heading;
    }
  }
  for (std::size_t i = 0; i < r.route.dim(0); ++i) {
    const Point2 p = T.apply(Point2{r.route[2 * i], r.route[2 * i + 1]});
    r.route[2 * i] = p.x, r.route[2 * i + 1] = p.y;
  }
  r.ego_pose = T.apply(in.ego_pose);
  return r;
}

/// Re-expresses a record in the frame of its current ego pose.
inline ScenarioRecord to_ego_frame(const ScenarioRecord& in) {
  ScenarioRecord r = transform_record(in, Rigid2::into_frame_of(in.ego_pose));
  r.ego_pose = {0.0, 0.0, 0.0};
  return r;
}

/// Dense route polyline (1 m spacing) from 20 m behind to 220 m ahead of arc length s.
inline Tensor sample_route(const World& w, double s) {
  const std::size_t n = 241;
  Tensor out({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    const Waypoint p = w.route().pose_at(s - 20.0 + static_cast<double>(i));
    out[2 * i] = p.x;
    out[2 * i + 1] = p.y;
  }
  return out;
}

/// Agent poses for t = time + dt .. time + steps*dt, slotted like the context.
inline Tensor agent_futures_for(const World& w, double time, const SceneContext& ctx_world,
                                std::size_t steps) {
  const SceneCaps& caps = w.params.caps;
  Tensor out({caps.agents, steps, 3});
  // Recover the slot order used by the renderer by matching current positions.
  for (std::size_t slot = 0; slot < caps.agents; ++slot) {
    if (!ctx_world.agent_mask[slot]) continue;
    const double* cur = ctx_world.agents.data() + (slot * caps.history + caps.history - 1) * kAgentDim;
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t i = 0; i < w.agents.size(); ++i) {
      const Waypoint p = w.agent_pose(i, time);
      const double d = std::hypot(p.x - cur[0], p.y - cur[1]);
      if (d < best_d) best_d = d, best = i;
    }
    for (std::size_t k = 0; k < steps; ++k) {
      const Waypoint p = w.agent_pose(best, time + static_cast<double>(k + 1) * kDt);
      detail::set_row(out, (slot * steps + k) * 3, {p.x, p.y, p.heading});
    }
  }
  return out;
}

/// Synthetic scenario: world for the seed, expert future from the bicycle
/// model, everything expressed in the ego frame at t=0.
inline ScenarioRecord generate_scenario(std::uint64_t seed, const GenerationParams& params) {
  const World w = generate_world(seed, params);
  const SceneCaps& caps = params.caps;
  ScenarioRecord r;
  r.seed = seed;
  r.tag = family_name(w.family);
  r.params = params;
  r.context = render_world_context(w, 0.0, logged_history(w, caps.history));
  const auto future = expert_rollout(w, caps.horizon);
  r.future = Tensor({caps.horizon, 3});
  for (std::size_t i = 0; i < caps.horizon; ++i) {
    detail::set_row(r.future, 3 * i, {future[i].pose.x, future[i].pose.y, future[i].pose.heading});
  }
  r.agent_futures = agent_futures_for(w, 0.0, r.context, caps.horizon);
  r.route = sample_route(w, w.ego_s0);
  r.ego_pose = initial_ego(w).pose;
  return to_ego_frame(r);
}

/// Shared affine normalization. x is z-scored; y is divided by the x spread
/// (and optionally recentered); headings are divided by their spread.
struct NormalizationStats {
  double mean_x = 0.0;
  double std_x = 1.0;
  double mean_y = 0.0;  // used only when recenter_y is set
  bool recenter_y = false;
  double std_heading = 1.0;
  double mean_speed = 0.0;
  double std_speed = 1.0;
  double mean_length = 0.0;
  double std_length = 1.0;
  double mean_width = 0.0;
  double std_width = 1.0;

  void validate() const {
    for (double s : {std_x, std_heading, std_speed, std_length, std_width}) {
      if (!(s > 0.0) || !std::isfinite(s)) throw StatsError("normalization spread must be positive");
    }
  }
};

namespace detail {

struct Moments {
  double n = 0.0, sum = 0.0, sum_sq = 0.0;
  void add(double v) { n += 1.0, sum += v, sum_sq += v * v; }
  double mean() const { return n > 0 ? sum / n : 0.0; }
  double stddev() const {
    if (n < 2) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sum_sq / n - m * m));
  }
};

}  // namespace detail

/// Statistics over valid entries of ego-frame records: ego futures and
/// histories plus valid agent histories. Padded slots are skipped.
inline NormalizationStats compute_stats(const std::vector<ScenarioRecord>& records, bool recenter_y = false) {
  detail::Moments x, y, heading, speed, length, width;
  for (const ScenarioRecord& raw : records) {
    const ScenarioRecord r = to_ego_frame(raw);
    const SceneCaps caps = r.context.caps();
    for (std::size_t i = 0; i < r.future.dim(0); ++i) {
      x.add(r.future[3 * i]);
      y.add(r.future[3 * i + 1]);
      heading.add(r.future[3 * i + 2]);
    }
    for (std::size_t i = 0; i < caps.history; ++i) {
      const double* h = r.context.ego_history.data() + i * kEgoHistoryDim;
      x.add(h[0]), y.add(h[1]), heading.add(h[2]), speed.add(h[3]);
    }
    for (std::size_t a = 0; a < caps.agents; ++a) {
      if (!r.context.agent_mask[a]) continue;
      for (std::size_t k = 0; k < caps.history; ++k) {
        const double* h = r.context.agents.data() + (a * caps.history + k) * kAgentDim;
        x.add(h[0]), y.add(h[1]), heading.add(h[2]), speed.add(h[3]);
      }
      const double* h = r.context.agents.data() + a * caps.history * kAgentDim;
      length.add(h[4]), width.add(h[5]);
    }
  }
  if (x.n == 0) throw StatsError("no valid entries to compute normalization statistics");
  NormalizationStats s;
  s.mean_x = x.mean();
  s.std_x = x.stddev();
  s.recenter_y = recenter_y;
  s.mean_y = recenter_y ? y.mean() : 0.0;
  // Headings are only scaled, so their spread is the root mean square.
  s.std_heading = heading.n > 0 ? std::sqrt(heading.sum_sq / heading.n) : 0.0;
  s.mean_speed = speed.mean();
  s.std_speed = speed.stddev();
  // Records without agents carry no size information; fall back to unit scale.
  s.mean_length = length.n > 0 ? length.mean() : 0.0;
  s.std_length = length.n > 1 && length.stddev() > 0.0 ? length.stddev() : 1.0;
  s.mean_width = width.n > 0 ? width.mean() : 0.0;
  s.std_width = width.n > 1 && width.stddev() > 0.0 ? width.stddev() : 1.0;
  s.validate();
  return s;
}

namespace detail {

inline void norm_xy(double* p, const NormalizationStats& s) {
  p[0] = (p[0] - s.mean_x) / s.std_x;
  p[1] = (p[1] - s.mean_y) / s.std_x;
}

}  // namespace detail

/// [T x 3] metric trajectory -> normalized coordinates.
inline Tensor normalize_trajectory(const Tensor& traj, const NormalizationStats& s) {
  Tensor out = traj;
  for (std::size_t i = 0; i + 2 < out.size(); i += 3) {
    detail::norm_xy(out.data() + i, s);
    out[i + 2] /= s.std_heading;
  }
  return out;
}

/// Inverse of normalize_trajectory.
inline Tensor denormalize_trajectory(const Tensor& traj, const NormalizationStats& s) {
  Tensor out = traj;
  for (std::size_t i = 0; i + 2 < out.size(); i += 3) {
    out[i] = out[i] * s.std_x + s.mean_x;
    out[i + 1] = out[i + 1] * s.std_x + s.mean_y;
    out[i + 2] *= s.std_heading;
  }
  return out;
}

inline Trajectory denormalize(const Trajectory& traj, const NormalizationStats& s) {
  return Trajectory(denormalize_trajectory(traj.points(), s));
}

/// Normalized pose of a metric pose.
inline Waypoint normalize_pose(const Waypoint& p, const NormalizationStats& s) {
  return {(p.x - s.mean_x) / s.std_x, (p.y - s.mean_y) / s.std_x, p.heading / s.std_heading};
}

/// Ego-frame transform followed by feature scaling. Masked slots stay zero.
inline ScenarioRecord normalize(const ScenarioRecord& raw, const NormalizationStats& s) {
  s.validate();
  ScenarioRecord r = to_ego_frame(raw);
  SceneContext& c = r.context;
  const SceneCaps caps = c.caps();
  for (std::size_t i = 0; i < caps.history; ++i) {
    double* h = c.ego_history.data() + i * kEgoHistoryDim;
    detail::norm_xy(h, s);
    h[2] /= s.std_heading;
    h[3] = (h[3] - s.mean_speed) / s.std_speed;
  }
  {
    double* e = c.ego_state.data();
    detail::norm_xy(e, s);
    e[4] /= s.std_speed;
    e[5] /= s.std_speed;
  }
  for (std::size_t a = 0; a < caps.agents; ++a) {
    if (!c.agent_mask[a]) continue;
    for (std::size_t k = 0; k < caps.history; ++k) {
      double* h = c.agents.data() + (a * caps.history + k) * kAgentDim;
      detail::norm_xy(h, s);
      h[2] /= s.std_heading;
      h[3] = (h[3] - s.mean_speed) / s.std_speed;
      h[4] = (h[4] - s.mean_length) / s.std_length;
      h[5] = (h[5] - s.mean_width) / s.std_width;
    }
  }
  for (std::size_t o = 0; o < caps.obstacles; ++o) {
    if (!c.obstacle_mask[o]) continue;
    double* h = c.obstacles.data() + o * kObstacleDim;
    detail::norm_xy(h, s);
    h[2] /= s.std_heading;
    h[3] /= s.std_x;
    h[4] /= s.std_x;
  }
  for (std::size_t l = 0; l < caps.map_lanes; ++l) {
    if (!c.lane_mask[l]) continue;
    for (std::size_t k = 0; k < caps.points; ++k) detail::norm_xy(c.map_lanes.data() + (l * caps.points + k) * 2, s);
  }
  for (std::size_t l = 0; l < caps.route_lanes; ++l) {
    if (!c.navi_mask[l]) continue;
    for (std::size_t k = 0; k < caps.points; ++k) {
      double* p = c.navi.data() + (l * caps.points + k) * caps.route_dim;
      detail::norm_xy(p, s);
      if (caps.route_dim > 2) p[2] /= s.std_heading;
    }
  }
  r.future = normalize_trajectory(r.future, s);
  const std::size_t h = r.agent_futures.dim(1);
  for (std::size_t a = 0; a < caps.agents; ++a) {
    if (!c.agent_mask[a]) continue;
    for (std::size_t k = 0; k < h; ++k) {
      double* p = r.agent_futures.data() + (a * h + k) * 3;
      detail::norm_xy(p, s);
      p[2] /= s.std_heading;
    }
  }
  for (std::size_t i = 0; i < r.route.dim(0); ++i) detail::norm_xy(r.route.data() + 2 * i, s);
  return r;
}

}  // namespace tddm::scene
