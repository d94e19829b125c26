#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/rng.hpp"
#include "tddm/scene/geometry.hpp"

namespace tddm::scene {

enum class LaneFamily { kStraight, kCurve, kTurnLeft, kTurnRight, kMixed };

inline std::string family_name(LaneFamily f) {
  switch (f) {
    case LaneFamily::kStraight: return "straight";
    case LaneFamily::kCurve: return "curve";
    case LaneFamily::kTurnLeft: return "turn_left";
    case LaneFamily::kTurnRight: return "turn_right";
    case LaneFamily::kMixed: return "mixed";
  }
  return "mixed";
}

inline LaneFamily parse_family(const std::string& s) {
  if (s == "straight") return LaneFamily::kStraight;
  if (s == "curve") return LaneFamily::kCurve;
  if (s == "turn_left") return LaneFamily::kTurnLeft;
  if (s == "turn_right") return LaneFamily::kTurnRight;
  if (s == "mixed") return LaneFamily::kMixed;
  throw ConfigError("unknown lane family '" + s + "'");
}

/// Padded slot counts for a scene.
struct SceneCaps {
  std::size_t agents = 8;
  std::size_t obstacles = 2;
  std::size_t map_lanes = 8;
  std::size_t route_lanes = 2;
  std::size_t points = 20;
  std::size_t route_dim = 2;
  std::size_t history = 20;
  std::size_t horizon = 80;

  bool operator==(const SceneCaps&) const = default;
};

/// Generation knobs. Negative speeds and counts of -1 mean "drawn from the seed".
struct GenerationParams {
  LaneFamily family = LaneFamily::kMixed;
  bool turn_only = false;  // with kMixed: choose only between left and right turns
  int agent_count = -1;
  int obstacle_count = -1;
  double initial_speed = -1.0;
  double target_speed = -1.0;
  double v_max = 15.0;
  double kappa_max = 0.2;
  double accel_max = 2.0;
  double decel_max = 4.0;
  double lateral_accel_max = 2.5;
  double lane_width = 3.5;
  bool lead_vehicle = true;  // allow a slower vehicle ahead on the route
  SceneCaps caps;

  bool operator==(const GenerationParams&) const = default;

  void validate() const {
    if (agent_count < -1 || obstacle_count < -1) throw ConfigError("negative agent or obstacle count");
    if (agent_count > static_cast<int>(caps.agents)) throw ConfigError("agent count exceeds cap");
    if (obstacle_count > static_cast<int>(caps.obstacles)) throw ConfigError("obstacle count exceeds cap");
    if (!(v_max > 0.0) || !(kappa_max > 0.0) || !(accel_max > 0.0) || !(decel_max > 0.0) ||
        !(lateral_accel_max > 0.0) || !(lane_width > 0.0)) {
      throw ConfigError("kinematic limits must be positive");
    }
    if (initial_speed > v_max || target_speed > v_max) throw ConfigError("speed exceeds v_max");
    if (caps.agents < 1 || caps.obstacles < 1 || caps.map_lanes < 1 || caps.route_lanes < 1) {
      throw ConfigError("scene caps must allow at least one slot per modality");
    }
    if (caps.route_dim > 3) throw ConfigError("route feature dimension must be 2 or 3");
    if (caps.history < 2 || caps.horizon < 2 || caps.points < 2 || caps.route_dim < 2) {
      throw ConfigError("scene caps too small");
    }
  }
};

inline constexpr double kDt = 0.1;
inline constexpr double kEgoLength = 4.8;
inline constexpr double kEgoWidth = 2.0;
inline constexpr double kWheelbase = 2.9;

enum class AgentCategory { kVehicle = 0, kPedestrian = 1, kCyclist = 2 };

/// A constant-velocity agent travelling along one lane.
struct WorldAgent {
  std::size_t lane = 0;
  double s0 = 0.0;
  double speed = 0.0;
  double length = 4.5;
  double width = 1.9;
  AgentCategory category = AgentCategory::kVehicle;
};

struct WorldObstacle {
  OrientedBox box;
};

/// Static map plus agent motion, expressed in the frame of the ego at t=0.
struct World {
  std::uint64_t seed = 0;
  LaneFamily family = LaneFamily::kStraight;
  GenerationParams params;
  std::vector<Polyline> lanes;  // lanes[0] is the route
  std::vector<WorldAgent> agents;
  std::vector<WorldObstacle> obstacles;
  double ego_s0 = 0.0;  // route arc length of the ego at t=0
  double initial_speed = 0.0;
  double target_speed = 0.0;

  const Polyline& route() const { return lanes.front(); }

  Waypoint agent_pose(std::size_t i, double time) const {
    const WorldAgent& a = agents[i];
    return lanes[a.lane].pose_at(a.s0 + a.speed * time);
  }

  OrientedBox agent_box(std::size_t i, double time) const {
    const Waypoint p = agent_pose(i, time);
    return {p.x, p.y, p.heading, agents[i].length, agents[i].width};
  }
};

namespace detail {

/// Route centerline sampled every 0.5 m, starting `back` metres behind the ego.
inline Polyline make_route(LaneFamily family, double lead_in, double radius, double curve_kappa,
                           double back = 60.0, double ahead = 360.0) {
  const double step = 0.5;
  std::vector<Point2> pts;
  double x = -back, y = 0.0, h = 0.0;
  double s = -back;
  double turn_sign = family == LaneFamily::kTurnRight ? -1.0 : 1.0;
  double kappa = 0.0;
  double arc_len = 0.0;
  if (family == LaneFamily::kTurnLeft || family == LaneFamily::kTurnRight) {
    kappa = turn_sign / radius;
    arc_len = 0.5 * std::numbers::pi * radius;
  } else if (family == LaneFamily::kCurve) {
    kappa = curve_kappa;
    arc_len = std::min(ahead, 0.5 * std::numbers::pi / std::max(std::abs(curve_kappa), 1e-9));
  }
  pts.push_back({x, y});
  while (s < ahead) {
    const bool on_arc = kappa != 0.0 && s >= lead_in && s < lead_in + arc_len;
    if (on_arc) {
      const double dh = kappa * step;
      x += (std::sin(h + dh) - std::sin(h)) / kappa;
      y += (std::cos(h) - std::cos(h + dh)) / kappa;
      h += dh;
    } else {
      x += step * std::cos(h);
      y += step * std::sin(h);
    }
    s += step;
    pts.push_back({x, y});
  }
  return Polyline(std::move(pts));
}

}  // namespace detail

/// Builds the world for a seed. Deterministic: every draw comes from a
/// counter-based stream keyed by the seed.
inline World generate_world(std::uint64_t seed, const GenerationParams& params) {
  params.validate();
  numerics::CounterRng rng(numerics::mix64(seed ^ 0x5CE7E5CE7EULL));
  World w;
  w.seed = seed;
  w.params = params;

  LaneFamily family = params.family;
  if (family == LaneFamily::kMixed) {
    if (params.turn_only) {
      family = rng.uniform() < 0.5 ? LaneFamily::kTurnLeft : LaneFamily::kTurnRight;
    } else {
      const double u = rng.uniform();
      family = u < 0.3 ? LaneFamily::kStraight
               : u < 0.6 ? LaneFamily::kCurve
               : u < 0.8 ? LaneFamily::kTurnLeft
                         : LaneFamily::kTurnRight;
    }
  }
  w.family = family;

  const bool turning = family == LaneFamily::kTurnLeft || family == LaneFamily::kTurnRight;
  const double lead_in = turning ? rng.uniform(3.0, 12.0) : rng.uniform(5.0, 30.0);
  const double radius = rng.uniform(10.0, 18.0);
  double curve_kappa = rng.uniform(0.006, 0.02);
  if (rng.uniform() < 0.5) curve_kappa = -curve_kappa;
  const double back = 60.0;
  w.lanes.push_back(detail::make_route(family, lead_in, radius, curve_kappa, back));
  w.lanes.push_back(w.lanes[0].offset(params.lane_width));
  w.lanes.push_back(w.lanes[0].offset(-params.lane_width));
  w.lanes.push_back(w.lanes[0].offset(2.0 * params.lane_width).reversed());
  w.ego_s0 = back;

  // Speeds are kept below what the sharpest bend of the family allows.
  const double bend_kappa = family == LaneFamily::kStraight ? 0.0
                            : family == LaneFamily::kCurve  ? std::abs(curve_kappa)
                                                            : 1.0 / radius;
  const double v_bend =
      bend_kappa > 0.0 ? std::sqrt(params.lateral_accel_max / bend_kappa) : params.v_max;
  w.target_speed = params.target_speed >= 0.0
                       ? params.target_speed
                       : std::min(params.v_max, rng.uniform(8.0, 14.0));
  w.initial_speed = params.initial_speed >= 0.0
                        ? params.initial_speed
                        : std::min({params.v_max, w.target_speed * rng.uniform(0.6, 1.0),
                                    v_bend + rng.uniform(0.0, 2.0)});

  const std::size_t n_agents = params.agent_count >= 0
                                   ? static_cast<std::size_t>(params.agent_count)
                                   : static_cast<std::size_t>(rng.below(params.caps.agents + 1));
  const std::size_t n_obstacles = params.obstacle_count >= 0
                                      ? static_cast<std::size_t>(params.obstacle_count)
                                      : static_cast<std::size_t>(rng.below(params.caps.obstacles + 1));

  for (std::size_t i = 0; i < n_agents; ++i) {
    WorldAgent a;
    const double cat = rng.uniform();
    a.category = cat < 0.8 ? AgentCategory::kVehicle : cat < 0.9 ? AgentCategory::kCyclist
                                                                  : AgentCategory::kPedestrian;
    if (a.category == AgentCategory::kVehicle) {
      a.length = rng.uniform(4.0, 5.5);
      a.width = rng.uniform(1.7, 2.1);
    } else if (a.category == AgentCategory::kCyclist) {
      a.length = rng.uniform(1.6, 2.0);
      a.width = rng.uniform(0.5, 0.8);
    } else {
      a.length = rng.uniform(0.4, 0.7);
      a.width = rng.uniform(0.4, 0.7);
    }
    const bool lead = i == 0 && params.lead_vehicle && rng.uniform() < 0.5;
    if (lead) {
      // Slower vehicle ahead in the ego lane; the expert follows it.
      a.lane = 0;
      a.s0 = w.ego_s0 + rng.uniform(20.0, 45.0);
      a.speed = w.target_speed * rng.uniform(0.5, 0.9);
    } else {
      a.lane = 1 + static_cast<std::size_t>(rng.below(3));
      const double base = a.category == AgentCategory::kPedestrian ? 1.3
                          : a.category == AgentCategory::kCyclist  ? 5.0
                                                                   : 10.0;
      a.speed = base * rng.uniform(0.6, 1.2);
      a.s0 = rng.uniform(20.0, w.lanes[a.lane].length() - 120.0);
    }
    w.agents.push_back(a);
  }

  for (std::size_t i = 0; i < n_obstacles; ++i) {
    const double s = w.ego_s0 + rng.uniform(10.0, 70.0);
    const double side = rng.uniform(2.0 * params.lane_width, 2.0 * params.lane_width + 3.0);
    const Waypoint p = w.route().pose_at(s);
    OrientedBox b;
    b.x = p.x + side * std::sin(p.heading);
    b.y = p.y - side * std::cos(p.heading);
    b.heading = p.heading + rng.uniform(-0.3, 0.3);
    b.length = rng.uniform(1.0, 4.0);
    b.width = rng.uniform(1.0, 2.5);
    w.obstacles.push_back({b});
  }
  return w;
}

/// Instantaneous ego kinematics in some frame.
struct EgoKinematics {
  Waypoint pose;
  double speed = 0.0;
  double accel = 0.0;
  double curvature = 0.0;
};

/// Kinematic bicycle step with exact arc integration over dt at constant
/// curvature and the mean of the old and new speeds.
inline EgoKinematics bicycle_step(const EgoKinematics& s, double accel, double curvature, double dt) {
  EgoKinematics out;
  out.speed = std::max(0.0, s.speed + accel * dt);
  out.accel = (out.speed - s.speed) / dt;
  out.curvature = curvature;
  const double dist = 0.5 * (s.speed + out.speed) * dt;
  const double h = s.pose.heading;
  if (std::abs(curvature) < 1e-12) {
    out.pose = {s.pose.x + dist * std::cos(h), s.pose.y + dist * std::sin(h), h};
  } else {
    const double dh = curvature * dist;
    out.pose = {s.pose.x + (std::sin(h + dh) - std::sin(h)) / curvature,
                s.pose.y + (std::cos(h) - std::cos(h + dh)) / curvature, wrap_angle(h + dh)};
  }
  return out;
}

/// Route-tracking controller: curvature tracking for steering, and a car-following
/// law with curvature preview for speed.
class ExpertDriver {
 public:
  explicit ExpertDriver(const World& world) : world_(world) {}

  struct Command {
    double accel = 0.0;
    double curvature = 0.0;
  };

  Command command(const EgoKinematics& ego, double time) const {
    const GenerationParams& p = world_.params;
    const Polyline& route = world_.route();
    const auto proj = route.project({ego.pose.x, ego.pose.y});

    // Curvature feedforward from the route plus critically damped feedback on
    // lateral and heading error (natural frequency per metre travelled).
    const double omega = 0.15;
    const Waypoint ref = route.pose_at(proj.s);
    const double e_heading = wrap_angle(ego.pose.heading - ref.heading);
    double kappa = route.curvature_at(proj.s + 0.5 * ego.speed * kDt) - omega * omega * proj.lateral -
                   2.0 * omega * e_heading;
    kappa = std::clamp(kappa, -p.kappa_max, p.kappa_max);

    double v_des = std::min(world_.target_speed, p.v_max);
    const double preview = std::max(20.0, 3.0 * ego.speed);
    for (double ds = 0.0; ds <= preview; ds += 2.0) {
      const double k = std::abs(route.curvature_at(proj.s + ds));
      if (k > 1e-6) {
        // Allowed speed at distance ds given braking at a comfortable rate.
        const double v_curve = std::sqrt(p.lateral_accel_max / k);
        v_des = std::min(v_des, std::sqrt(v_curve * v_curve + 2.0 * 0.5 * p.decel_max * ds));
      }
    }

    // Intelligent-driver style acceleration towards v_des with a lead gap term.
    const double v = ego.speed;
    double a = p.accel_max * (1.0 - std::pow(v / std::max(v_des, 0.1), 4));
    for (std::size_t i = 0; i < world_.agents.size(); ++i) {
      if (world_.agents[i].lane != 0) continue;
      const double s_agent = world_.agents[i].s0 + world_.agents[i].speed * time;
      const double gap = s_agent - proj.s - 0.5 * (world_.agents[i].length + kEgoLength);
      if (gap <= 0.0 || gap > 120.0) continue;
      const double dv = v - world_.agents[i].speed;
      const double s_star =
          4.0 + v * 1.5 + v * dv / (2.0 * std::sqrt(p.accel_max * p.decel_max * 0.5));
      a -= p.accel_max * std::pow(std::max(s_star, 0.0) / gap, 2);
    }
    a = std::clamp(a, -p.decel_max, p.accel_max);
    if (v + a * kDt > p.v_max) a = (p.v_max - v) / kDt;
    return {a, kappa};
  }

  EgoKinematics step(const EgoKinematics& ego, double time) const {
    const Command c = command(ego, time);
    return bicycle_step(ego, c.accel, c.curvature, kDt);
  }

 private:
  const World& world_;
};

/// Ego state at t=0: on the route at ego_s0 with the initial speed.
inline EgoKinematics initial_ego(const World& w) {
  EgoKinematics e;
  e.pose = w.route().pose_at(w.ego_s0);
  e.speed = w.initial_speed;
  e.curvature = w.route().curvature_at(w.ego_s0);
  return e;
}

/// Ego states before t=0, oldest first, ending with the t=0 state. The past
/// is taken as steady motion along the route at the initial speed.
inline std::vector<EgoKinematics> logged_history(const World& w, std::size_t steps) {
  std::vector<EgoKinematics> out;
  for (std::size_t i = 0; i < steps; ++i) {
    const double dt_back = static_cast<double>(steps - 1 - i) * kDt;
    EgoKinematics e;
    const double s = w.ego_s0 - w.initial_speed * dt_back;
    e.pose = w.route().pose_at(s);
    e.speed = w.initial_speed;
    e.curvature = w.route().curvature_at(s);
    out.push_back(e);
  }
  return out;
}

/// Expert rollout from t=0 for `steps` steps (positions at t = dt .. steps*dt).
inline std::vector<EgoKinematics> expert_rollout(const World& w, std::size_t steps) {
  ExpertDriver driver(w);
  std::vector<EgoKinematics> out;
  EgoKinematics e = initial_ego(w);
  for (std::size_t i = 0; i < steps; ++i) {
    e = driver.step(e, static_cast<double>(i) * kDt);
    out.push_back(e);
  }
  return out;
}

}  // namespace tddm::scene
