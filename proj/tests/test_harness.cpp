#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "fixtures.hpp"
#include "tddm/tddm.hpp"

namespace {

using namespace tddm;
using harness::RunConfig;
using numerics::CounterRng;
using numerics::Tensor;
using scene::Point2;
using vocabulary::Trajectory;
namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tddm_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Overlap oracle independent of the separating-axis code: two convex
// quadrilaterals overlap iff an edge pair crosses or one holds a corner of the other.
bool cross_segments(Point2 p1, Point2 p2, Point2 q1, Point2 q2) {
  auto cr = [](Point2 o, Point2 a, Point2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); };
  const double d1 = cr(q1, q2, p1), d2 = cr(q1, q2, p2), d3 = cr(p1, p2, q1), d4 = cr(p1, p2, q2);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
}

bool inside(Point2 p, const std::array<Point2, 4>& q) {
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < 4; ++i) {
    const Point2 a = q[i], b = q[(i + 1) % 4];
    const double c = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    pos |= c > 0;
    neg |= c < 0;
  }
  return !(pos && neg);
}

std::array<Point2, 4> corners(double x, double y, double h, double len, double wid) {
  const double c = std::cos(h), s = std::sin(h), a = len / 2, b = wid / 2;
  return {Point2{x + c * a - s * b, y + s * a + c * b}, Point2{x - c * a - s * b, y - s * a + c * b},
          Point2{x - c * a + s * b, y - s * a - c * b}, Point2{x + c * a + s * b, y + s * a - c * b}};
}

bool polygons_overlap(const std::array<Point2, 4>& a, const std::array<Point2, 4>& b) {
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (cross_segments(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4])) return true;
    }
  }
  return inside(a[0], b) || inside(b[0], a);
}

// Sweeps every waypoint against every valid agent footprint at that step and every obstacle.
bool brute_force_collision(const Trajectory& plan, const scene::ScenarioRecord& r) {
  const std::size_t H = r.context.agents.dim(1), T = r.agent_futures.dim(1);
  for (std::size_t k = 0; k < plan.horizon(); ++k) {
    const auto ego = corners(plan[k].x, plan[k].y, plan[k].heading, 4.8, 2.0);
    for (std::size_t a = 0; a < r.context.agent_mask.size(); ++a) {
      if (!r.context.agent_mask[a] || k >= T) continue;
      const double len = r.context.agents[(a * H + H - 1) * 9 + 4], wid = r.context.agents[(a * H + H - 1) * 9 + 5];
      const double* f = r.agent_futures.data() + (a * T + k) * 3;
      if (polygons_overlap(ego, corners(f[0], f[1], f[2], len, wid))) return true;
    }
    for (std::size_t o = 0; o < r.context.obstacle_mask.size(); ++o) {
      if (!r.context.obstacle_mask[o]) continue;
      const double* b = r.context.obstacles.data() + o * 5;
      if (polygons_overlap(ego, corners(b[0], b[1], b[2], b[3], b[4]))) return true;
    }
  }
  return false;
}

// RunConfig --------------------------------------------------------------------

TEST(RunConfigTest, ParsesCommentsAndOverrides) {
  RunConfig c;
  std::istringstream in("# header\nmodel.dim = 32   # trailing\n\n  train.lr=1e-3\n");
  c.parse(in);
  EXPECT_EQ(c.count("model.dim"), 32u);
  EXPECT_DOUBLE_EQ(c.number("train.lr"), 1e-3);
  c.apply_override("model.dim=64");
  EXPECT_EQ(c.model().dim, 64u);
  EXPECT_NE(c.dump().find("model.dim = 64\n"), std::string::npos);
}

TEST(RunConfigTest, RejectsUnknownKeysWithLineNumber) {
  RunConfig c;
  std::istringstream in("seed = 1\nmodel.dimm = 3\n");
  try {
    c.parse(in, "x.cfg");
    FAIL() << "unknown key accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos);
  }
  EXPECT_THROW(c.apply_override("nope=1"), ConfigError);
  EXPECT_THROW(c.apply_override("seed"), ConfigError);
  std::istringstream bad("just words\n");
  EXPECT_THROW(c.parse(bad), ConfigError);
}

TEST(RunConfigTest, TypedAccessorsValidate) {
  RunConfig c;
  c.set("model.dim", "abc");
  EXPECT_THROW(c.count("model.dim"), ConfigError);
  c.set("model.dim", "2.5");
  EXPECT_THROW(c.count("model.dim"), ConfigError);
  c.set("model.dim", "-4");
  EXPECT_THROW(c.count("model.dim"), ConfigError);
  c.set("guidance.enabled", "maybe");
  EXPECT_THROW(c.flag("guidance.enabled"), ConfigError);
  c = RunConfig();
  c.set("model.adaln", "other");
  EXPECT_THROW(c.adaln_mode(), ConfigError);
  c = RunConfig();
  c.set("model.segments", "3");
  EXPECT_THROW(c.model(), ConfigError);
}

TEST(RunConfigTest, ViewsCarryValues) {
  RunConfig c;
  c.set("seed", "11");
  c.set("guidance.scale", "1.5");
  c.set("train.shared_timestep", "true");
  c.set("model.adaln", "monolithic");
  EXPECT_EQ(c.guidance().scale, 1.5);
  EXPECT_EQ(c.guidance().seed, 11u);
  EXPECT_TRUE(c.training().shared_timestep);
  EXPECT_EQ(c.training().mode, model::AdaLnMode::kMonolithic);
  EXPECT_EQ(c.model().anchors, 20u);
}

TEST(RunConfigTest, ShippedConfigsParse) {
  for (const char* name : {"smoke.cfg", "default.cfg"}) {
    RunConfig c;
    c.parse_file(std::string(TDDM_SOURCE_DIR) + "/configs/" + name);
    EXPECT_NO_THROW(c.model());
    EXPECT_NO_THROW(c.training());
    EXPECT_NO_THROW(c.guidance());
    EXPECT_NO_THROW(c.generation());
  }
}

// Open-loop metrics -----------------------------------------------------------------

class MetricsTest : public ::testing::Test {
 protected:
  static const std::vector<scene::ScenarioRecord>& records() {
    static const std::vector<scene::ScenarioRecord> r = [] {
      std::vector<scene::ScenarioRecord> out;
      scene::GenerationParams p;
      for (std::uint64_t s = 0; s < 6; ++s) out.push_back(scene::generate_scenario(s, p));
      return out;
    }();
    return r;
  }
};

TEST_F(MetricsTest, PerfectPredictionScoresZero) {
  const auto& r = records()[0];
  const auto d = harness::displacement_error(r.trajectory(), r.trajectory());
  EXPECT_EQ(d.ade, 0.0);
  EXPECT_EQ(d.fde, 0.0);
  EXPECT_FALSE(harness::plan_collides(r.trajectory(), r));
  const auto stats = scene::compute_stats(records());
  const auto layout = vocabulary::SegmentLayout::make(80, 4, 2);
  const Tensor seg = training::segment_rows(scene::normalize(r, stats).trajectory(), layout,
                                            scene::normalize_pose(vocabulary::Waypoint{}, stats));
  EXPECT_NEAR(harness::boundary_gap(seg, stats), 0.0, 1e-9);
}

TEST_F(MetricsTest, RigidShiftGivesUnitError) {
  const auto& r = records()[1];
  Tensor shifted = r.future;
  for (std::size_t i = 0; i < r.horizon(); ++i) shifted.at(i, 0) += 1.0;
  const auto d = harness::displacement_error(Trajectory(shifted), r.trajectory());
  EXPECT_NEAR(d.ade, 1.0, 1e-12);
  EXPECT_NEAR(d.fde, 1.0, 1e-12);
  EXPECT_THROW(harness::displacement_error(Trajectory(Tensor({5, 3})), r.trajectory()), DimensionError);
}

TEST_F(MetricsTest, BoundaryGapIsLargestJump) {
  scene::NormalizationStats stats;
  stats.std_x = 2.0;
  Tensor seg({3, 9});  // three segments of three points
  seg[2 * 3 + 0] = 0.5;            // end of segment 0 at x = 0.5 (1 m)
  seg[9 + 0] = 0.0;                // segment 1 starts at 0
  seg[9 + 2 * 3 + 1] = 1.5;        // end of segment 1 at y = 1.5 (3 m)
  seg[18 + 1] = 0.0;
  EXPECT_NEAR(harness::boundary_gap(seg, stats), 3.0, 1e-12);
}

TEST_F(MetricsTest, CollisionMatchesBruteForceSweep) {
  CounterRng rng(5);
  std::size_t hits = 0, trials = 0;
  for (const auto& r : records()) {
    for (int k = 0; k < 25; ++k) {
      // Random plans that wander around the scene, some through other agents.
      Tensor pts({r.horizon(), 3});
      const double vx = 4.0 + 14.0 * rng.uniform(), vy = 3.0 * (rng.uniform() - 0.5), h0 = 0.4 * (rng.uniform() - 0.5);
      for (std::size_t i = 0; i < r.horizon(); ++i) {
        const double t = 0.1 * static_cast<double>(i + 1);
        pts.at(i, 0) = vx * t;
        pts.at(i, 1) = vy * t + 2.0 * std::sin(0.7 * t + k);
        pts.at(i, 2) = h0 + 0.3 * std::sin(t + k);
      }
      const Trajectory plan(pts);
      const bool oracle = brute_force_collision(plan, r);
      EXPECT_EQ(harness::plan_collides(plan, r), oracle) << "seed " << r.seed << " trial " << k;
      hits += oracle;
      ++trials;
    }
  }
  EXPECT_GT(hits, 0u);
  EXPECT_LT(hits, trials);
}

TEST_F(MetricsTest, LateralDeviationOfOffsetPlan) {
  scene::GenerationParams p;
  p.family = scene::LaneFamily::kStraight;
  const auto r = scene::generate_scenario(3, p);
  EXPECT_LT(harness::route_lateral_deviation(r.trajectory(), r), 1e-6);
  Tensor shifted = r.future;
  for (std::size_t i = 0; i < r.horizon(); ++i) shifted.at(i, 1) += 1.0;
  EXPECT_NEAR(harness::route_lateral_deviation(Trajectory(shifted), r), 1.0, 1e-6);
}

TEST(CompositeTest, MonotoneAndBounded) {
  double prev = 101.0;
  for (double ade = 0.0; ade < 50.0; ade += 0.37) {
    const double c = harness::composite_score(ade, 0.3, 0.1, 60.0, 4);
    EXPECT_LT(c, prev);
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 100.0);
    prev = c;
  }
  EXPECT_DOUBLE_EQ(harness::composite_score(0.0, 0.0, 0.0, 0.0, 0), 100.0);
  EXPECT_DOUBLE_EQ(harness::composite_score(0.0, 0.0, 1.0, 0.0, 0), 0.0);
}

TEST(EvalReportTest, AggregatesAndLabelsScores) {
  harness::EvalReport r;
  harness::ScenarioMetrics a, b;
  a.ade = 1.0, a.fde = 2.0, a.collision = true, a.closed_loop = 50.0;
  b.ade = 3.0, b.fde = 4.0;
  r.scenarios = {a, b};
  harness::finalize(r);
  EXPECT_DOUBLE_EQ(r.ade, 2.0);
  EXPECT_DOUBLE_EQ(r.fde, 3.0);
  EXPECT_DOUBLE_EQ(r.collision_rate, 0.5);
  EXPECT_EQ(r.episodes, 1u);
  EXPECT_DOUBLE_EQ(r.closed_loop, 50.0);
  EXPECT_NE(r.to_text().find("not comparable"), std::string::npos);
}

// Closed loop -------------------------------------------------------------------

TEST(ClosedLoopTest, ExpertReplayScoresHighOnUnobstructedStraights) {
  scene::GenerationParams p;
  p.family = scene::LaneFamily::kStraight;
  p.agent_count = 0;
  p.obstacle_count = 0;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto w = scene::generate_world(s, p);
    const auto e = harness::run_episode(w, harness::expert_planner());
    // Oracle: the expert's own rollout is feasible, comfortable and on route.
    EXPECT_FALSE(e.collision);
    EXPECT_FALSE(e.off_route);
    EXPECT_GT(e.score, 90.0) << "seed " << s;
    EXPECT_NEAR(e.score, 100.0 * e.progress_ratio * e.comfort, 1e-9);
  }
}

TEST(ClosedLoopTest, ZeroPlanMakesNoProgress) {
  scene::GenerationParams p;
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto w = scene::generate_world(s, p);
    const auto e = harness::run_episode(
        w, [](const scene::ScenarioRecord& r) { return Trajectory(Tensor({r.horizon(), 3})); });
    EXPECT_EQ(e.score, 0.0);
  }
}

TEST(ClosedLoopTest, TrackerFollowsFeasibleArc) {
  scene::EgoKinematics e;
  e.speed = 10.0;
  scene::GenerationParams p;
  // Target produced by the bicycle model itself is reproduced exactly.
  const auto ref = scene::bicycle_step(e, 1.0, 0.05, scene::kDt);
  const auto got = harness::track_step(e, ref.pose, p);
  EXPECT_NEAR(got.pose.x, ref.pose.x, 1e-9);
  EXPECT_NEAR(got.pose.y, ref.pose.y, 1e-9);
  EXPECT_NEAR(got.speed, ref.speed, 1e-9);
}

TEST(ClosedLoopTest, DeterministicAndRejectsBadConfig) {
  scene::GenerationParams p;
  const auto w = scene::generate_world(9, p);
  const auto a = harness::run_episode(w, harness::expert_planner());
  const auto b = harness::run_episode(w, harness::expert_planner());
  EXPECT_EQ(a.score, b.score);
  ASSERT_EQ(a.states.size(), b.states.size());
  EXPECT_EQ(a.states.back().pose.x, b.states.back().pose.x);
  harness::ClosedLoopConfig bad;
  bad.replan_seconds = 0.0;
  EXPECT_THROW(harness::run_episode(w, harness::expert_planner(), bad), ConfigError);
}

TEST(ClosedLoopTest, CollisionZeroesScore) {
  scene::GenerationParams p;
  p.family = scene::LaneFamily::kStraight;
  p.obstacle_count = 0;
  auto w = scene::generate_world(2, p);
  // Park an obstacle on the route ahead; the plan drives straight through it.
  const auto ahead = w.route().pose_at(w.ego_s0 + 30.0);
  w.obstacles.push_back({scene::OrientedBox{ahead.x, ahead.y, ahead.heading, 4.0, 2.0}});
  const auto e = harness::run_episode(w, [](const scene::ScenarioRecord& r) {
    Tensor pts({r.horizon(), 3});
    for (std::size_t i = 0; i < r.horizon(); ++i) pts.at(i, 0) = 1.2 * static_cast<double>(i + 1);
    return Trajectory(pts);
  });
  EXPECT_TRUE(e.collision);
  EXPECT_EQ(e.score, 0.0);
}

// Ablation structure ------------------------------------------------------------------

TEST(AblationTest, ComponentRowsFollowTogglePattern) {
  const RunConfig base;
  const auto rows = harness::component_rows(base);
  ASSERT_EQ(rows.size(), 6u);
  auto apply = [&](std::size_t i) {
    RunConfig c = base;
    for (const auto& [k, v] : rows[i].overrides) c.set(k, v);
    return c;
  };
  const RunConfig first = apply(0);
  EXPECT_EQ(first.count("model.segments"), 1u);
  EXPECT_EQ(first.count("model.groups"), 1u);
  EXPECT_EQ(first.raw("model.adaln"), "monolithic");
  EXPECT_TRUE(first.flag("train.shared_timestep"));
  EXPECT_FALSE(first.flag("guidance.enabled"));
  const RunConfig last = apply(5);
  EXPECT_EQ(last.count("model.segments"), 4u);
  EXPECT_EQ(last.raw("model.adaln"), "decoupled");
  EXPECT_FALSE(last.flag("train.shared_timestep"));
  EXPECT_TRUE(last.flag("guidance.enabled"));
  // Rows 5 and 6 differ only at inference time, so they share trained weights.
  EXPECT_EQ(harness::training_signature(apply(4)), harness::training_signature(last));
  EXPECT_NE(harness::training_signature(apply(3)), harness::training_signature(apply(4)));
}

TEST(AblationTest, SweepRowLabels) {
  const auto tokens = harness::token_rows();
  ASSERT_EQ(tokens.size(), 5u);
  const std::vector<std::string> n = {"1", "2", "4", "8", "16"};
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(tokens[i].label, n[i]);
    RunConfig c;
    for (const auto& [k, v] : tokens[i].overrides) c.set(k, v);
    EXPECT_NO_THROW(c.model());
  }
  const auto cfg = harness::cfg_rows();
  ASSERT_EQ(cfg.size(), 5u);
  EXPECT_EQ(cfg.front().label, "0.75");
  EXPECT_EQ(cfg.back().label, "1.75");
  EXPECT_THROW(harness::parse_axis("depth"), UsageError);
  EXPECT_EQ(harness::parse_axis("cfg-scale"), harness::AblationAxis::kCfgScale);
}

// Pipeline plumbing ---------------------------------------------------------------------

RunConfig smoke_config() {
  RunConfig c;
  c.parse_file(std::string(TDDM_SOURCE_DIR) + "/configs/smoke.cfg");
  return c;
}

TEST(PipelineTest, StatsRoundTripExactly) {
  scene::NormalizationStats s;
  s.mean_x = 51.27913;
  s.std_x = 57.413912345678;
  s.std_heading = 1.1073;
  s.recenter_y = true;
  s.mean_y = -0.25;
  const fs::path dir = temp_dir("stats");
  harness::save_stats(dir / "s.txt", s);
  const auto t = harness::load_stats(dir / "s.txt");
  EXPECT_EQ(t.mean_x, s.mean_x);
  EXPECT_EQ(t.std_x, s.std_x);
  EXPECT_EQ(t.mean_y, s.mean_y);
  EXPECT_EQ(t.recenter_y, s.recenter_y);
}

TEST(PipelineTest, GenDataIsByteIdenticalAcrossRuns) {
  RunConfig c = smoke_config();
  c.set("data.count", "5");
  c.set("data.heldout", "2");
  const harness::RunPaths a{temp_dir("gen_a")}, b{temp_dir("gen_b")};
  harness::run_gen_data(c, a);
  harness::run_gen_data(c, b);
  EXPECT_EQ(harness::read_text(a.corpus()), harness::read_text(b.corpus()));
  EXPECT_EQ(harness::read_text(a.heldout()), harness::read_text(b.heldout()));
  EXPECT_NE(harness::read_text(a.corpus()), harness::read_text(a.heldout()));
  EXPECT_TRUE(fs::exists(a.resolved("gen-data")));
}

TEST(PipelineTest, StagesRequireTheirInputs) {
  const RunConfig c = smoke_config();
  const harness::RunPaths empty{temp_dir("empty")};
  EXPECT_THROW(harness::run_plan(c, empty, 0), UsageError);
  EXPECT_THROW(harness::run_eval(c, empty), UsageError);
  EXPECT_THROW(harness::run_train(c, empty), UsageError);
  EXPECT_THROW(harness::run_build_anchors(c, empty), UsageError);
}

}  // namespace
