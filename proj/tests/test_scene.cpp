#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "tddm/numerics/rng.hpp"
#include "tddm/scene.hpp"

using namespace tddm;
using namespace tddm::scene;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("tddm_scene_" + name)).string();
}

double angle_diff(double a, double b) { return std::abs(wrap_angle(a - b)); }

// Oracle for box overlap: any edge pair intersects, or a corner lies inside
// the other box (containment).
bool segments_intersect(Point2 p1, Point2 p2, Point2 q1, Point2 q2) {
  auto cross = [](Point2 o, Point2 a, Point2 b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); };
  const double d1 = cross(q1, q2, p1), d2 = cross(q1, q2, p2);
  const double d3 = cross(p1, p2, q1), d4 = cross(p1, p2, q2);
  return ((d1 > 0) != (d2 > 0)) && ((d3 > 0) != (d4 > 0));
}

bool point_in_convex(Point2 p, const std::array<Point2, 4>& poly) {
  bool pos = false, neg = false;
  for (std::size_t i = 0; i < 4; ++i) {
    const Point2 a = poly[i], b = poly[(i + 1) % 4];
    const double c = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    pos |= c > 0;
    neg |= c < 0;
  }
  return !(pos && neg);
}

bool overlap_oracle(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners(), cb = b.corners();
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      if (segments_intersect(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4])) return true;
    }
  }
  return point_in_convex(ca[0], cb) || point_in_convex(cb[0], ca);
}

GenerationParams straight_params() {
  GenerationParams p;
  p.family = LaneFamily::kStraight;
  p.agent_count = 0;
  p.obstacle_count = 0;
  p.initial_speed = 10.0;
  p.target_speed = 10.0;
  return p;
}

}  // namespace

TEST(GenerateScenario, StraightLaneWithoutAgentsIsConstantSpeedLine) {
  const ScenarioRecord r = generate_scenario(3, straight_params());
  ASSERT_EQ(r.future.dim(0), 80u);
  EXPECT_EQ(r.tag, "straight");
  for (std::size_t i = 0; i < 80; ++i) {
    EXPECT_NEAR(r.future[3 * i], 10.0 * 0.1 * static_cast<double>(i + 1), 1e-9);
    EXPECT_NEAR(r.future[3 * i + 1], 0.0, 1e-9);
    EXPECT_NEAR(r.future[3 * i + 2], 0.0, 1e-9);
  }
  for (std::uint8_t m : r.context.agent_mask) EXPECT_EQ(m, 0);
}

TEST(GenerateScenario, RightTurnHeadingDecreasesByQuarterTurn) {
  GenerationParams p;
  p.family = LaneFamily::kTurnRight;
  p.agent_count = 0;
  p.obstacle_count = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const ScenarioRecord r = generate_scenario(seed, p);
    double prev = 0.0;
    for (std::size_t i = 0; i < 80; ++i) {
      const double h = r.future[3 * i + 2];
      EXPECT_LE(h, prev + 1e-3) << "seed " << seed << " step " << i;
      prev = h;
    }
    EXPECT_NEAR(r.future[3 * 79 + 2], -std::numbers::pi / 2, 0.15) << "seed " << seed;

    // Arc oracle: each step is a circular arc, so the chord points along the
    // mean of the start and end headings and its length matches 2 sin(dh/2)/k.
    Waypoint a{0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < 80; ++i) {
      const Waypoint b{r.future[3 * i], r.future[3 * i + 1], r.future[3 * i + 2]};
      const double chord = std::hypot(b.x - a.x, b.y - a.y);
      if (chord > 1e-6) {
        EXPECT_LT(angle_diff(std::atan2(b.y - a.y, b.x - a.x), a.heading + 0.5 * wrap_angle(b.heading - a.heading)),
                  1e-9);
      }
      a = b;
    }
  }
}

TEST(GenerateScenario, DeterministicPerSeed) {
  GenerationParams p;
  const ScenarioRecord a = generate_scenario(42, p);
  const ScenarioRecord b = generate_scenario(42, p);
  EXPECT_TRUE(a == b);
  const ScenarioRecord c = generate_scenario(43, p);
  EXPECT_FALSE(a == c);
}

TEST(GenerateScenario, InfeasibleParamsThrow) {
  GenerationParams p;
  p.agent_count = -2;
  EXPECT_THROW(generate_scenario(1, p), ConfigError);
  p = GenerationParams{};
  p.obstacle_count = 5;
  EXPECT_THROW(generate_scenario(1, p), ConfigError);
  p = GenerationParams{};
  p.v_max = 0.0;
  EXPECT_THROW(generate_scenario(1, p), ConfigError);
}

TEST(GenerateScenario, ExpertFuturesAreFeasible) {
  GenerationParams p;
  for (std::uint64_t seed = 100; seed < 160; ++seed) {
    const ScenarioRecord r = generate_scenario(seed, p);
    EXPECT_DOUBLE_EQ(r.ego_pose.x, 0.0);
    Waypoint a{0.0, 0.0, 0.0};
    for (std::size_t i = 0; i < 80; ++i) {
      const Waypoint b{r.future[3 * i], r.future[3 * i + 1], r.future[3 * i + 2]};
      const double dist = std::hypot(b.x - a.x, b.y - a.y);
      const double speed = dist / kDt;
      EXPECT_LE(speed, p.v_max + 1e-9);
      if (dist > 1e-9) {
        // Chord length understates arc length, so this bounds curvature from above.
        EXPECT_LE(angle_diff(b.heading, a.heading) / dist, p.kappa_max * 1.01) << "seed " << seed;
      }
      if (speed > 0.5) {
        EXPECT_LT(angle_diff(std::atan2(b.y - a.y, b.x - a.x), b.heading), 0.1) << "seed " << seed;
      }
      a = b;
    }
  }
}

TEST(GenerateScenario, ContextIsInEgoFrame) {
  const ScenarioRecord r = generate_scenario(7, GenerationParams{});
  const Tensor& h = r.context.ego_history;
  const std::size_t last = h.dim(0) - 1;
  EXPECT_NEAR(h[last * 4], 0.0, 1e-12);
  EXPECT_NEAR(h[last * 4 + 1], 0.0, 1e-12);
  EXPECT_NEAR(h[last * 4 + 2], 0.0, 1e-12);
  EXPECT_NEAR(r.context.ego_state[2], 1.0, 1e-12);
  EXPECT_NEAR(r.context.ego_state[3], 0.0, 1e-12);
  for (std::size_t i = 0; i < r.context.agent_mask.size(); ++i) {
    if (r.context.agent_mask[i]) continue;
    for (std::size_t k = 0; k < 20 * kAgentDim; ++k) EXPECT_EQ(r.context.agents[i * 20 * kAgentDim + k], 0.0);
  }
}

TEST(Geometry, SeparatingAxisMatchesEdgeIntersectionOracle) {
  numerics::CounterRng rng(5);
  int overlaps = 0;
  for (int i = 0; i < 4000; ++i) {
    const OrientedBox a{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3.2, 3.2), rng.uniform(0.5, 5),
                        rng.uniform(0.5, 3)};
    const OrientedBox b{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3.2, 3.2), rng.uniform(0.5, 5),
                        rng.uniform(0.5, 3)};
    const bool expected = overlap_oracle(a, b);
    overlaps += expected;
    EXPECT_EQ(boxes_overlap(a, b), expected) << i;
  }
  EXPECT_GT(overlaps, 100);
  EXPECT_LT(overlaps, 3900);
}

TEST(Geometry, RigidTransformRoundTrip) {
  const Waypoint pose{3.0, -2.0, 0.7};
  const Rigid2 T = Rigid2::into_frame_of(pose);
  const Waypoint o = T.apply(pose);
  EXPECT_NEAR(o.x, 0.0, 1e-12);
  EXPECT_NEAR(o.y, 0.0, 1e-12);
  EXPECT_NEAR(o.heading, 0.0, 1e-12);
}

TEST(Normalize, EgoPoseMapsToOrigin) {
  const ScenarioRecord raw = generate_scenario(11, GenerationParams{});
  const ScenarioRecord moved = transform_record(raw, Rigid2{12.0, -4.0, 1.1});
  EXPECT_NEAR(moved.ego_pose.x, 12.0, 1e-12);
  const ScenarioRecord back = to_ego_frame(moved);
  EXPECT_EQ(back.ego_pose.x, 0.0);
  EXPECT_EQ(back.ego_pose.heading, 0.0);
  const double* e = back.context.ego_history.data() + 19 * 4;
  EXPECT_NEAR(e[0], 0.0, 1e-9);
  EXPECT_NEAR(e[1], 0.0, 1e-9);
  EXPECT_NEAR(e[2], 0.0, 1e-12);
}

TEST(Normalize, SharedScaleDefinition) {
  NormalizationStats s;
  s.mean_x = 20.0;
  s.std_x = 7.0;
  s.std_heading = 0.5;
  const Tensor pt = Tensor::matrix({{20.0, 7.0, 0.25}});
  const Tensor n = normalize_trajectory(pt, s);
  EXPECT_DOUBLE_EQ(n[0], 0.0);
  EXPECT_DOUBLE_EQ(n[1], 1.0);
  EXPECT_DOUBLE_EQ(n[2], 0.5);
}

TEST(Normalize, RoundTripOnRandomRecords) {
  std::vector<ScenarioRecord> corpus;
  for (std::uint64_t s = 0; s < 20; ++s) corpus.push_back(generate_scenario(s, GenerationParams{}));
  const NormalizationStats stats = compute_stats(corpus);
  EXPECT_GT(stats.std_x, 0.0);
  for (const auto& r : corpus) {
    const ScenarioRecord n = normalize(r, stats);
    const Tensor back = denormalize_trajectory(n.future, stats);
    double worst = 0.0;
    for (std::size_t i = 0; i < back.size(); ++i) worst = std::max(worst, std::abs(back[i] - r.future[i]));
    EXPECT_LT(worst, 1e-9);
  }
}

TEST(Normalize, StatsIgnorePaddedAgents) {
  GenerationParams p;
  p.agent_count = 3;
  std::vector<ScenarioRecord> corpus;
  for (std::uint64_t s = 0; s < 5; ++s) corpus.push_back(generate_scenario(s, p));
  const NormalizationStats a = compute_stats(corpus);
  // Widen the agent cap: extra slots are zero with mask 0.
  std::vector<ScenarioRecord> padded = corpus;
  for (auto& r : padded) {
    Tensor agents({16, 20, kAgentDim});
    std::copy(r.context.agents.values().begin(), r.context.agents.values().end(), agents.data());
    r.context.agents = agents;
    r.context.agent_mask.resize(16, 0);
    Tensor fut({16, 80, 3});
    std::copy(r.agent_futures.values().begin(), r.agent_futures.values().end(), fut.data());
    r.agent_futures = fut;
  }
  const NormalizationStats b = compute_stats(padded);
  EXPECT_EQ(a.mean_x, b.mean_x);
  EXPECT_EQ(a.std_x, b.std_x);
  EXPECT_EQ(a.std_heading, b.std_heading);
  EXPECT_EQ(a.mean_speed, b.mean_speed);
  EXPECT_EQ(a.std_speed, b.std_speed);
  EXPECT_EQ(a.mean_length, b.mean_length);
  EXPECT_EQ(a.std_width, b.std_width);
}

TEST(Normalize, ZeroSpreadIsStatsError) {
  EXPECT_THROW(compute_stats({}), StatsError);
  NormalizationStats s;
  s.std_x = 0.0;
  EXPECT_THROW(s.validate(), StatsError);
  EXPECT_THROW(normalize(generate_scenario(1, GenerationParams{}), s), StatsError);
}

TEST(Normalize, FrameInvariance) {
  std::vector<ScenarioRecord> corpus;
  for (std::uint64_t s = 0; s < 10; ++s) corpus.push_back(generate_scenario(s, GenerationParams{}));
  const NormalizationStats stats = compute_stats(corpus);
  numerics::CounterRng rng(9);
  for (const auto& r : corpus) {
    const Rigid2 T{rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-3.14, 3.14)};
    const ScenarioRecord a = normalize(r, stats);
    const ScenarioRecord b = normalize(transform_record(r, T), stats);
    auto compare = [&](const Tensor& x, const Tensor& y, std::size_t stride, std::size_t heading_col) {
      ASSERT_EQ(x.shape(), y.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (stride && i % stride == heading_col) {
          // Headings near +-pi may wrap to the other side.
          EXPECT_LT(angle_diff(x[i] * stats.std_heading, y[i] * stats.std_heading), 1e-9);
        } else {
          EXPECT_NEAR(x[i], y[i], 1e-9);
        }
      }
    };
    compare(a.future, b.future, 3, 2);
    compare(a.context.ego_history, b.context.ego_history, 4, 2);
    compare(a.context.ego_state, b.context.ego_state, 0, 0);
    compare(a.context.agents, b.context.agents, kAgentDim, 2);
    compare(a.context.obstacles, b.context.obstacles, kObstacleDim, 2);
    compare(a.context.map_lanes, b.context.map_lanes, 0, 0);
    compare(a.context.navi, b.context.navi, 0, 0);
    compare(a.agent_futures, b.agent_futures, 3, 2);
  }
}

TEST(Corpus, RoundTripHundredRecords) {
  std::vector<ScenarioRecord> records;
  for (std::uint64_t s = 0; s < 100; ++s) records.push_back(generate_scenario(s, GenerationParams{}));
  const std::string path = temp_path("roundtrip.jsonl");
  save_corpus(records, path);
  const auto loaded = load_corpus(path);
  ASSERT_EQ(loaded.size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i) EXPECT_TRUE(loaded[i] == records[i]) << i;
  std::filesystem::remove(path);
}

TEST(Corpus, TruncatedFileNamesFailingRecord) {
  std::vector<ScenarioRecord> records;
  for (std::uint64_t s = 0; s < 3; ++s) records.push_back(generate_scenario(s, GenerationParams{}));
  const std::string path = temp_path("trunc.jsonl");
  save_corpus(records, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 200);
  try {
    load_corpus(path);
    FAIL() << "expected parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.record_index(), 2);
  }
  std::filesystem::remove(path);
}

TEST(Corpus, EmptyFileYieldsNoRecords) {
  const std::string path = temp_path("empty.jsonl");
  { std::ofstream out(path); }
  EXPECT_TRUE(load_corpus(path).empty());
  std::filesystem::remove(path);
}

TEST(Corpus, StreamingReaderCountsRecords) {
  std::vector<ScenarioRecord> records;
  for (std::uint64_t s = 0; s < 4; ++s) records.push_back(generate_scenario(s, GenerationParams{}));
  const std::string path = temp_path("stream.jsonl");
  save_corpus(records, path);
  CorpusReader reader(path);
  ScenarioRecord r;
  std::size_t n = 0;
  while (reader.next(r)) EXPECT_TRUE(r == records[n++]);
  EXPECT_EQ(n, 4u);
  std::filesystem::remove(path);
}
