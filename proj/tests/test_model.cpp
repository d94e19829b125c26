#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "gradcheck.hpp"
#include "tddm/model.hpp"

namespace {

using namespace tddm;
using model::AdaLnMode;
using model::Denoiser;
using model::ModelConfig;
using numerics::CounterRng;
using numerics::Tensor;
using numerics::Var;

scene::SceneCaps small_caps() {
  scene::SceneCaps c;
  c.agents = 3;
  c.obstacles = 1;
  c.map_lanes = 2;
  c.route_lanes = 1;
  c.points = 5;
  c.history = 4;
  c.horizon = 8;
  return c;
}

ModelConfig small_config(std::size_t dim = 16, std::size_t segments = 4, std::size_t groups = 2) {
  ModelConfig c;
  c.dim = dim;
  c.blocks = 2;
  c.heads = 2;
  c.groups = groups;
  c.segments = segments;
  c.anchors = 3;
  c.horizon = 8;
  c.time_features = 16;
  c.caps = small_caps();
  c.seed = 7;
  return c;
}

void fill(Tensor& t, CounterRng& rng, double scale = 1.0) {
  for (double& v : t.storage()) v = scale * rng.normal();
}

scene::SceneContext random_context(const scene::SceneCaps& caps, std::uint64_t seed) {
  CounterRng rng(seed);
  scene::SceneContext c = scene::SceneContext::empty(caps);
  fill(c.ego_history, rng);
  fill(c.ego_state, rng);
  fill(c.agents, rng);
  fill(c.obstacles, rng);
  fill(c.map_lanes, rng);
  fill(c.navi, rng);
  for (auto& m : c.agent_mask) m = 1;
  c.agent_mask.back() = 0;
  for (auto& m : c.obstacle_mask) m = 1;
  for (auto& m : c.lane_mask) m = 1;
  for (auto& m : c.navi_mask) m = 1;
  return c;
}

Tensor random_noised(const ModelConfig& c, std::size_t samples, std::size_t anchors, std::uint64_t seed) {
  CounterRng rng(seed);
  Tensor t({samples * anchors * c.segments, c.token_features()});
  fill(t, rng);
  return t;
}

// Gives zero-initialised weights random values so modulation paths are live.
void randomize_zero_params(Denoiser& m, std::uint64_t seed) {
  CounterRng rng(seed);
  for (auto& [name, v] : m.parameters().entries()) {
    bool zero = true;
    for (double x : v.value().values()) zero = zero && x == 0.0;
    if (zero) fill(v.mutable_value(), rng, 0.1);
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

TEST(ModelConfigTest, RejectsInconsistentWidths) {
  ModelConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.groups = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.caps.agents = 80;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.segments = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfigTest, MetaRoundTrip) {
  ModelConfig c = small_config();
  c.cross_anchor_attention = true;
  const ModelConfig r = ModelConfig::from_meta(c.to_meta());
  EXPECT_EQ(r.to_meta(), c.to_meta());
}

TEST(DenoiserTest, OutputShapesAtDefaultSize) {
  ModelConfig c;
  Denoiser m(c);
  const scene::SceneContext ctx = random_context(c.caps, 1);
  const auto enc = m.encode_context({&ctx, &ctx});
  EXPECT_EQ(enc.tokens.rows(), 2 * c.context_tokens());
  Tensor times({2, 2}, {1.0, 0.001, 0.5, 0.5});
  const auto out = m.forward(random_noised(c, 2, 20, 3), times, enc);
  EXPECT_EQ(out.segments.rows(), 2u * 20 * 4);
  EXPECT_EQ(out.segments.cols(), 21u * 3);
  EXPECT_EQ(out.logits.rows(), 40u);
  EXPECT_EQ(out.logits.cols(), 1u);
  EXPECT_EQ(out.anchors, 20u);
  EXPECT_TRUE(all_finite(out.segments.value()));
}

TEST(DenoiserTest, BlocksAreIdentityAtInit) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  const scene::SceneContext ctx = random_context(c.caps, 2);
  model::ForwardTrace trace;
  Tensor times({1, 2}, {0.3, 0.8});
  m.forward(random_noised(c, 1, 3, 4), times, m.encode_context({&ctx}), AdaLnMode::kDecoupled, &trace);
  ASSERT_EQ(trace.block_inputs.size(), c.blocks);
  for (std::size_t b = 0; b < c.blocks; ++b) {
    EXPECT_EQ(trace.block_inputs[b], trace.block_outputs[b]) << "block " << b;
  }
  EXPECT_EQ(trace.block_inputs[0], trace.embedded);
}

TEST(DenoiserTest, DecoupledCollapsesToMonolithicForEqualTimes) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  randomize_zero_params(m, 11);
  const scene::SceneContext ctx = random_context(c.caps, 3);
  const auto enc = m.encode_context({&ctx, &ctx});
  const Tensor x = random_noised(c, 2, 3, 5);
  Tensor same({2, 2}, {0.37, 0.37, 0.9, 0.9});
  const auto a = m.forward(x, same, enc, AdaLnMode::kDecoupled);
  const auto b = m.forward(x, same, enc, AdaLnMode::kMonolithic);
  EXPECT_LT(max_abs_diff(a.segments.value(), b.segments.value()), 1e-12);
  EXPECT_LT(max_abs_diff(a.logits.value(), b.logits.value()), 1e-12);

  Tensor split({2, 2}, {0.1, 0.9, 0.9, 0.1});
  const auto d = m.forward(x, split, enc, AdaLnMode::kDecoupled);
  const auto e = m.forward(x, split, enc, AdaLnMode::kMonolithic);
  EXPECT_GT(max_abs_diff(d.segments.value(), e.segments.value()), 1e-6);
}

TEST(DenoiserTest, GroupSliceDependsOnlyOnItsOwnTime) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  randomize_zero_params(m, 12);
  const scene::SceneContext ctx = random_context(c.caps, 4);
  const auto enc = m.encode_context({&ctx});
  const std::size_t d = c.dim, w = c.group_width();
  for (std::size_t b = 0; b < c.blocks; ++b) {
    const Tensor p0 = m.block_modulation(b, Tensor({1, 2}, {0.2, 0.4}), enc).value();
    const Tensor p1 = m.block_modulation(b, Tensor({1, 2}, {0.2, 0.95}), enc).value();
    ASSERT_EQ(p0.cols(), 9 * d);
    double changed = 0.0;
    for (std::size_t chunk = 0; chunk < 9; ++chunk) {
      for (std::size_t j = 0; j < w; ++j) {
        EXPECT_EQ(p0[chunk * d + j], p1[chunk * d + j]);
        changed = std::max(changed, std::abs(p0[chunk * d + w + j] - p1[chunk * d + w + j]));
      }
    }
    EXPECT_GT(changed, 1e-8);
  }
}

TEST(DenoiserTest, AnchorsDoNotInteract) {
  ModelConfig c = small_config();
  Denoiser m(c);
  randomize_zero_params(m, 13);
  const scene::SceneContext ctx = random_context(c.caps, 5);
  const auto enc = m.encode_context({&ctx});
  Tensor times({1, 2}, {0.5, 0.2});
  Tensor x = random_noised(c, 1, 3, 6);
  const auto base = m.forward(x, times, enc);
  const std::size_t F = c.token_features(), N = c.segments;
  for (std::size_t r = N; r < 2 * N; ++r) {
    for (std::size_t j = 0; j < F; ++j) x[r * F + j] += 0.5;
  }
  const auto moved = m.forward(x, times, enc);
  for (std::size_t r = 0; r < 3 * N; ++r) {
    const bool in_anchor1 = r >= N && r < 2 * N;
    double diff = 0.0;
    for (std::size_t j = 0; j < F; ++j) {
      diff = std::max(diff, std::abs(base.segments.value()[r * F + j] - moved.segments.value()[r * F + j]));
    }
    if (in_anchor1) {
      EXPECT_GT(diff, 0.0);
    } else {
      EXPECT_EQ(diff, 0.0) << "row " << r;
    }
  }
  EXPECT_EQ(base.logits.value()[0], moved.logits.value()[0]);
  EXPECT_EQ(base.logits.value()[2], moved.logits.value()[2]);

  c.cross_anchor_attention = true;
  Denoiser joint(c);
  randomize_zero_params(joint, 13);
  const auto enc2 = joint.encode_context({&ctx});
  const Tensor x0 = random_noised(c, 1, 3, 6);
  const auto j0 = joint.forward(x0, times, enc2);
  const auto j1 = joint.forward(x, times, enc2);
  EXPECT_NE(j0.logits.value()[0], j1.logits.value()[0]);
}

TEST(EncoderTest, AgentOrderDoesNotMatter) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  randomize_zero_params(m, 14);
  scene::SceneContext a = random_context(c.caps, 6);
  scene::SceneContext b = a;
  const std::size_t stride = c.caps.history * scene::kAgentDim;
  for (std::size_t i = 0; i < stride; ++i) std::swap(b.agents[i], b.agents[stride + i]);
  std::swap(b.agent_mask[0], b.agent_mask[1]);
  Tensor times({1, 2}, {0.6, 0.3});
  const Tensor x = random_noised(c, 1, 3, 7);
  const auto oa = m.forward(x, times, m.encode_context({&a}));
  const auto ob = m.forward(x, times, m.encode_context({&b}));
  EXPECT_LT(max_abs_diff(oa.segments.value(), ob.segments.value()), 1e-10);
  EXPECT_LT(max_abs_diff(oa.logits.value(), ob.logits.value()), 1e-10);
}

TEST(EncoderTest, MaskedSlotContentIsIgnored) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  randomize_zero_params(m, 15);
  scene::SceneContext a = random_context(c.caps, 8);
  a.lane_mask[1] = 0;
  scene::SceneContext b = a;
  // Overwrite the padded agent and lane slots, e.g. with a copy of a valid agent.
  const std::size_t stride = c.caps.history * scene::kAgentDim;
  const std::size_t pad = c.caps.agents - 1;
  for (std::size_t i = 0; i < stride; ++i) b.agents[pad * stride + i] = b.agents[i];
  for (std::size_t i = c.caps.points * 2; i < b.map_lanes.size(); ++i) b.map_lanes[i] = 100.0 + i;
  Tensor times({1, 2}, {0.6, 0.3});
  const Tensor x = random_noised(c, 1, 3, 9);
  const auto oa = m.forward(x, times, m.encode_context({&a}));
  const auto ob = m.forward(x, times, m.encode_context({&b}));
  EXPECT_EQ(oa.segments.value(), ob.segments.value());

  // Turning the duplicate on is visible.
  b.agent_mask[pad] = 1;
  const auto oc = m.forward(x, times, m.encode_context({&b}));
  EXPECT_GT(max_abs_diff(oa.segments.value(), oc.segments.value()), 0.0);
}

TEST(EncoderTest, FullyPaddedSceneStillPlans) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  randomize_zero_params(m, 16);
  scene::SceneContext ctx = scene::SceneContext::empty(c.caps);
  const auto enc = m.encode_context({&ctx});
  std::size_t valid = 0;
  for (auto v : enc.mask) valid += v;
  EXPECT_EQ(valid, 2u);  // ego and null
  const auto out = m.forward(random_noised(c, 1, 3, 10), Tensor({1, 2}, {1.0, 1.0}), enc);
  EXPECT_TRUE(all_finite(out.segments.value()));
  EXPECT_TRUE(all_finite(out.logits.value()));
  EXPECT_TRUE(all_finite(enc.navi.value()));
}

TEST(EmbeddingTest, GroupSlicesArePlacedBlockwise) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  const Var h = m.embed_segments(random_noised(c, 1, 2, 11), 1);
  const std::size_t d = c.dim, w = c.group_width();
  ASSERT_EQ(h.cols(), d);
  for (std::size_t r = 0; r < h.rows(); ++r) {
    const std::size_t g = c.layout().group_of(r % c.segments);
    for (std::size_t j = 0; j < d; ++j) {
      const bool own = j / w == g;
      if (!own) EXPECT_EQ(h.value()[r * d + j], 0.0);
    }
  }
}

TEST(EmbeddingTest, SingleGroupUsesFullWidth) {
  const ModelConfig c = small_config(16, 4, 1);
  Denoiser m(c);
  const Var h = m.embed_segments(random_noised(c, 1, 2, 12), 1);
  ASSERT_EQ(h.cols(), c.dim);
  std::size_t nonzero = 0;
  for (double v : h.value().values()) nonzero += v != 0.0;
  EXPECT_EQ(nonzero, h.size());
}

TEST(EmbeddingTest, SwappingSegmentsWithinAGroupSwapsRows) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  Tensor x = random_noised(c, 1, 1, 13);
  const std::size_t F = c.token_features();
  Tensor swapped = x;
  for (std::size_t j = 0; j < F; ++j) std::swap(swapped[j], swapped[F + j]);  // segments 0 and 1 share group 0
  const Tensor a = m.embed_segments(x, 1).value();
  const Tensor b = m.embed_segments(swapped, 1).value();
  const std::size_t d = c.dim;
  for (std::size_t j = 0; j < d; ++j) {
    EXPECT_EQ(a[j], b[d + j]);
    EXPECT_EQ(a[d + j], b[j]);
    EXPECT_EQ(a[2 * d + j], b[2 * d + j]);
  }

  Tensor cross = x;  // segments 0 and 2 sit in different groups
  for (std::size_t j = 0; j < F; ++j) std::swap(cross[j], cross[2 * F + j]);
  const Tensor e = m.embed_segments(cross, 1).value();
  double diff = 0.0;
  for (std::size_t j = 0; j < c.group_width(); ++j) diff = std::max(diff, std::abs(a[2 * d + c.group_width() + j] - e[j]));
  EXPECT_GT(diff, 1e-9);
}

TEST(EmbeddingTest, ZeroInputStillCarriesGroupIdentity) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  Tensor zero({c.segments, c.token_features()});
  const Tensor h = m.embed_segments(zero, 1).value();
  const std::size_t d = c.dim, w = c.group_width();
  double diff = 0.0;
  for (std::size_t j = 0; j < w; ++j) diff = std::max(diff, std::abs(h[j] - h[2 * d + w + j]));
  EXPECT_GT(diff, 1e-6);
  // Same group, same content: identical embeddings.
  for (std::size_t j = 0; j < d; ++j) EXPECT_EQ(h[j], h[d + j]);
}

TEST(DenoiserTest, AnchorCountFollowsInput) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  const scene::SceneContext ctx = random_context(c.caps, 9);
  const auto out = m.forward(random_noised(c, 1, 1, 14), Tensor({1, 2}, {0.5, 0.5}), m.encode_context({&ctx}));
  EXPECT_EQ(out.anchors, 1u);
  EXPECT_EQ(out.logits.rows(), 1u);
  EXPECT_THROW(m.forward(random_noised(c, 1, 1, 14), Tensor({1, 3}), m.encode_context({&ctx})), DimensionError);
}

TEST(DenoiserTest, CheckpointRoundTripIsExact) {
  const ModelConfig c = small_config();
  Denoiser m(c);
  randomize_zero_params(m, 17);
  const auto path = std::filesystem::temp_directory_path() / "tddm_model_roundtrip.ckpt";
  model::save_model(path.string(), m, {{"note", "x"}});
  std::map<std::string, std::string> meta;
  Denoiser r = model::load_model(path.string(), &meta);
  EXPECT_EQ(meta.at("note"), "x");
  const scene::SceneContext ctx = random_context(c.caps, 10);
  const Tensor x = random_noised(c, 1, 3, 15);
  Tensor times({1, 2}, {0.25, 0.75});
  EXPECT_EQ(m.forward(x, times, m.encode_context({&ctx})).segments.value(),
            r.forward(x, times, r.encode_context({&ctx})).segments.value());
  std::filesystem::remove(path);
}

TEST(DenoiserTest, MicroGradientCheck) {
  ModelConfig c = small_config(8, 2, 2);
  c.blocks = 1;
  c.time_features = 8;
  c.caps.agents = 2;
  c.caps.map_lanes = 1;
  c.caps.points = 3;
  c.caps.history = 2;
  Denoiser m(c);
  randomize_zero_params(m, 18);
  const scene::SceneContext ctx = random_context(c.caps, 11);
  const Tensor x = random_noised(c, 1, 2, 16);
  Tensor times({1, 2}, {0.3, 0.7});
  CounterRng rng(19);
  Tensor wseg({2 * c.segments, c.token_features()}), wlog({2, 1});
  fill(wseg, rng);
  fill(wlog, rng);
  auto loss = [&]() {
    const auto out = m.forward(x, times, m.encode_context({&ctx}));
    return numerics::add(numerics::sum(numerics::mul(out.segments, Var::constant(wseg))),
                         numerics::sum(numerics::mul(out.logits, Var::constant(wlog))));
  };
  const auto res = oracle::grad_check(m.parameters().entries(), loss, 1e-5, 1e-6);
  EXPECT_GT(res.checked, 1000u);
  EXPECT_LT(res.max_rel_error, 1e-4) << res.worst;
}

}  // namespace
