#pragma once

// Small synthetic datasets shared by the training, guidance and acceptance tests.

#include <vector>

#include "tddm/model.hpp"
#include "tddm/scene.hpp"
#include "tddm/training.hpp"
#include "tddm/vocabulary.hpp"

namespace tddm::fixture {

inline scene::SceneCaps tiny_caps(std::size_t horizon = 8) {
  scene::SceneCaps c;
  c.agents = 2;
  c.obstacles = 1;
  c.map_lanes = 2;
  c.route_lanes = 1;
  c.points = 5;
  c.history = 4;
  c.horizon = horizon;
  return c;
}

struct Dataset {
  std::vector<scene::ScenarioRecord> raw;
  scene::NormalizationStats stats;
  vocabulary::AnchorVocabulary vocab;
  training::TrainingSet set;
};

inline Dataset make_dataset(std::size_t count, std::size_t anchors, std::size_t segments, std::size_t groups,
                            const scene::SceneCaps& caps, std::uint64_t seed = 0,
                            scene::LaneFamily family = scene::LaneFamily::kMixed) {
  Dataset d;
  scene::GenerationParams params;
  params.family = family;
  params.caps = caps;
  for (std::size_t i = 0; i < count; ++i) d.raw.push_back(scene::generate_scenario(seed + i, params));
  d.stats = scene::compute_stats(d.raw);
  std::vector<scene::ScenarioRecord> norm;
  std::vector<vocabulary::Trajectory> futures;
  for (const auto& r : d.raw) {
    norm.push_back(scene::normalize(r, d.stats));
    futures.push_back(norm.back().trajectory());
  }
  d.vocab = vocabulary::build_vocabulary(futures, anchors, seed + 101);
  d.set = training::prepare_training_set(std::move(norm), d.vocab,
                                         vocabulary::SegmentLayout::make(caps.horizon, segments, groups), d.stats);
  return d;
}

inline model::ModelConfig model_config_for(const Dataset& d, std::size_t dim = 16, std::size_t blocks = 1) {
  model::ModelConfig c;
  c.dim = dim;
  c.blocks = blocks;
  c.heads = 2;
  c.groups = d.set.layout.groups;
  c.segments = d.set.layout.segments;
  c.anchors = d.vocab.size();
  c.horizon = d.set.layout.horizon;
  c.time_features = 16;
  c.caps = d.raw.front().context.caps();
  c.caps.horizon = d.set.layout.horizon;
  c.seed = 3;
  return c;
}

}  // namespace tddm::fixture
