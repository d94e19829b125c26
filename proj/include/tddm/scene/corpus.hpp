#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tddm/error.hpp"
#include "tddm/scene/record.hpp"

namespace tddm::scene {

using nlohmann::json;

namespace detail {

inline json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape()}, {"data", std::vector<double>(t.values().begin(), t.values().end())}};
}

inline Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("shape").get<numerics::Shape>(), j.at("data").get<std::vector<double>>());
}

inline json caps_to_json(const SceneCaps& c) {
  return json{{"agents", c.agents},         {"obstacles", c.obstacles}, {"map_lanes", c.map_lanes},
              {"route_lanes", c.route_lanes}, {"points", c.points},       {"route_dim", c.route_dim},
              {"history", c.history},       {"horizon", c.horizon}};
}

inline SceneCaps caps_from_json(const json& j) {
  SceneCaps c;
  c.agents = j.at("agents");
  c.obstacles = j.at("obstacles");
  c.map_lanes = j.at("map_lanes");
  c.route_lanes = j.at("route_lanes");
  c.points = j.at("points");
  c.route_dim = j.at("route_dim");
  c.history = j.at("history");
  c.horizon = j.at("horizon");
  return c;
}

inline json params_to_json(const GenerationParams& p) {
  return json{{"family", family_name(p.family)},
              {"turn_only", p.turn_only},
              {"agent_count", p.agent_count},
              {"obstacle_count", p.obstacle_count},
              {"initial_speed", p.initial_speed},
              {"target_speed", p.target_speed},
              {"v_max", p.v_max},
              {"kappa_max", p.kappa_max},
              {"accel_max", p.accel_max},
              {"decel_max", p.decel_max},
              {"lateral_accel_max", p.lateral_accel_max},
              {"lane_width", p.lane_width},
              {"lead_vehicle", p.lead_vehicle},
              {"caps", caps_to_json(p.caps)}};
}

inline GenerationParams params_from_json(const json& j) {
  GenerationParams p;
  p.family = parse_family(j.at("family").get<std::string>());
  p.turn_only = j.at("turn_only");
  p.agent_count = j.at("agent_count");
  p.obstacle_count = j.at("obstacle_count");
  p.initial_speed = j.at("initial_speed");
  p.target_speed = j.at("target_speed");
  p.v_max = j.at("v_max");
  p.kappa_max = j.at("kappa_max");
  p.accel_max = j.at("accel_max");
  p.decel_max = j.at("decel_max");
  p.lateral_accel_max = j.at("lateral_accel_max");
  p.lane_width = j.at("lane_width");
  p.lead_vehicle = j.at("lead_vehicle");
  p.caps = caps_from_json(j.at("caps"));
  return p;
}

}  // namespace detail

inline json record_to_json(const ScenarioRecord& r) {
  const SceneContext& c = r.context;
  return json{{"seed", r.seed},
              {"tag", r.tag},
              {"params", detail::params_to_json(r.params)},
              {"ego_pose", {r.ego_pose.x, r.ego_pose.y, r.ego_pose.heading}},
              {"ego_history", detail::tensor_to_json(c.ego_history)},
              {"ego_state", detail::tensor_to_json(c.ego_state)},
              {"agents", detail::tensor_to_json(c.agents)},
              {"agent_mask", c.agent_mask},
              {"obstacles", detail::tensor_to_json(c.obstacles)},
              {"obstacle_mask", c.obstacle_mask},
              {"map_lanes", detail::tensor_to_json(c.map_lanes)},
              {"lane_mask", c.lane_mask},
              {"navi", detail::tensor_to_json(c.navi)},
              {"navi_mask", c.navi_mask},
              {"future", detail::tensor_to_json(r.future)},
              {"agent_futures", detail::tensor_to_json(r.agent_futures)},
              {"route", detail::tensor_to_json(r.route)}};
}

inline ScenarioRecord record_from_json(const json& j) {
  ScenarioRecord r;
  r.seed = j.at("seed");
  r.tag = j.at("tag");
  r.params = detail::params_from_json(j.at("params"));
  const auto pose = j.at("ego_pose").get<std::vector<double>>();
  if (pose.size() != 3) throw DimensionError("ego_pose needs three values");
  r.ego_pose = {pose[0], pose[1], pose[2]};
  SceneContext& c = r.context;
  c.ego_history = detail::tensor_from_json(j.at("ego_history"));
  c.ego_state = detail::tensor_from_json(j.at("ego_state"));
  c.agents = detail::tensor_from_json(j.at("agents"));
  c.agent_mask = j.at("agent_mask").get<std::vector<std::uint8_t>>();
  c.obstacles = detail::tensor_from_json(j.at("obstacles"));
  c.obstacle_mask = j.at("obstacle_mask").get<std::vector<std::uint8_t>>();
  c.map_lanes = detail::tensor_from_json(j.at("map_lanes"));
  c.lane_mask = j.at("lane_mask").get<std::vector<std::uint8_t>>();
  c.navi = detail::tensor_from_json(j.at("navi"));
  c.navi_mask = j.at("navi_mask").get<std::vector<std::uint8_t>>();
  r.future = detail::tensor_from_json(j.at("future"));
  r.agent_futures = detail::tensor_from_json(j.at("agent_futures"));
  r.route = detail::tensor_from_json(j.at("route"));

  // Structural checks so a bad record fails here rather than deep in the model.
  if (c.ego_history.rank() != 2 || c.ego_history.dim(1) != kEgoHistoryDim) throw DimensionError("ego_history shape");
  if (c.ego_state.size() != kEgoStateDim) throw DimensionError("ego_state shape");
  if (c.agents.rank() != 3 || c.agents.dim(2) != kAgentDim || c.agents.dim(1) != c.ego_history.dim(0) ||
      c.agent_mask.size() != c.agents.dim(0)) {
    throw DimensionError("agents shape");
  }
  if (c.obstacles.rank() != 2 || c.obstacles.dim(1) != kObstacleDim || c.obstacle_mask.size() != c.obstacles.dim(0)) {
    throw DimensionError("obstacles shape");
  }
  if (c.map_lanes.rank() != 3 || c.map_lanes.dim(2) != 2 || c.lane_mask.size() != c.map_lanes.dim(0)) {
    throw DimensionError("map_lanes shape");
  }
  if (c.navi.rank() != 3 || c.navi.dim(1) != c.map_lanes.dim(1) || c.navi_mask.size() != c.navi.dim(0)) {
    throw DimensionError("navi shape");
  }
  if (r.future.rank() != 2 || r.future.dim(1) != 3) throw DimensionError("future shape");
  if (r.agent_futures.rank() != 3 || r.agent_futures.dim(0) != c.agents.dim(0) ||
      r.agent_futures.dim(1) != r.future.dim(0) || r.agent_futures.dim(2) != 3) {
    throw DimensionError("agent_futures shape");
  }
  if (r.route.rank() != 2 || r.route.dim(1) != 2) throw DimensionError("route shape");
  return r;
}

/// Streaming writer: one JSON object per line.
class CorpusWriter {
 public:
  explicit CorpusWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot open corpus for writing: " + path);
  }
  void write(const ScenarioRecord& r) {
    out_ << record_to_json(r).dump() << '\n';
    if (!out_) throw Error("corpus write failed");
  }

 private:
  std::ofstream out_;
};

/// Streaming reader: yields one record per non-empty line.
class CorpusReader {
 public:
  explicit CorpusReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw Error("cannot open corpus: " + path);
  }

  bool next(ScenarioRecord& out) {
    std::string line;
    while (std::getline(in_, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      const long index = index_++;
      try {
        out = record_from_json(json::parse(line));
      } catch (const json::exception& e) {
        throw ParseError("corpus record " + std::to_string(index) + ": " + e.what(), index);
      } catch (const Error& e) {
        throw ParseError("corpus record " + std::to_string(index) + ": " + e.what(), index);
      }
      return true;
    }
    return false;
  }

  long records_read() const { return index_; }

 private:
  std::ifstream in_;
  long index_ = 0;
};

inline void save_corpus(const std::vector<ScenarioRecord>& records, const std::string& path) {
  CorpusWriter w(path);
  for (const auto& r : records) w.write(r);
}

inline std::vector<ScenarioRecord> load_corpus(const std::string& path) {
  CorpusReader reader(path);
  std::vector<ScenarioRecord> out;
  ScenarioRecord r;
  while (reader.next(r)) out.push_back(std::move(r));
  return out;
}

}  // namespace tddm::scene
