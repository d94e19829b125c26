#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/guidance.hpp"
#include "tddm/model.hpp"
#include "tddm/scene/world.hpp"
#include "tddm/training.hpp"

namespace tddm::harness {

/// Every run setting as a flat key=value document. Unknown keys are
/// rejected; unset keys keep their defaults.
class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d = {
        {"seed", "0"},
        // corpus
        {"data.count", "400"},
        {"data.heldout", "40"},
        {"data.family", "mixed"},
        {"data.turn_only", "false"},
        {"data.agents", "-1"},
        {"data.obstacles", "-1"},
        {"data.lead_vehicle", "true"},
        {"data.lane_width", "3.5"},
        {"data.v_max", "15"},
        {"data.recenter_y", "false"},
        {"caps.agents", "8"},
        {"caps.obstacles", "2"},
        {"caps.map_lanes", "8"},
        {"caps.route_lanes", "2"},
        {"caps.points", "20"},
        {"caps.route_dim", "2"},
        {"caps.history", "20"},
        {"caps.horizon", "80"},
        // diffusion
        {"schedule.beta_min", "0.1"},
        {"schedule.beta_max", "20"},
        {"vocab.anchors", "20"},
        {"vocab.iterations", "100"},
        // model
        {"model.dim", "128"},
        {"model.blocks", "3"},
        {"model.heads", "4"},
        {"model.segments", "4"},
        {"model.groups", "2"},
        {"model.time_features", "128"},
        {"model.ffn_mult", "2"},
        {"model.context_budget", "64"},
        {"model.cross_anchor_attention", "false"},
        {"model.adaln", "decoupled"},
        // training
        {"train.batch_size", "32"},
        {"train.noise_draws", "1"},
        {"train.epochs", "500"},
        {"train.max_steps", "0"},
        {"train.lr", "5e-4"},
        {"train.weight_decay", "0"},
        {"train.warmup", "0"},
        {"train.cosine", "false"},
        {"train.lambda", "1"},
        {"train.gamma", "0.5"},
        {"train.shared_timestep", "false"},
        {"train.eval_every", "0"},
        {"train.patience", "0"},
        {"train.checkpoint_every", "0"},
        // guidance
        {"guidance.scale", "1.25"},
        {"guidance.steps", "2"},
        {"guidance.near_groups", "0"},
        {"guidance.weak_noise_t", "0.001"},
        {"guidance.enabled", "true"},
        {"guidance.independent_selection", "false"},
        {"guidance.shared_segment_noise", "false"},
        {"guidance.near_only_fusion", "false"},
        {"guidance.multistep", "true"},
        // evaluation
        {"eval.closed_loop", "8"},
        {"eval.episode_seconds", "15"},
    };
    return d;
  }

  void set(const std::string& key, const std::string& value) {
    if (!defaults().count(key)) throw ConfigError("unknown config key: " + key);
    values_[key] = value;
  }

  /// Applies "key = value" lines; '#' starts a comment.
  void parse(std::istream& in, const std::string& source = "config") {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string body = trim(line);
      if (body.empty()) continue;
      const auto eq = body.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
      }
      const std::string key = trim(body.substr(0, eq));
      try {
        set(key, trim(body.substr(eq + 1)));
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    parse(in, path);
  }

  /// "key=value" override, as given on the command line.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like key=value: " + assignment);
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  const std::string& raw(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
  }

  double number(const std::string& key) const {
    const std::string& v = raw(key);
    std::size_t used = 0;
    double out = 0.0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) throw ConfigError("config key " + key + " expects a number, got '" + v + "'");
    return out;
  }

  long integer(const std::string& key) const {
    const double v = number(key);
    if (v != static_cast<double>(static_cast<long>(v))) throw ConfigError("config key " + key + " expects an integer");
    return static_cast<long>(v);
  }

  std::size_t count(const std::string& key) const {
    const long v = integer(key);
    if (v < 0) throw ConfigError("config key " + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  }

  bool flag(const std::string& key) const {
    const std::string& v = raw(key);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config key " + key + " expects a boolean, got '" + v + "'");
  }

  std::uint64_t seed() const {
    const std::string& v = raw("seed");
    try {
      std::size_t used = 0;
      const auto s = std::stoull(v, &used);
      if (used == v.size()) return s;
    } catch (const std::exception&) {
    }
    throw ConfigError("seed must be a non-negative integer");
  }

  /// Resolved document in key order, one "key = value" per line.
  std::string dump() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  bool operator==(const RunConfig&) const = default;

  // Typed views -------------------------------------------------------------

  scene::SceneCaps caps() const {
    scene::SceneCaps c;
    c.agents = count("caps.agents");
    c.obstacles = count("caps.obstacles");
    c.map_lanes = count("caps.map_lanes");
    c.route_lanes = count("caps.route_lanes");
    c.points = count("caps.points");
    c.route_dim = count("caps.route_dim");
    c.history = count("caps.history");
    c.horizon = count("caps.horizon");
    return c;
  }

  scene::GenerationParams generation() const {
    scene::GenerationParams p;
    p.family = scene::parse_family(raw("data.family"));
    p.turn_only = flag("data.turn_only");
    p.agent_count = static_cast<int>(integer("data.agents"));
    p.obstacle_count = static_cast<int>(integer("data.obstacles"));
    p.lead_vehicle = flag("data.lead_vehicle");
    p.lane_width = number("data.lane_width");
    p.v_max = number("data.v_max");
    p.caps = caps();
    p.validate();
    return p;
  }

  schedule::VpSchedule schedule() const {
    schedule::VpSchedule s{number("schedule.beta_min"), number("schedule.beta_max")};
    s.validate();
    return s;
  }

  model::AdaLnMode adaln_mode() const {
    const std::string& v = raw("model.adaln");
    if (v == "decoupled") return model::AdaLnMode::kDecoupled;
    if (v == "monolithic") return model::AdaLnMode::kMonolithic;
    throw ConfigError("model.adaln must be decoupled or monolithic");
  }

  model::ModelConfig model() const {
    model::ModelConfig c;
    c.dim = count("model.dim");
    c.blocks = count("model.blocks");
    c.heads = count("model.heads");
    c.segments = count("model.segments");
    c.groups = count("model.groups");
    c.anchors = count("vocab.anchors");
    c.horizon = count("caps.horizon");
    c.time_features = count("model.time_features");
    c.ffn_mult = count("model.ffn_mult");
    c.context_budget = count("model.context_budget");
    c.cross_anchor_attention = flag("model.cross_anchor_attention");
    c.caps = caps();
    c.seed = seed();
    c.validate();
    return c;
  }

  training::TrainConfig training() const {
    training::TrainConfig t;
    t.batch_size = count("train.batch_size");
    t.noise_draws = count("train.noise_draws");
    t.epochs = count("train.epochs");
    t.max_steps = count("train.max_steps");
    t.optimizer.learning_rate = number("train.lr");
    t.optimizer.weight_decay = number("train.weight_decay");
    t.warmup_steps = count("train.warmup");
    t.cosine_decay = flag("train.cosine");
    t.loss.lambda = number("train.lambda");
    t.loss.gamma = number("train.gamma");
    t.schedule = schedule();
    t.mode = adaln_mode();
    t.shared_timestep = flag("train.shared_timestep");
    t.seed = seed();
    t.eval_every = count("train.eval_every");
    t.patience = count("train.patience");
    t.checkpoint_every = count("train.checkpoint_every");
    return t;
  }

  guidance::GuidanceConfig guidance() const {
    guidance::GuidanceConfig g;
    g.scale = number("guidance.scale");
    g.steps = count("guidance.steps");
    g.near_groups = count("guidance.near_groups");
    g.weak_noise_t = number("guidance.weak_noise_t");
    g.enabled = flag("guidance.enabled");
    g.independent_selection = flag("guidance.independent_selection");
    g.shared_segment_noise = flag("guidance.shared_segment_noise");
    g.near_only_fusion = flag("guidance.near_only_fusion");
    g.multistep = flag("guidance.multistep");
    g.mode = adaln_mode();
    g.schedule = schedule();
    g.seed = seed();
    g.validate(count("model.groups"));
    return g;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  std::map<std::string, std::string> values_;
};

}  // namespace tddm::harness
