#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/guidance.hpp"
#include "tddm/harness/closed_loop.hpp"
#include "tddm/harness/config.hpp"
#include "tddm/harness/metrics.hpp"
#include "tddm/model.hpp"
#include "tddm/scene.hpp"
#include "tddm/training.hpp"
#include "tddm/vocabulary.hpp"

namespace tddm::harness {

namespace fs = std::filesystem;

/// Artifact locations inside one run directory.
struct RunPaths {
  fs::path dir;

  fs::path corpus() const { return dir / "corpus.jsonl"; }
  fs::path heldout() const { return dir / "heldout.jsonl"; }
  fs::path stats() const { return dir / "stats.txt"; }
  fs::path anchors() const { return dir / "anchors.txt"; }
  fs::path checkpoint() const { return dir / "model.ckpt"; }
  fs::path train_log() const { return dir / "train.log"; }
  fs::path report() const { return dir / "report.txt"; }
  fs::path resolved(const std::string& stage) const { return dir / ("resolved-" + stage + ".cfg"); }
};

inline void require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw UsageError("missing " + what + ": " + p.string());
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Records the resolved configuration used by a stage.
inline void log_resolved(const RunPaths& paths, const std::string& stage, const RunConfig& cfg) {
  fs::create_directories(paths.dir);
  write_text(paths.resolved(stage), "# root seed " + std::to_string(cfg.seed()) + "\n" + cfg.dump());
}

// Normalization statistics as "key = value" lines --------------------------

inline std::map<std::string, std::string> stats_to_meta(const scene::NormalizationStats& s) {
  auto num = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  return {{"stats.mean_x", num(s.mean_x)},           {"stats.std_x", num(s.std_x)},
          {"stats.mean_y", num(s.mean_y)},           {"stats.recenter_y", s.recenter_y ? "1" : "0"},
          {"stats.std_heading", num(s.std_heading)}, {"stats.mean_speed", num(s.mean_speed)},
          {"stats.std_speed", num(s.std_speed)},     {"stats.mean_length", num(s.mean_length)},
          {"stats.std_length", num(s.std_length)},   {"stats.mean_width", num(s.mean_width)},
          {"stats.std_width", num(s.std_width)}};
}

inline scene::NormalizationStats stats_from_meta(const std::map<std::string, std::string>& m) {
  auto get = [&](const std::string& k) {
    const auto it = m.find(k);
    if (it == m.end()) throw ParseError("normalization statistics lack " + k, 0);
    return std::stod(it->second);
  };
  scene::NormalizationStats s;
  s.mean_x = get("stats.mean_x");
  s.std_x = get("stats.std_x");
  s.mean_y = get("stats.mean_y");
  s.recenter_y = get("stats.recenter_y") != 0.0;
  s.std_heading = get("stats.std_heading");
  s.mean_speed = get("stats.mean_speed");
  s.std_speed = get("stats.std_speed");
  s.mean_length = get("stats.mean_length");
  s.std_length = get("stats.std_length");
  s.mean_width = get("stats.mean_width");
  s.std_width = get("stats.std_width");
  s.validate();
  return s;
}

inline void save_stats(const fs::path& p, const scene::NormalizationStats& s) {
  std::string text;
  for (const auto& [k, v] : stats_to_meta(s)) text += k + " = " + v + "\n";
  write_text(p, text);
}

inline scene::NormalizationStats load_stats(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::map<std::string, std::string> m;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) m[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return stats_from_meta(m);
}

// Stages ---------------------------------------------------------------------

/// Scenario seeds for a split are drawn from the root seed, so the training
/// and held-out splits never share a world.
inline std::vector<scene::ScenarioRecord> generate_split(const RunConfig& cfg, std::size_t count, std::uint64_t split) {
  const scene::GenerationParams params = cfg.generation();
  const numerics::CounterRng rng = numerics::CounterRng(cfg.seed()).derive(0xDA7Au).derive(split);
  std::vector<scene::ScenarioRecord> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(scene::generate_scenario(rng.derive(i).key(), params));
  return out;
}

inline void run_gen_data(const RunConfig& cfg, const RunPaths& paths) {
  log_resolved(paths, "gen-data", cfg);
  scene::save_corpus(generate_split(cfg, cfg.count("data.count"), 0), paths.corpus().string());
  scene::save_corpus(generate_split(cfg, cfg.count("data.heldout"), 1), paths.heldout().string());
}

inline void run_build_anchors(const RunConfig& cfg, const RunPaths& paths) {
  require_file(paths.corpus(), "corpus (run gen-data first)");
  log_resolved(paths, "build-anchors", cfg);
  const auto corpus = scene::load_corpus(paths.corpus().string());
  const auto stats = scene::compute_stats(corpus, cfg.flag("data.recenter_y"));
  std::vector<Trajectory> futures;
  for (const auto& r : corpus) futures.push_back(scene::normalize(r, stats).trajectory());
  vocabulary::KMeansOptions opt;
  opt.max_iterations = cfg.count("vocab.iterations");
  const auto vocab = vocabulary::build_vocabulary(futures, cfg.count("vocab.anchors"), cfg.seed(), opt);
  vocabulary::save_anchors(paths.anchors().string(), vocab);
  save_stats(paths.stats(), stats);
}

struct TrainedModel {
  model::Denoiser model;
  vocabulary::AnchorVocabulary vocab;
  scene::NormalizationStats stats;
};

/// Mean held-out ADE over the first `limit` held-out records.
inline double heldout_ade(const model::Denoiser& m, const Tensor& anchors, const scene::NormalizationStats& stats,
                          const std::vector<scene::ScenarioRecord>& heldout, const guidance::GuidanceConfig& g,
                          std::size_t limit = 16) {
  const std::size_t n = std::min(limit, heldout.size());
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto norm = scene::normalize(heldout[i], stats);
    const auto p = guidance::plan(m, norm.context, anchors, stats, g);
    sum += displacement_error(p.trajectory, heldout[i].trajectory()).ade;
  }
  return sum / static_cast<double>(n);
}

inline training::TrainResult run_train(const RunConfig& cfg, const RunPaths& paths, std::ostream* echo = nullptr) {
  require_file(paths.corpus(), "corpus (run gen-data first)");
  require_file(paths.anchors(), "anchors (run build-anchors first)");
  require_file(paths.stats(), "normalization statistics (run build-anchors first)");
  log_resolved(paths, "train", cfg);
  const auto corpus = scene::load_corpus(paths.corpus().string());
  const auto stats = load_stats(paths.stats());
  const auto vocab = vocabulary::load_anchors(paths.anchors().string());

  model::ModelConfig mc = cfg.model();
  std::vector<scene::ScenarioRecord> norm;
  for (const auto& r : corpus) norm.push_back(scene::normalize(r, stats));
  const auto data = training::prepare_training_set(norm, vocab, mc.layout(), stats);

  model::Denoiser m(mc);
  training::TrainConfig tc = cfg.training();
  tc.checkpoint_path = paths.checkpoint().string();
  std::function<double(const model::Denoiser&)> probe;
  std::vector<scene::ScenarioRecord> heldout;
  const guidance::GuidanceConfig g = cfg.guidance();
  if (tc.eval_every > 0 && fs::exists(paths.heldout())) {
    heldout = scene::load_corpus(paths.heldout().string());
    probe = [&](const model::Denoiser& mm) { return heldout_ade(mm, data.anchors, stats, heldout, g); };
  }
  std::ofstream log(paths.train_log(), std::ios::binary | std::ios::trunc);
  struct Tee : std::streambuf {
    std::streambuf* a;
    std::streambuf* b;
    int overflow(int c) override {
      if (c == EOF) return 0;
      if (a->sputc(static_cast<char>(c)) == EOF) return EOF;
      if (b && b->sputc(static_cast<char>(c)) == EOF) return EOF;
      return c;
    }
    int sync() override { return a->pubsync() | (b ? b->pubsync() : 0); }
  } tee;
  tee.a = log.rdbuf();
  tee.b = echo ? echo->rdbuf() : nullptr;
  std::ostream out(&tee);
  out << "# root seed " << cfg.seed() << "\n";
  const auto result = training::train(m, data, tc, &out, probe);
  out << "done steps=" << result.steps << (result.early_stopped ? " early_stopped" : "") << "\n";
  out.flush();
  model::save_model(paths.checkpoint().string(), m, stats_to_meta(stats));
  return result;
}

inline TrainedModel load_trained(const RunPaths& paths) {
  require_file(paths.checkpoint(), "checkpoint (run train first)");
  require_file(paths.anchors(), "anchors (run build-anchors first)");
  std::map<std::string, std::string> meta;
  model::Denoiser m = model::load_model(paths.checkpoint().string(), &meta);
  return {std::move(m), vocabulary::load_anchors(paths.anchors().string()), stats_from_meta(meta)};
}

inline Tensor anchor_rows_for(const TrainedModel& t) {
  const auto layout = t.model.config().layout();
  return training::anchor_rows(t.vocab, layout, scene::normalize_pose(vocabulary::Waypoint{}, t.stats));
}

/// Plans one held-out scenario; returns the text written to `plan.txt`.
inline std::string run_plan(const RunConfig& cfg, const RunPaths& paths, std::size_t index) {
  const TrainedModel t = load_trained(paths);
  require_file(paths.heldout(), "held-out corpus (run gen-data first)");
  log_resolved(paths, "plan", cfg);
  const auto heldout = scene::load_corpus(paths.heldout().string());
  if (index >= heldout.size()) throw UsageError("scenario index " + std::to_string(index) + " out of range");
  const auto norm = scene::normalize(heldout[index], t.stats);
  const auto p = guidance::plan(t.model, norm.context, anchor_rows_for(t), t.stats, cfg.guidance());
  std::ostringstream os;
  char buf[128];
  os << "# scenario " << index << " seed " << heldout[index].seed << "\n";
  os << "selected = " << p.selected << "\n";
  std::snprintf(buf, sizeof buf, "score = %.9g\n", p.score);
  os << buf << "x y heading\n";
  for (std::size_t i = 0; i < p.trajectory.horizon(); ++i) {
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", p.trajectory[i].x, p.trajectory[i].y, p.trajectory[i].heading);
    os << buf;
  }
  write_text(paths.dir / "plan.txt", os.str());
  return os.str();
}

inline ClosedLoopConfig closed_loop_config(const RunConfig& cfg) {
  ClosedLoopConfig c;
  c.episode_seconds = cfg.number("eval.episode_seconds");
  return c;
}

/// Open-loop metrics on the held-out split plus closed-loop episodes on its
/// first `eval.closed_loop` worlds.
inline EvalReport evaluate(const RunConfig& cfg, const TrainedModel& t, const std::vector<scene::ScenarioRecord>& heldout) {
  const Tensor anchors = anchor_rows_for(t);
  const guidance::GuidanceConfig g = cfg.guidance();
  EvalReport report = evaluate_open_loop(t.model, anchors, t.stats, heldout, g);
  const std::size_t episodes = std::min(cfg.count("eval.closed_loop"), heldout.size());
  const Planner planner = model_planner(t.model, anchors, t.stats, g);
  const ClosedLoopConfig cl = closed_loop_config(cfg);
  for (std::size_t i = 0; i < episodes; ++i) {
    const scene::World w = scene::generate_world(heldout[i].seed, heldout[i].params);
    report.scenarios[i].closed_loop = run_episode(w, planner, cl).score;
  }
  finalize(report);
  return report;
}

inline EvalReport run_eval(const RunConfig& cfg, const RunPaths& paths) {
  const TrainedModel t = load_trained(paths);
  require_file(paths.heldout(), "held-out corpus (run gen-data first)");
  log_resolved(paths, "eval", cfg);
  const EvalReport report = evaluate(cfg, t, scene::load_corpus(paths.heldout().string()));
  write_text(paths.report(), report.to_text());
  return report;
}

}  // namespace tddm::harness
