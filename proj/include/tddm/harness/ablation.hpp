#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tddm/harness/pipeline.hpp"

namespace tddm::harness {

enum class AblationAxis { kComponents, kTokens, kCfgScale };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "components") return AblationAxis::kComponents;
  if (s == "tokens") return AblationAxis::kTokens;
  if (s == "cfg-scale" || s == "cfg") return AblationAxis::kCfgScale;
  throw UsageError("unknown ablation axis '" + s + "' (expected components, tokens or cfg-scale)");
}

inline std::string axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::kComponents: return "components";
    case AblationAxis::kTokens: return "tokens";
    case AblationAxis::kCfgScale: return "cfg-scale";
  }
  return "?";
}

struct AblationRow {
  std::string label;
  std::vector<std::pair<std::string, std::string>> overrides;
};

/// Component toggles: tokenization, decoupled adaLN, independent noise, guidance.
inline std::vector<AblationRow> component_rows(const RunConfig& base) {
  const std::string N = base.raw("model.segments"), G = base.raw("model.groups");
  auto row = [&](std::string label, bool tokens, bool decoupled, bool independent, bool cfg) {
    return AblationRow{std::move(label),
                       {{"model.segments", tokens ? N : "1"},
                        {"model.groups", tokens ? G : "1"},
                        {"model.adaln", decoupled ? "decoupled" : "monolithic"},
                        {"train.shared_timestep", independent ? "false" : "true"},
                        {"guidance.enabled", cfg ? "true" : "false"}}};
  };
  return {row("1", false, false, false, false), row("2", true, false, false, false),
          row("3", true, true, false, false),   row("4", true, false, true, false),
          row("5", true, true, true, false),    row("6", true, true, true, true)};
}

inline std::vector<AblationRow> token_rows() {
  std::vector<AblationRow> rows;
  for (std::size_t n : {1, 2, 4, 8, 16}) {
    const std::string g = std::to_string(std::min<std::size_t>(2, n));
    rows.push_back({std::to_string(n), {{"model.segments", std::to_string(n)}, {"model.groups", g}}});
  }
  return rows;
}

inline std::vector<AblationRow> cfg_rows() {
  std::vector<AblationRow> rows;
  for (const char* w : {"0.75", "1.0", "1.25", "1.5", "1.75"}) rows.push_back({w, {{"guidance.scale", w}}});
  return rows;
}

inline std::vector<AblationRow> ablation_rows(const RunConfig& base, AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kComponents: return component_rows(base);
    case AblationAxis::kTokens: return token_rows();
    case AblationAxis::kCfgScale: return cfg_rows();
  }
  return {};
}

struct AblationResult {
  AblationAxis axis;
  std::vector<std::string> labels;
  std::vector<RunConfig> configs;
  std::vector<EvalReport> reports;
};

/// Keys that change the trained weights; rows agreeing on all of them share one model.
inline std::string training_signature(const RunConfig& c) {
  std::string sig;
  for (const auto& [k, v] : RunConfig::defaults()) {
    if (k.rfind("guidance.", 0) == 0 || k.rfind("eval.", 0) == 0) continue;
    sig += k + "=" + c.raw(k) + ";";
  }
  return sig;
}

inline std::string ablation_csv(const AblationResult& r) {
  std::ostringstream os;
  os << "# synthetic desk-scale benchmark; scores are not comparable to any published table\n";
  os << "axis,row,N,G,adaln,independent_noise,guidance,w,ade_m,fde_m,collision_rate,closed_loop,score\n";
  for (std::size_t i = 0; i < r.reports.size(); ++i) {
    const RunConfig& c = r.configs[i];
    const EvalReport& e = r.reports[i];
    os << axis_name(r.axis) << ',' << r.labels[i] << ',' << c.raw("model.segments") << ',' << c.raw("model.groups")
       << ',' << c.raw("model.adaln") << ',' << (c.flag("train.shared_timestep") ? "off" : "on") << ','
       << (c.flag("guidance.enabled") ? "on" : "off") << ',' << c.raw("guidance.scale") << ',' << fmt(e.ade) << ','
       << fmt(e.fde) << ',' << fmt(e.collision_rate) << ',' << fmt(e.closed_loop) << ',' << fmt(e.composite) << "\n";
  }
  return os.str();
}

/// Bar chart of the composite score per row.
inline std::string ablation_svg(const AblationResult& r) {
  const double W = 480, H = 300, left = 50, bottom = 40, top = 40;
  const std::size_t n = r.reports.size();
  const double slot = (W - left - 20) / static_cast<double>(std::max<std::size_t>(1, n));
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\">\n", W, H);
  os << buf;
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"20\" font-size=\"13\" font-family=\"sans-serif\">%s ablation "
                "(synthetic benchmark, not comparable)</text>\n",
                left, axis_name(r.axis).c_str());
  os << buf;
  const double plot_h = H - bottom - top;
  std::snprintf(buf, sizeof buf, "<line x1=\"%.0f\" y1=\"%.0f\" x2=\"%.0f\" y2=\"%.0f\" stroke=\"black\"/>\n", left,
                H - bottom, W - 10, H - bottom);
  os << buf;
  for (int tick = 0; tick <= 100; tick += 25) {
    const double y = H - bottom - plot_h * tick / 100.0;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.0f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\" font-family=\"sans-serif\">%d</text>\n",
                  left - 5, y + 3, tick);
    os << buf;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double v = std::clamp(r.reports[i].composite, 0.0, 100.0);
    const double h = plot_h * v / 100.0;
    const double x = left + slot * static_cast<double>(i) + 0.15 * slot;
    std::snprintf(buf, sizeof buf, "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"steelblue\"/>\n", x,
                  H - bottom - h, 0.7 * slot, h);
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.0f\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">%s</text>\n",
                  x + 0.35 * slot, H - bottom + 15, r.labels[i].c_str());
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"middle\" font-family=\"sans-serif\">%.1f</text>\n",
                  x + 0.35 * slot, H - bottom - h - 4, v);
    os << buf;
  }
  os << "</svg>\n";
  return os.str();
}

/// Trains and evaluates every row of an axis from the corpus and anchors in
/// `paths`. Each distinct training configuration gets its own subdirectory.
inline AblationResult run_ablation(const RunConfig& base, const RunPaths& paths, AblationAxis axis,
                                   std::ostream* progress = nullptr) {
  if (!fs::exists(paths.corpus())) run_gen_data(base, paths);
  if (!fs::exists(paths.anchors()) || !fs::exists(paths.stats())) run_build_anchors(base, paths);
  log_resolved(paths, "ablate-" + axis_name(axis), base);
  const auto heldout = scene::load_corpus(paths.heldout().string());

  AblationResult result{axis, {}, {}, {}};
  std::map<std::string, fs::path> trained;
  const fs::path root = paths.dir / ("ablate-" + axis_name(axis));
  for (const AblationRow& row : ablation_rows(base, axis)) {
    RunConfig c = base;
    for (const auto& [k, v] : row.overrides) c.set(k, v);
    const std::string sig = training_signature(c);
    if (!trained.count(sig)) {
      RunPaths sub{root / ("model" + std::to_string(trained.size()))};
      fs::create_directories(sub.dir);
      fs::copy_file(paths.corpus(), sub.corpus(), fs::copy_options::overwrite_existing);
      fs::copy_file(paths.anchors(), sub.anchors(), fs::copy_options::overwrite_existing);
      fs::copy_file(paths.stats(), sub.stats(), fs::copy_options::overwrite_existing);
      if (progress) *progress << "ablate " << axis_name(axis) << " row " << row.label << ": training\n" << std::flush;
      run_train(c, sub);
      trained[sig] = sub.dir;
    }
    const TrainedModel t = load_trained(RunPaths{trained[sig]});
    result.labels.push_back(row.label);
    result.configs.push_back(c);
    result.reports.push_back(evaluate(c, t, heldout));
    if (progress) {
      *progress << "ablate " << axis_name(axis) << " row " << row.label << ": score " << fmt(result.reports.back().composite)
                << "\n" << std::flush;
    }
  }
  write_text(paths.dir / ("ablation-" + axis_name(axis) + ".csv"), ablation_csv(result));
  write_text(paths.dir / ("ablation-" + axis_name(axis) + ".svg"), ablation_svg(result));
  return result;
}

}  // namespace tddm::harness
