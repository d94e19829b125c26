#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/model.hpp"
#include "tddm/numerics/adamw.hpp"
#include "tddm/schedule.hpp"
#include "tddm/scene/record.hpp"
#include "tddm/vocabulary.hpp"

namespace tddm::training {

using model::AdaLnMode;
using model::Denoiser;
using model::DenoiserOutput;
using numerics::CounterRng;
using numerics::Tensor;
using numerics::Var;
using vocabulary::AnchorVocabulary;
using vocabulary::LabelAssignment;
using vocabulary::SegmentLayout;
using vocabulary::Trajectory;
using vocabulary::Waypoint;

struct LossConfig {
  double lambda = 1.0;  // classification weight
  double gamma = 0.5;   // continuity weight

  void validate() const {
    if (!(lambda >= 0.0) || !(gamma >= 0.0)) throw ConfigError("loss weights must be non-negative");
  }
};

/// Segments of one trajectory as rows [N x (L+1)*3].
inline Tensor segment_rows(const Trajectory& traj, const SegmentLayout& layout, const Waypoint& pose) {
  const auto seg = vocabulary::tokenize(traj, layout, pose);
  return seg.segments.reshaped({layout.segments, layout.points_per_segment() * 3});
}

/// All anchors tokenized and stacked: [M*N x (L+1)*3].
inline Tensor anchor_rows(const AnchorVocabulary& vocab, const SegmentLayout& layout, const Waypoint& pose) {
  if (vocab.size() == 0) throw ContractError("empty anchor vocabulary");
  const std::size_t F = layout.points_per_segment() * 3;
  Tensor out({vocab.size() * layout.segments, F});
  for (std::size_t k = 0; k < vocab.size(); ++k) {
    const Tensor rows = segment_rows(vocab.anchors[k], layout, pose);
    std::copy(rows.values().begin(), rows.values().end(), out.data() + k * layout.segments * F);
  }
  return out;
}

/// Normalized records with their tokenized futures and positive-anchor labels.
struct TrainingSet {
  SegmentLayout layout;
  Waypoint origin;  // normalized ego pose, the shared first point of every sequence
  Tensor anchors;   // [M*N x F]
  std::vector<scene::ScenarioRecord> records;
  std::vector<Tensor> targets;  // [N x F] each
  std::vector<LabelAssignment> labels;

  std::size_t size() const { return records.size(); }
  std::size_t anchor_count() const { return anchors.rows() / layout.segments; }
};

inline TrainingSet prepare_training_set(std::vector<scene::ScenarioRecord> normalized, const AnchorVocabulary& vocab,
                                        const SegmentLayout& layout, const scene::NormalizationStats& stats) {
  layout.validate();
  TrainingSet set;
  set.layout = layout;
  set.origin = scene::normalize_pose(Waypoint{}, stats);
  set.anchors = anchor_rows(vocab, layout, set.origin);
  set.records = std::move(normalized);
  for (const auto& r : set.records) {
    const Trajectory gt = r.trajectory();
    set.targets.push_back(segment_rows(gt, layout, set.origin));
    set.labels.push_back(vocabulary::assign_label(gt, vocab));
  }
  return set;
}

struct NoisedAnchors {
  Tensor noised;       // [S*M*N x F]
  Tensor noise;        // eps, same shape
  Tensor group_times;  // [S x G]
};

/// Draws one time per group and sample (or one per sample when
/// `shared_timestep`), then independent Gaussian noise per segment.
inline NoisedAnchors sample_decoupled_noise(const Tensor& clean, std::size_t samples, const SegmentLayout& layout,
                                            const schedule::VpSchedule& sched, CounterRng rng,
                                            bool shared_timestep = false, const Tensor* forced_times = nullptr) {
  const std::size_t N = layout.segments, G = layout.groups;
  if (clean.rank() != 2 || samples == 0 || clean.rows() % (samples * N) != 0) {
    throw DimensionError("clean anchors must be [samples*anchors*segments x F]");
  }
  const std::size_t M = clean.rows() / (samples * N), F = clean.cols();
  NoisedAnchors out;
  if (forced_times) {
    if (forced_times->rank() != 2 || forced_times->dim(0) != samples || forced_times->dim(1) != G) {
      throw DimensionError("forced times must be [samples x groups]");
    }
    out.group_times = *forced_times;
  } else {
    CounterRng trng = rng.derive(0);
    out.group_times = Tensor({samples, G});
    for (std::size_t s = 0; s < samples; ++s) {
      const double shared = shared_timestep ? trng.uniform() : 0.0;
      for (std::size_t g = 0; g < G; ++g) out.group_times[s * G + g] = shared_timestep ? shared : trng.uniform();
    }
  }
  CounterRng erng = rng.derive(1);
  out.noise = Tensor(clean.shape());
  for (double& e : out.noise.storage()) e = erng.normal();
  out.noised = Tensor(clean.shape());
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t r = 0; r < M * N; ++r) {
      const std::size_t row = s * M * N + r;
      const double t = out.group_times[s * G + layout.group_of(r % N)];
      const double a = sched.alpha(t), sg = sched.sigma(t);
      for (std::size_t j = 0; j < F; ++j) {
        out.noised[row * F + j] = a * clean[row * F + j] + sg * out.noise[row * F + j];
      }
    }
  }
  return out;
}

struct LossTerms {
  Var total;
  double reconstruction = 0.0;
  double continuity = 0.0;  // unweighted
  double classification = 0.0;  // unweighted
};

/// Per-sample reconstruction pieces on the positive anchor's segments
/// `pred` [S*N x F] against `target` [S*N x F]: mean L1 and the summed L1
/// gap across the G-1 group boundaries, both averaged over samples.
struct ReconstructionTerms {
  Var l1;
  Var continuity;
};

inline ReconstructionTerms reconstruction_terms(const Var& pred, const Tensor& target, const SegmentLayout& layout) {
  using namespace numerics;
  if (pred.value().shape() != target.shape() || target.rank() != 2 ||
      target.cols() != layout.points_per_segment() * 3 || target.rows() % layout.segments != 0) {
    throw DimensionError("reconstruction: prediction and target must both be [samples*segments x (L+1)*3]");
  }
  const std::size_t N = layout.segments, S = target.rows() / N, L = layout.length();
  ReconstructionTerms out;
  out.l1 = mean(abs(sub(pred, Var::constant(target))));
  if (layout.groups < 2) {
    out.continuity = Var::constant(Tensor::scalar(0.0));
    return out;
  }
  std::vector<std::size_t> ends, starts;
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t g = 0; g + 1 < layout.groups; ++g) {
      ends.push_back(s * N + layout.last_segment(g));
      starts.push_back(s * N + layout.first_segment(g + 1));
    }
  }
  Var end_pts = slice_cols(gather_rows(pred, std::move(ends)), 3 * L, 3 * L + 3);
  Var start_pts = slice_cols(gather_rows(pred, std::move(starts)), 0, 3);
  out.continuity = scale(sum(abs(sub(end_pts, start_pts))), 1.0 / static_cast<double>(S));
  return out;
}

/// L_rec = mean|pred - gt| + gamma * sum over group boundaries of the L1 endpoint gap.
inline Var reconstruction_loss(const Var& pred, const Tensor& target, const SegmentLayout& layout, double gamma) {
  const auto t = reconstruction_terms(pred, target, layout);
  return numerics::add(t.l1, numerics::scale(t.continuity, gamma));
}

inline void check_one_hot(const LabelAssignment& label, std::size_t anchors) {
  if (label.one_hot.size() != anchors || label.index >= anchors) throw ContractError("label does not match anchor count");
  for (std::size_t k = 0; k < anchors; ++k) {
    const double expect = k == label.index ? 1.0 : 0.0;
    if (label.one_hot[k] != expect) throw ContractError("labels must be one-hot");
  }
}

/// Sum over anchors of y_k * L_rec + lambda * BCE, averaged over samples.
/// `targets` is [S*N x F], one ground truth per sample.
inline LossTerms total_loss(const DenoiserOutput& out, const Tensor& targets, const std::vector<LabelAssignment>& labels,
                            const SegmentLayout& layout, const LossConfig& cfg) {
  using namespace numerics;
  cfg.validate();
  const std::size_t S = out.samples, M = out.anchors, N = layout.segments;
  if (labels.size() != S) throw DimensionError("one label per sample required");
  if (out.segments_per_anchor != N) throw DimensionError("layout does not match model output");
  std::vector<std::size_t> positive;
  Tensor y({S * M, 1});
  for (std::size_t s = 0; s < S; ++s) {
    check_one_hot(labels[s], M);
    for (std::size_t n = 0; n < N; ++n) positive.push_back((s * M + labels[s].index) * N + n);
    y[s * M + labels[s].index] = 1.0;
  }
  const Var pred = gather_rows(out.segments, std::move(positive));
  const ReconstructionTerms rec = reconstruction_terms(pred, targets, layout);
  const Var bce = scale(bce_with_logits(out.logits, y), 1.0 / static_cast<double>(S));
  LossTerms terms;
  terms.total = add(add(rec.l1, scale(rec.continuity, cfg.gamma)), scale(bce, cfg.lambda));
  terms.reconstruction = rec.l1.value().item();
  terms.continuity = rec.continuity.value().item();
  terms.classification = bce.value().item();
  return terms;
}

/// Fraction of samples whose highest logit is the positive anchor.
inline double positive_accuracy(const DenoiserOutput& out, const std::vector<LabelAssignment>& labels) {
  std::size_t hits = 0;
  for (std::size_t s = 0; s < out.samples; ++s) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < out.anchors; ++k) {
      if (out.logits.value()[s * out.anchors + k] > out.logits.value()[s * out.anchors + best]) best = k;
    }
    hits += best == labels[s].index;
  }
  return static_cast<double>(hits) / static_cast<double>(out.samples);
}

struct TrainBatch {
  std::uint64_t seed = 0;
  std::vector<std::size_t> indices;
  NoisedAnchors noise;
  Tensor targets;  // [S*N x F]
  std::vector<LabelAssignment> labels;
  std::vector<const scene::SceneContext*> contexts;
};

inline TrainBatch make_batch(const TrainingSet& data, std::vector<std::size_t> indices, const schedule::VpSchedule& sched,
                             CounterRng rng, bool shared_timestep) {
  TrainBatch b;
  b.seed = rng.key();
  b.indices = std::move(indices);
  const std::size_t S = b.indices.size(), N = data.layout.segments, F = data.anchors.cols();
  const std::size_t MN = data.anchors.rows();
  Tensor clean({S * MN, F});
  b.targets = Tensor({S * N, F});
  for (std::size_t i = 0; i < S; ++i) {
    const std::size_t r = b.indices[i];
    std::copy(data.anchors.values().begin(), data.anchors.values().end(), clean.data() + i * MN * F);
    std::copy(data.targets[r].values().begin(), data.targets[r].values().end(), b.targets.data() + i * N * F);
    b.labels.push_back(data.labels[r]);
    b.contexts.push_back(&data.records[r].context);
  }
  b.noise = sample_decoupled_noise(clean, S, data.layout, sched, rng, shared_timestep);
  return b;
}

struct StepMetrics {
  std::size_t step = 0;
  double loss = 0.0;
  double rec = 0.0;
  double bce = 0.0;
  double cont = 0.0;
  double acc = 0.0;
};

inline std::string format_metrics(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "step=%zu loss=%.9g rec=%.9g bce=%.9g cont=%.9g acc=%.6g", m.step, m.loss, m.rec,
                m.bce, m.cont, m.acc);
  return buf;
}

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t noise_draws = 1;  // independent noise samples of each scenario per batch
  std::size_t epochs = 500;
  std::size_t max_steps = 0;  // 0: no cap beyond epochs
  numerics::AdamWConfig optimizer;
  std::size_t warmup_steps = 0;  // linear ramp from zero
  bool cosine_decay = false;     // decay to zero over the planned step count
  LossConfig loss;
  schedule::VpSchedule schedule;
  AdaLnMode mode = AdaLnMode::kDecoupled;
  bool shared_timestep = false;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // steps between held-out evaluations, 0 disables
  std::size_t patience = 0;    // evaluations without improvement before stopping, 0 disables
  std::size_t checkpoint_every = 0;
  std::string checkpoint_path;

  void validate() const {
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (noise_draws == 0) throw ConfigError("noise draws must be positive");
    if (epochs == 0 && max_steps == 0) throw ConfigError("training needs epochs or a step cap");
    if (!(optimizer.learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (checkpoint_every > 0 && checkpoint_path.empty()) throw ConfigError("checkpoint interval needs a path");
    loss.validate();
    schedule.validate();
  }
};

struct TrainResult {
  std::vector<StepMetrics> history;
  std::vector<std::pair<std::size_t, double>> heldout;  // (step, ADE)
  std::size_t steps = 0;
  bool early_stopped = false;
};

/// Learning rate at 1-based `step` out of `total` planned steps.
inline double learning_rate_at(const TrainConfig& cfg, std::size_t step, std::size_t total) {
  double lr = cfg.optimizer.learning_rate;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) {
    return lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.cosine_decay && total > cfg.warmup_steps) {
    const double u = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(total - cfg.warmup_steps);
    lr *= 0.5 * (1.0 + std::cos(M_PI * std::min(u, 1.0)));
  }
  return lr;
}

/// One optimizer step on `batch`; returns the metrics before the update.
inline StepMetrics train_step(Denoiser& model, numerics::OptimizerState& opt, const TrainingSet& data,
                              const TrainBatch& batch, const TrainConfig& cfg, std::size_t step) {
  model.parameters().zero_grad();
  const auto enc = model.encode_context(batch.contexts);
  const DenoiserOutput out = model.forward(batch.noise.noised, batch.noise.group_times, enc, cfg.mode);
  const LossTerms terms = total_loss(out, batch.targets, batch.labels, data.layout, cfg.loss);
  StepMetrics m{step, terms.total.value().item(), terms.reconstruction, terms.classification, terms.continuity,
                positive_accuracy(out, batch.labels)};
  if (!std::isfinite(m.loss)) {
    throw NumericalError("non-finite loss at step " + std::to_string(step) + ", batch seed " +
                             std::to_string(batch.seed),
                         batch.seed);
  }
  numerics::backward(terms.total);
  numerics::adamw_step(model.parameters(), opt);
  return m;
}

/// Shuffled minibatch training. `heldout_ade`, when given, is called every
/// `eval_every` steps and drives early stopping.
inline TrainResult train(Denoiser& model, const TrainingSet& data, const TrainConfig& cfg, std::ostream* log = nullptr,
                         const std::function<double(const Denoiser&)>& heldout_ade = {}) {
  cfg.validate();
  if (data.size() == 0) throw ContractError("training set is empty");
  if (data.anchor_count() != model.config().anchors) throw ConfigError("vocabulary size does not match model anchors");
  if (!(data.layout == model.config().layout())) throw ConfigError("training layout does not match model");

  numerics::OptimizerState opt = numerics::make_optimizer_state(model.parameters(), cfg.optimizer);
  const CounterRng root(cfg.seed);
  TrainResult result;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::size_t step = 0;
  std::vector<std::size_t> order(data.size());
  const std::size_t epochs = cfg.epochs == 0 ? std::numeric_limits<std::size_t>::max() : cfg.epochs;
  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t planned = cfg.max_steps;
  if (cfg.epochs > 0 && (planned == 0 || cfg.epochs * per_epoch < planned)) planned = cfg.epochs * per_epoch;

  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    CounterRng shuffle = root.derive(0x5u).derive(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) return result;
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      ++step;
      std::vector<std::size_t> picked;
      for (std::size_t i = begin; i < end; ++i) picked.insert(picked.end(), cfg.noise_draws, order[i]);
      const TrainBatch batch = make_batch(data, std::move(picked), cfg.schedule,
                                          root.derive(0x6u).derive(step), cfg.shared_timestep);
      opt.config.learning_rate = learning_rate_at(cfg, step, planned);
      StepMetrics m;
      try {
        m = train_step(model, opt, data, batch, cfg, step);
      } catch (const NumericalError& e) {
        if (log) *log << "abort " << e.what() << '\n' << std::flush;
        throw;
      }
      result.history.push_back(m);
      result.steps = step;
      if (log) *log << format_metrics(m) << '\n';

      if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0) {
        model::save_model(cfg.checkpoint_path, model, {{"train.step", std::to_string(step)}});
      }
      if (heldout_ade && cfg.eval_every > 0 && step % cfg.eval_every == 0) {
        const double ade = heldout_ade(model);
        result.heldout.emplace_back(step, ade);
        char buf[96];
        std::snprintf(buf, sizeof buf, "eval step=%zu heldout_ade=%.9g", step, ade);
        if (log) *log << buf << '\n';
        if (ade < best) {
          best = ade;
          stale = 0;
        } else if (cfg.patience > 0 && ++stale >= cfg.patience) {
          result.early_stopped = true;
          return result;
        }
      }
    }
  }
  return result;
}

}  // namespace tddm::training
