#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/autograd.hpp"
#include "tddm/numerics/checkpoint.hpp"
#include "tddm/numerics/layers.hpp"
#include "tddm/numerics/rng.hpp"
#include "tddm/scene/record.hpp"
#include "tddm/vocabulary.hpp"

namespace tddm::model {

using numerics::AttentionLayout;
using numerics::CounterRng;
using numerics::Init;
using numerics::Linear;
using numerics::Mlp;
using numerics::MultiHeadAttention;
using numerics::ParameterStore;
using numerics::Tensor;
using numerics::Var;
using scene::SceneCaps;
using scene::SceneContext;

enum class AdaLnMode {
  kDecoupled,   // one condition per group, parameters sliced per group
  kMonolithic,  // a single condition drives every channel
};

struct ModelConfig {
  std::size_t dim = 128;
  std::size_t blocks = 3;
  std::size_t heads = 4;
  std::size_t groups = 2;
  std::size_t segments = 4;
  std::size_t anchors = 20;
  std::size_t horizon = 80;
  std::size_t time_features = 128;
  std::size_t ffn_mult = 2;
  std::size_t context_budget = 64;
  bool cross_anchor_attention = false;
  std::uint64_t seed = 0;
  SceneCaps caps;

  std::size_t group_width() const { return dim / groups; }
  std::size_t segment_length() const { return horizon / segments; }
  std::size_t token_features() const { return (segment_length() + 1) * 3; }
  std::size_t context_tokens() const { return 2 + caps.agents + caps.obstacles + caps.map_lanes; }

  vocabulary::SegmentLayout layout() const { return vocabulary::SegmentLayout::make(horizon, segments, groups); }

  void validate() const {
    if (dim == 0 || blocks == 0 || anchors == 0) throw ConfigError("model dims must be positive");
    if (heads == 0 || dim % heads != 0) throw ConfigError("head count must divide model width");
    if (groups == 0 || dim % groups != 0) throw ConfigError("group count must divide model width");
    layout().validate();
    if (time_features < 2 || time_features % 2 != 0) throw ConfigError("time features must be even");
    if (ffn_mult == 0) throw ConfigError("ffn multiplier must be positive");
    if (context_tokens() > context_budget) throw ConfigError("scene caps exceed the context token budget");
  }

  std::map<std::string, std::string> to_meta() const {
    return {{"model.dim", std::to_string(dim)},
            {"model.blocks", std::to_string(blocks)},
            {"model.heads", std::to_string(heads)},
            {"model.groups", std::to_string(groups)},
            {"model.segments", std::to_string(segments)},
            {"model.anchors", std::to_string(anchors)},
            {"model.horizon", std::to_string(horizon)},
            {"model.time_features", std::to_string(time_features)},
            {"model.ffn_mult", std::to_string(ffn_mult)},
            {"model.context_budget", std::to_string(context_budget)},
            {"model.cross_anchor_attention", cross_anchor_attention ? "1" : "0"},
            {"model.seed", std::to_string(seed)},
            {"caps.agents", std::to_string(caps.agents)},
            {"caps.obstacles", std::to_string(caps.obstacles)},
            {"caps.map_lanes", std::to_string(caps.map_lanes)},
            {"caps.route_lanes", std::to_string(caps.route_lanes)},
            {"caps.points", std::to_string(caps.points)},
            {"caps.route_dim", std::to_string(caps.route_dim)},
            {"caps.history", std::to_string(caps.history)},
            {"caps.horizon", std::to_string(caps.horizon)}};
  }

  static ModelConfig from_meta(const std::map<std::string, std::string>& meta) {
    auto get = [&](const std::string& k) -> std::uint64_t {
      const auto it = meta.find(k);
      if (it == meta.end()) throw ParseError("checkpoint metadata missing " + k, -1);
      return std::stoull(it->second);
    };
    ModelConfig c;
    c.dim = get("model.dim");
    c.blocks = get("model.blocks");
    c.heads = get("model.heads");
    c.groups = get("model.groups");
    c.segments = get("model.segments");
    c.anchors = get("model.anchors");
    c.horizon = get("model.horizon");
    c.time_features = get("model.time_features");
    c.ffn_mult = get("model.ffn_mult");
    c.context_budget = get("model.context_budget");
    c.cross_anchor_attention = get("model.cross_anchor_attention") != 0;
    c.seed = get("model.seed");
    c.caps.agents = get("caps.agents");
    c.caps.obstacles = get("caps.obstacles");
    c.caps.map_lanes = get("caps.map_lanes");
    c.caps.route_lanes = get("caps.route_lanes");
    c.caps.points = get("caps.points");
    c.caps.route_dim = get("caps.route_dim");
    c.caps.history = get("caps.history");
    c.caps.horizon = get("caps.horizon");
    c.validate();
    return c;
  }
};

/// Sinusoidal features of a scalar position: [sin(p w_i), cos(p w_i)] with
/// w_i = 10000^(-i/half).
inline void sinusoid(double position, std::size_t width, double* out) {
  const std::size_t half = width / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    out[i] = std::sin(position * w);
    out[half + i] = std::cos(position * w);
  }
  if (width % 2 == 1) out[width - 1] = 0.0;
}

/// Scene tokens for a batch, laid out sample-major, plus the pooled route feature.
struct EncodedContext {
  Var tokens;  // [S*C x D]
  std::vector<std::uint8_t> mask;
  Var navi;  // [S x D]
  std::size_t samples = 0;
  std::size_t per_sample = 0;
};

struct DenoiserOutput {
  Var segments;  // [S*M*N x (L+1)*3], x0 prediction
  Var logits;    // [S*M x 1]
  std::size_t samples = 0;
  std::size_t anchors = 0;
  std::size_t segments_per_anchor = 0;
};

/// Hidden states recorded during a forward pass, for inspection.
struct ForwardTrace {
  Tensor embedded;                   // h after the segment embedding
  std::vector<Tensor> block_inputs;  // per block
  std::vector<Tensor> block_outputs;
};

class Denoiser {
 public:
  explicit Denoiser(const ModelConfig& config) : config_(config) {
    config_.validate();
    CounterRng rng(numerics::mix64(config_.seed ^ 0xD1FF05EULL));
    const std::size_t d = config_.dim;
    const SceneCaps& caps = config_.caps;

    ego_enc_ = Mlp(store_, "enc.ego", scene::kEgoStateDim + caps.history * scene::kEgoHistoryDim, d, d, rng);
    agent_enc_ = Mlp(store_, "enc.agent", caps.history * scene::kAgentDim, d, d, rng);
    obstacle_enc_ = Mlp(store_, "enc.obstacle", scene::kObstacleDim, d, d, rng);
    lane_enc_ = Mlp(store_, "enc.lane", 4, d, d, rng);
    type_embed_ = store_.add("enc.type", numerics::truncated_normal_tensor({4, d}, 0.02, rng));
    null_token_ = store_.add("enc.null", numerics::truncated_normal_tensor({1, d}, 0.02, rng));

    navi_enc_ = Mlp(store_, "cond.navi", caps.route_dim, d, d, rng);
    time_fc1_ = Linear(store_, "cond.time.fc1", config_.time_features, d, rng);
    time_fc2_ = Linear(store_, "cond.time.fc2", d, d, rng);

    pre_ = Mlp(store_, "embed.pre", config_.token_features(), d, config_.group_width(), rng);

    for (std::size_t b = 0; b < config_.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      Block blk;
      blk.adaln = Linear(store_, p + ".adaln", d, 9 * d, rng, Init::kZero);
      blk.self_attn = MultiHeadAttention(store_, p + ".self", d, config_.heads, rng);
      blk.cross_attn = MultiHeadAttention(store_, p + ".cross", d, config_.heads, rng);
      blk.ffn = Mlp(store_, p + ".ffn", d, config_.ffn_mult * d, d, rng);
      blocks_.push_back(std::move(blk));
    }
    final_adaln_ = Linear(store_, "final.adaln", d, 2 * d, rng, Init::kZero);
    for (std::size_t g = 0; g < config_.groups; ++g) {
      decoders_.push_back(Mlp(store_, "decode.group" + std::to_string(g), d, d, config_.token_features(), rng));
    }
    score_head_ = Mlp(store_, "score", d, d, 1, rng);
  }

  const ModelConfig& config() const { return config_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }

  /// One token per ego / agent / obstacle / lane slot plus a learned null
  /// token that is always valid, so every query has a key to attend to.
  EncodedContext encode_context(const std::vector<const SceneContext*>& contexts) const {
    const SceneCaps& caps = config_.caps;
    const std::size_t S = contexts.size();
    if (S == 0) throw ContractError("encode_context needs at least one scene");
    const std::size_t H = caps.history, A = caps.agents, O = caps.obstacles, K = caps.map_lanes, P = caps.points;
    const std::size_t ego_w = scene::kEgoStateDim + H * scene::kEgoHistoryDim;

    Tensor ego({S, ego_w}), agents({S * A, H * scene::kAgentDim}), obstacles({S * O, scene::kObstacleDim}),
        lanes({S * K * P, 4});
    Tensor navi_pts({S * caps.route_lanes * P, caps.route_dim});
    std::vector<std::uint8_t> lane_rows(S * K * P), navi_rows(S * caps.route_lanes * P);
    EncodedContext out;
    out.samples = S;
    out.per_sample = config_.context_tokens();
    out.mask.reserve(S * out.per_sample);

    for (std::size_t s = 0; s < S; ++s) {
      const SceneContext& c = *contexts[s];
      if (!(c.caps().agents == A && c.caps().obstacles == O && c.caps().map_lanes == K && c.caps().points == P &&
            c.caps().history == H && c.caps().route_lanes == caps.route_lanes && c.caps().route_dim == caps.route_dim)) {
        throw DimensionError("scene caps do not match the model configuration");
      }
      std::copy(c.ego_state.values().begin(), c.ego_state.values().end(), ego.data() + s * ego_w);
      std::copy(c.ego_history.values().begin(), c.ego_history.values().end(),
                ego.data() + s * ego_w + scene::kEgoStateDim);
      std::copy(c.agents.values().begin(), c.agents.values().end(), agents.data() + s * A * H * scene::kAgentDim);
      std::copy(c.obstacles.values().begin(), c.obstacles.values().end(),
                obstacles.data() + s * O * scene::kObstacleDim);
      for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t p = 0; p < P; ++p) {
          const double* pt = c.map_lanes.data() + (k * P + p) * 2;
          const double* nb = p + 1 < P ? pt + 2 : pt - 2;
          const double sign = p + 1 < P ? 1.0 : -1.0;
          double* row = lanes.data() + ((s * K + k) * P + p) * 4;
          row[0] = pt[0];
          row[1] = pt[1];
          row[2] = sign * (nb[0] - pt[0]);
          row[3] = sign * (nb[1] - pt[1]);
          lane_rows[(s * K + k) * P + p] = c.lane_mask[k];
        }
      }
      std::copy(c.navi.values().begin(), c.navi.values().end(), navi_pts.data() + s * caps.route_lanes * P * caps.route_dim);
      for (std::size_t r = 0; r < caps.route_lanes; ++r) {
        for (std::size_t p = 0; p < P; ++p) navi_rows[(s * caps.route_lanes + r) * P + p] = c.navi_mask[r];
      }
      out.mask.push_back(1);
      out.mask.insert(out.mask.end(), c.agent_mask.begin(), c.agent_mask.end());
      out.mask.insert(out.mask.end(), c.obstacle_mask.begin(), c.obstacle_mask.end());
      out.mask.insert(out.mask.end(), c.lane_mask.begin(), c.lane_mask.end());
      out.mask.push_back(1);
    }

    using namespace numerics;
    Var ego_tok = add_rowvec(ego_enc_(Var::constant(ego)), slice_rows(type_embed_, 0, 1));
    Var agent_tok = add_rowvec(agent_enc_(Var::constant(agents)), slice_rows(type_embed_, 1, 2));
    Var obst_tok = add_rowvec(obstacle_enc_(Var::constant(obstacles)), slice_rows(type_embed_, 2, 3));
    Var lane_tok = add_rowvec(max_pool_rows(lane_enc_(Var::constant(lanes)), P, lane_rows),
                              slice_rows(type_embed_, 3, 4));
    Var all = concat_rows({ego_tok, agent_tok, obst_tok, lane_tok, null_token_});
    std::vector<std::size_t> order;
    order.reserve(S * out.per_sample);
    const std::size_t agent0 = S, obst0 = S + S * A, lane0 = obst0 + S * O, null_row = lane0 + S * K;
    for (std::size_t s = 0; s < S; ++s) {
      order.push_back(s);
      for (std::size_t a = 0; a < A; ++a) order.push_back(agent0 + s * A + a);
      for (std::size_t o = 0; o < O; ++o) order.push_back(obst0 + s * O + o);
      for (std::size_t k = 0; k < K; ++k) order.push_back(lane0 + s * K + k);
      order.push_back(null_row);
    }
    out.tokens = gather_rows(all, std::move(order));
    out.navi = max_pool_rows(navi_enc_(Var::constant(navi_pts)), caps.route_lanes * P, navi_rows);
    return out;
  }

  /// y = F_time(sinusoid(t)) + F_navi(navi), one row per (sample, time) pair.
  /// `times` is [S x G'] for any G'; rows come out sample-major.
  Var conditions(const Tensor& times, const EncodedContext& ctx) const {
    using namespace numerics;
    const std::size_t S = ctx.samples;
    if (times.rank() != 2 || times.dim(0) != S) throw DimensionError("condition times must be [samples x groups]");
    const std::size_t G = times.dim(1);
    Tensor feats({S * G, config_.time_features});
    for (std::size_t i = 0; i < S * G; ++i) {
      sinusoid(1000.0 * times[i], config_.time_features, feats.data() + i * config_.time_features);
    }
    Var t = time_fc2_(silu(time_fc1_(Var::constant(feats))));
    std::vector<std::size_t> idx(S * G);
    for (std::size_t i = 0; i < S * G; ++i) idx[i] = i / G;
    return add(t, gather_rows(ctx.navi, std::move(idx)));
  }

  /// Modulation parameters [S x width*D] for one adaLN head. Decoupled mode
  /// takes each chunk's group-g channel slice from F_adaLN(y_g).
  Var modulation(const Linear& head, std::size_t chunks, const Var& y, std::size_t samples, AdaLnMode mode) const {
    using namespace numerics;
    Var raw = head(silu(y));
    if (mode == AdaLnMode::kMonolithic) return raw;
    const std::size_t G = config_.groups, d = config_.dim, w = config_.group_width();
    std::vector<Var> per_group;
    for (std::size_t g = 0; g < G; ++g) {
      std::vector<std::size_t> rows(samples);
      for (std::size_t s = 0; s < samples; ++s) rows[s] = s * G + g;
      per_group.push_back(gather_rows(raw, std::move(rows)));
    }
    std::vector<Var> parts;
    for (std::size_t c = 0; c < chunks; ++c) {
      for (std::size_t g = 0; g < G; ++g) {
        parts.push_back(slice_cols(per_group[g], c * d + g * w, c * d + (g + 1) * w));
      }
    }
    return concat_cols(parts);
  }

  /// Parameters of block b for inspection: [S x 9D] as
  /// (shift, scale, gate) for self-attention, cross-attention and FFN.
  Var block_modulation(std::size_t b, const Tensor& group_times, const EncodedContext& ctx,
                       AdaLnMode mode = AdaLnMode::kDecoupled) const {
    const Var y = conditions(mode_times(group_times, mode), ctx);
    return modulation(blocks_.at(b).adaln, 9, y, ctx.samples, mode);
  }

  /// Embedding: group positional encoding on the raw segment
  /// values, shared projection to D/G channels, placed in the group's slice.
  Var embed_segments(const Tensor& noised, std::size_t samples) const {
    using namespace numerics;
    const std::size_t N = config_.segments, G = config_.groups, F = config_.token_features();
    const std::size_t w = config_.group_width();
    if (noised.rank() != 2 || noised.cols() != F || noised.rows() % (samples * N) != 0) {
      throw DimensionError("noised segments must be [samples*anchors*segments x (L+1)*3]");
    }
    const std::size_t T = noised.rows();
    Tensor input = noised;
    std::vector<double> pe(F);
    for (std::size_t r = 0; r < T; ++r) {
      const std::size_t g = config_.layout().group_of(r % N);
      sinusoid(static_cast<double>(g), F, pe.data());
      for (std::size_t j = 0; j < F; ++j) input[r * F + j] += pe[j];
    }
    Var pre = pre_(Var::constant(input));
    if (G == 1) return pre;
    std::vector<Var> slices;
    for (std::size_t g = 0; g < G; ++g) {
      Tensor mask({T, w});
      for (std::size_t r = 0; r < T; ++r) {
        if (config_.layout().group_of(r % N) != g) continue;
        for (std::size_t j = 0; j < w; ++j) mask[r * w + j] = 1.0;
      }
      slices.push_back(mul(pre, Var::constant(mask)));
    }
    return concat_cols(slices);
  }

  /// Denoiser forward. `noised` holds S samples x M anchors x N segments
  /// (sample-major); `group_times` is [S x G].
  DenoiserOutput forward(const Tensor& noised, const Tensor& group_times, const EncodedContext& ctx,
                         AdaLnMode mode = AdaLnMode::kDecoupled, ForwardTrace* trace = nullptr) const {
    using namespace numerics;
    const std::size_t S = ctx.samples, N = config_.segments, G = config_.groups, d = config_.dim;
    if (group_times.rank() != 2 || group_times.dim(0) != S || group_times.dim(1) != G) {
      throw DimensionError("group times must be [samples x groups]");
    }
    Var x = embed_segments(noised, S);
    const std::size_t T = x.rows();
    const std::size_t M = T / (S * N);

    // Segment-index position inside the anchor, so tokens of one group stay distinguishable.
    {
      Tensor pos({T, d});
      for (std::size_t r = 0; r < T; ++r) sinusoid(static_cast<double>(r % N), d, pos.data() + r * d);
      x = add(x, Var::constant(pos));
    }
    if (trace) trace->embedded = x.value();

    const Var y = conditions(mode_times(group_times, mode), ctx);
    std::vector<std::size_t> token_sample(T);
    for (std::size_t r = 0; r < T; ++r) token_sample[r] = r / (M * N);

    const AttentionLayout self_layout = config_.cross_anchor_attention ? AttentionLayout{S, M * N, M * N}
                                                                       : AttentionLayout{S * M, N, N};
    const AttentionLayout cross_layout{S, M * N, ctx.per_sample};

    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const Block& blk = blocks_[b];
      if (trace) trace->block_inputs.push_back(x.value());
      Var params = gather_rows(modulation(blk.adaln, 9, y, S, mode), token_sample);
      auto chunk = [&](std::size_t c) { return slice_cols(params, c * d, (c + 1) * d); };
      auto modulate = [&](const Var& h, std::size_t c) {
        // shift + (1 + scale) * LN(h)
        Var n = layer_norm(h, 1e-6);
        return add(add(n, mul(n, chunk(c + 1))), chunk(c));
      };
      Var h = modulate(x, 0);
      x = add(x, mul(chunk(2), blk.self_attn(h, h, self_layout)));
      h = modulate(x, 3);
      x = add(x, mul(chunk(5), blk.cross_attn(h, ctx.tokens, cross_layout, ctx.mask)));
      h = modulate(x, 6);
      x = add(x, mul(chunk(8), blk.ffn(h)));
      if (trace) trace->block_outputs.push_back(x.value());
    }

    Var fin = gather_rows(modulation(final_adaln_, 2, y, S, mode), token_sample);
    Var n = layer_norm(x, 1e-6);
    Var h = add(add(n, mul(n, slice_cols(fin, d, 2 * d))), slice_cols(fin, 0, d));

    // Group-specific decoders, results put back in token order.
    std::vector<Var> decoded;
    std::vector<std::size_t> position(T);
    std::size_t offset = 0;
    for (std::size_t g = 0; g < G; ++g) {
      std::vector<std::size_t> rows;
      for (std::size_t r = 0; r < T; ++r) {
        if (config_.layout().group_of(r % N) == g) rows.push_back(r);
      }
      for (std::size_t i = 0; i < rows.size(); ++i) position[rows[i]] = offset + i;
      offset += rows.size();
      decoded.push_back(decoders_[g](gather_rows(h, std::move(rows))));
    }
    DenoiserOutput out;
    out.segments = G == 1 ? decoded.front() : gather_rows(concat_rows(decoded), std::move(position));
    out.logits = score_head_(mean_pool_rows(h, N));
    out.samples = S;
    out.anchors = M;
    out.segments_per_anchor = N;
    return out;
  }

 private:
  struct Block {
    Linear adaln;
    MultiHeadAttention self_attn;
    MultiHeadAttention cross_attn;
    Mlp ffn;
  };

  // Monolithic mode conditions on the mean group time.
  Tensor mode_times(const Tensor& group_times, AdaLnMode mode) const {
    if (mode == AdaLnMode::kDecoupled) return group_times;
    const std::size_t S = group_times.dim(0), G = group_times.dim(1);
    Tensor t({S, 1});
    for (std::size_t s = 0; s < S; ++s) {
      double m = 0.0;
      bool equal = true;
      for (std::size_t g = 0; g < G; ++g) {
        m += group_times[s * G + g];
        equal = equal && group_times[s * G + g] == group_times[s * G];
      }
      t[s] = equal ? group_times[s * G] : m / static_cast<double>(G);
    }
    return t;
  }

  ModelConfig config_;
  ParameterStore store_;
  Mlp ego_enc_, agent_enc_, obstacle_enc_, lane_enc_;
  Var type_embed_, null_token_;
  Mlp navi_enc_;
  Linear time_fc1_, time_fc2_;
  Mlp pre_;
  std::vector<Block> blocks_;
  Linear final_adaln_;
  std::vector<Mlp> decoders_;
  Mlp score_head_;
};

inline void save_model(const std::string& path, const Denoiser& model,
                       const std::map<std::string, std::string>& extra_meta = {}) {
  numerics::Checkpoint ckpt = numerics::snapshot(model.parameters());
  for (const auto& [k, v] : model.config().to_meta()) ckpt.meta[k] = v;
  for (const auto& [k, v] : extra_meta) ckpt.meta[k] = v;
  numerics::save_checkpoint(path, ckpt);
}

inline Denoiser load_model(const std::string& path, std::map<std::string, std::string>* meta = nullptr) {
  const numerics::Checkpoint ckpt = numerics::load_checkpoint(path);
  Denoiser model(ModelConfig::from_meta(ckpt.meta));
  numerics::restore(model.parameters(), ckpt);
  if (meta) *meta = ckpt.meta;
  return model;
}

}  // namespace tddm::model
