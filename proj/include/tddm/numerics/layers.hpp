#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/autograd.hpp"
#include "tddm/numerics/rng.hpp"

namespace tddm::numerics {

/// Named, ordered collection of trainable leaves. Order is registration order
/// and is what the checkpoint format and the optimizer state follow.
class ParameterStore {
 public:
  Var add(std::string name, Tensor init) {
    for (const auto& [existing, _] : entries_) {
      if (existing == name) throw ConfigError("duplicate parameter name: " + name);
    }
    Var v = Var::parameter(std::move(init));
    entries_.emplace_back(std::move(name), v);
    return v;
  }

  const std::vector<std::pair<std::string, Var>>& entries() const noexcept { return entries_; }
  std::vector<std::pair<std::string, Var>>& entries() noexcept { return entries_; }

  const Var& get(const std::string& name) const {
    for (const auto& [n, v] : entries_) {
      if (n == name) return v;
    }
    throw ConfigError("unknown parameter: " + name);
  }

  void zero_grad() {
    for (auto& [_, v] : entries_) v.zero_grad();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.size();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

inline Tensor truncated_normal_tensor(Shape shape, double stddev, CounterRng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.truncated_normal(stddev);
  return t;
}

enum class Init { kTruncatedNormal, kZero };

/// Affine layer y = x W + b with W stored [in x out].
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
         CounterRng& rng, Init init = Init::kTruncatedNormal, double stddev = 0.02)
      : weight_(store.add(name + ".weight",
                          init == Init::kZero ? Tensor({in, out})
                                              : truncated_normal_tensor({in, out}, stddev, rng))),
        bias_(store.add(name + ".bias", Tensor({out}))) {}

  Var operator()(const Var& x) const { return linear(x, weight_, bias_); }

  std::size_t in_features() const { return weight_.value().dim(0); }
  std::size_t out_features() const { return weight_.value().dim(1); }
  const Var& weight() const { return weight_; }
  const Var& bias() const { return bias_; }

 private:
  Var weight_;
  Var bias_;
};

/// Two linear layers with a GELU between them.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, std::size_t in, std::size_t hidden,
      std::size_t out, CounterRng& rng, Init last_init = Init::kTruncatedNormal)
      : fc1_(store, name + ".fc1", in, hidden, rng),
        fc2_(store, name + ".fc2", hidden, out, rng, last_init) {}

  Var operator()(const Var& x) const { return fc2_(gelu(fc1_(x))); }

 private:
  Linear fc1_;
  Linear fc2_;
};

/// Projected multi-head attention. Queries come from `x`, keys and values
/// from `context`.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, std::size_t dim,
                     std::size_t heads, CounterRng& rng)
      : heads_(heads),
        q_(store, name + ".q", dim, dim, rng),
        k_(store, name + ".k", dim, dim, rng),
        v_(store, name + ".v", dim, dim, rng),
        o_(store, name + ".o", dim, dim, rng) {
    if (heads == 0 || dim % heads != 0) {
      throw ConfigError("head count " + std::to_string(heads) + " does not divide width " +
                        std::to_string(dim));
    }
  }

  Var operator()(const Var& x, const Var& context, AttentionLayout layout,
                 const std::vector<std::uint8_t>& key_mask = {}) const {
    Var attended = scaled_dot_attention(q_(x), k_(context), v_(context), heads_, layout, key_mask);
    return o_(attended);
  }

 private:
  std::size_t heads_ = 1;
  Linear q_;
  Linear k_;
  Linear v_;
  Linear o_;
};

}  // namespace tddm::numerics
