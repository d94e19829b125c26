#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/tensor.hpp"

namespace tddm::numerics {

/// One value on the reverse-mode tape. `backward` reads `grad` and
/// accumulates into the parents' gradients.
struct Node {
  Tensor value;
  Tensor grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  bool requires_grad = false;

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

/// Disables tape recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Handle to a tape node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value) { return Var(std::move(value), false); }
  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  const std::shared_ptr<Node>& node() const { return node_; }

  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.storage().begin(), node_->grad.storage().end(), 0.0);
  }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_result(Tensor value, std::initializer_list<Var> parents,
                       std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const Var& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Var& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

inline Var make_result(Tensor value, const std::vector<Var>& parents,
                       std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const Var& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Var& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var(std::move(node));
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}
inline MutMap as_matrix(Tensor& t) {
  return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

inline Shape with_last(Shape shape, std::size_t last) {
  shape.back() = last;
  return shape;
}

template <class F, class DF>
Var unary(const Var& x, F f, DF df) {
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result(std::move(out), {x}, [df](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * df(p->value[i], self.value[i]);
    }
  });
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Parameter gradients accumulate
/// across calls until zeroed.
inline void backward(const Var& loss) {
  if (loss.value().size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product. `a` may carry leading batch dimensions; they are flattened
/// into rows.
inline Var matmul(const Var& a, const Var& b) {
  if (b.value().rank() != 2 || a.cols() != b.value().dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Tensor out(detail::with_last(a.shape(), b.cols()));
  detail::as_matrix(out).noalias() = detail::as_matrix(a.value()) * detail::as_matrix(b.value());
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    auto g = detail::as_matrix(self.grad);
    if (pa->requires_grad) {
      detail::as_matrix(pa->grad_buffer()).noalias() +=
          g * detail::as_matrix(pb->value).transpose();
    }
    if (pb->requires_grad) {
      detail::as_matrix(pb->grad_buffer()).noalias() +=
          detail::as_matrix(pa->value).transpose() * g;
    }
  });
}

/// x * weight + bias, with weight stored [in x out].
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
  if (weight.value().rank() != 2 || x.cols() != weight.value().dim(0)) {
    throw DimensionError("linear: input width " + std::to_string(x.cols()) +
                         " does not match weight " + shape_str(weight.shape()));
  }
  if (bias.size() != weight.cols()) throw DimensionError("linear: bias width mismatch");
  Tensor out(detail::with_last(x.shape(), weight.cols()));
  auto om = detail::as_matrix(out);
  om.noalias() = detail::as_matrix(x.value()) * detail::as_matrix(weight.value());
  const Eigen::Map<const Eigen::RowVectorXd> bv(bias.value().data(),
                                                static_cast<Eigen::Index>(bias.size()));
  om.rowwise() += bv;
  return detail::make_result(std::move(out), {x, weight, bias}, [](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    auto& pb = self.parents[2];
    auto g = detail::as_matrix(self.grad);
    if (px->requires_grad) {
      detail::as_matrix(px->grad_buffer()).noalias() +=
          g * detail::as_matrix(pw->value).transpose();
    }
    if (pw->requires_grad) {
      detail::as_matrix(pw->grad_buffer()).noalias() +=
          detail::as_matrix(px->value).transpose() * g;
    }
    if (pb->requires_grad) {
      Tensor& gb = pb->grad_buffer();
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(gb.size())) +=
          g.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      Tensor& g = self.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      Tensor& g = self.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return detail::make_result(std::move(out), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) {
      Tensor& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      Tensor& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

inline Var scale(const Var& x, double s) {
  return detail::unary(
      x, [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var add_scalar(const Var& x, double c) {
  return detail::unary(
      x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

inline Var abs(const Var& x) {
  return detail::unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var silu(const Var& x) {
  return detail::unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

/// Exact (erf) GELU.
inline Var gelu(const Var& x) {
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

/// Adds a vector of width cols() to every row.
inline Var add_rowvec(const Var& x, const Var& v) {
  if (v.size() != x.cols()) throw DimensionError("add_rowvec: width mismatch");
  Tensor out = x.value();
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += v.value()[i % c];
  return detail::make_result(std::move(out), {x, v}, [c](Node& self) {
    auto& px = self.parents[0];
    auto& pv = self.parents[1];
    if (px->requires_grad) {
      Tensor& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pv->requires_grad) {
      Tensor& g = pv->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i];
    }
  });
}

/// Multiplies every row elementwise by a vector of width cols().
inline Var mul_rowvec(const Var& x, const Var& v) {
  if (v.size() != x.cols()) throw DimensionError("mul_rowvec: width mismatch");
  Tensor out = x.value();
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= v.value()[i % c];
  return detail::make_result(std::move(out), {x, v}, [c](Node& self) {
    auto& px = self.parents[0];
    auto& pv = self.parents[1];
    if (px->requires_grad) {
      Tensor& g = px->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pv->value[i % c];
    }
    if (pv->requires_grad) {
      Tensor& g = pv->grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i % c] += self.grad[i] * px->value[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization

/// Per-row standardization over the last dimension; no affine parameters.
inline Var layer_norm(const Var& x, double eps = 1e-5) {
  const std::size_t r = x.rows();
  const std::size_t c = x.cols();
  Tensor out(x.shape());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    auto row = x.value().row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) = (row[j] - mean) * inv_std[i];
  }
  return detail::make_result(std::move(out), {x}, [inv_std = std::move(inv_std)](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& gx = p->grad_buffer();
    const std::size_t c = self.value.cols();
    for (std::size_t i = 0; i < self.value.rows(); ++i) {
      double mean_g = 0.0;
      double mean_gy = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        mean_g += self.grad.at(i, j);
        mean_gy += self.grad.at(i, j) * self.value.at(i, j);
      }
      mean_g /= static_cast<double>(c);
      mean_gy /= static_cast<double>(c);
      for (std::size_t j = 0; j < c; ++j) {
        gx.at(i, j) += inv_std[i] * (self.grad.at(i, j) - mean_g - self.value.at(i, j) * mean_gy);
      }
    }
  });
}

/// Row-wise softmax over the last dimension.
inline Var softmax(const Var& x) {
  Tensor out(x.shape());
  const std::size_t c = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.value().row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (out.at(i, j) = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= z;
  }
  return detail::make_result(std::move(out), {x}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& gx = p->grad_buffer();
    const std::size_t c = self.value.cols();
    for (std::size_t i = 0; i < self.value.rows(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
      for (std::size_t j = 0; j < c; ++j) {
        gx.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and structure

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return detail::make_result(Tensor::scalar(s), {x}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

inline Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return detail::make_result(std::move(out), {x}, [](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Columns [begin, end) of every row.
inline Var slice_cols(const Var& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.cols()) throw DimensionError("slice_cols: bad range");
  const std::size_t w = end - begin;
  Tensor out(detail::with_last(x.shape(), w));
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < w; ++j) out.at(i, j) = x.value().at(i, begin + j);
  }
  return detail::make_result(std::move(out), {x}, [begin, w](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t i = 0; i < self.grad.rows(); ++i) {
      for (std::size_t j = 0; j < w; ++j) g.at(i, begin + j) += self.grad.at(i, j);
    }
  });
}

/// Concatenates along the last dimension. All parts share rows().
inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw DimensionError("concat_cols: row count mismatch");
    total += p.cols();
  }
  Tensor out(detail::with_last(parts[0].shape(), total));
  std::size_t offset = 0;
  for (const Var& p : parts) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, offset + j) = p.value().at(i, j);
    }
    offset += p.cols();
  }
  return detail::make_result(std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      const std::size_t w = p->value.cols();
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.rows(); ++i) {
          for (std::size_t j = 0; j < w; ++j) g.at(i, j) += self.grad.at(i, offset + j);
        }
      }
      offset += w;
    }
  });
}

/// Stacks parts vertically into a [total_rows x cols] matrix.
inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t c = parts[0].cols();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw DimensionError("concat_rows: column count mismatch");
    total += p.rows();
  }
  Tensor out({total, c});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(),
              out.storage().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.size();
  }
  return detail::make_result(std::move(out), parts, [](Node& self) {
    std::size_t offset = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        Tensor& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p->value.size();
    }
  });
}

/// Rows [begin, end) as a [end-begin x cols] matrix.
inline Var slice_rows(const Var& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.rows()) throw DimensionError("slice_rows: bad range");
  const std::size_t c = x.cols();
  Tensor out({end - begin, c});
  std::copy(x.value().data() + begin * c, x.value().data() + end * c, out.data());
  return detail::make_result(std::move(out), {x}, [begin, c](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * c + i] += self.grad[i];
  });
}

/// Selects rows by index; repeated indices are allowed.
inline Var gather_rows(const Var& x, std::vector<std::size_t> indices) {
  const std::size_t c = x.cols();
  if (indices.empty()) throw DimensionError("gather_rows: empty index list");
  Tensor out({indices.size(), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= x.rows()) throw DimensionError("gather_rows: index out of range");
    std::copy_n(x.value().data() + indices[i] * c, c, out.data() + i * c);
  }
  return detail::make_result(std::move(out), {x}, [indices = std::move(indices), c](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t i = 0; i < indices.size(); ++i) {
      for (std::size_t j = 0; j < c; ++j) g[indices[i] * c + j] += self.grad[i * c + j];
    }
  });
}

/// Max over consecutive blocks of `group` rows, skipping rows whose mask is 0.
/// A block with no valid rows yields zeros.
inline Var max_pool_rows(const Var& x, std::size_t group, const std::vector<std::uint8_t>& row_mask = {}) {
  if (group == 0 || x.rows() % group != 0) throw DimensionError("max_pool_rows: bad group size");
  if (!row_mask.empty() && row_mask.size() != x.rows()) {
    throw DimensionError("max_pool_rows: mask length mismatch");
  }
  const std::size_t blocks = x.rows() / group;
  const std::size_t c = x.cols();
  Tensor out({blocks, c});
  std::vector<long> argmax(blocks * c, -1);
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t r = b * group; r < (b + 1) * group; ++r) {
      if (!row_mask.empty() && !row_mask[r]) continue;
      for (std::size_t j = 0; j < c; ++j) {
        long& best = argmax[b * c + j];
        if (best < 0 || x.value().at(r, j) > x.value().at(static_cast<std::size_t>(best), j)) {
          best = static_cast<long>(r);
        }
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      const long best = argmax[b * c + j];
      out.at(b, j) = best < 0 ? 0.0 : x.value().at(static_cast<std::size_t>(best), j);
    }
  }
  return detail::make_result(std::move(out), {x}, [argmax = std::move(argmax), c](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t k = 0; k < argmax.size(); ++k) {
      if (argmax[k] >= 0) g.at(static_cast<std::size_t>(argmax[k]), k % c) += self.grad[k];
    }
  });
}

/// Mean over consecutive blocks of `group` rows.
inline Var mean_pool_rows(const Var& x, std::size_t group) {
  if (group == 0 || x.rows() % group != 0) throw DimensionError("mean_pool_rows: bad group size");
  const std::size_t blocks = x.rows() / group;
  const std::size_t c = x.cols();
  const double inv = 1.0 / static_cast<double>(group);
  Tensor out({blocks, c});
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) out.at(r / group, j) += x.value().at(r, j) * inv;
  }
  return detail::make_result(std::move(out), {x}, [group, c, inv](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t j = 0; j < c; ++j) g.at(r, j) += self.grad.at(r / group, j) * inv;
    }
  });
}

/// Sum of binary cross-entropies between sigmoid(logits) and targets.
inline Var bce_with_logits(const Var& logits, const Tensor& targets) {
  require_same_shape(logits.value(), targets, "bce_with_logits");
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double z = logits.value()[i];
    const double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
    total += softplus - targets[i] * z;
  }
  return detail::make_result(Tensor::scalar(total), {logits}, [targets](Node& self) {
    auto& p = self.parents[0];
    if (!p->requires_grad) return;
    Tensor& g = p->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-p->value[i]));
      g[i] += self.grad[0] * (s - targets[i]);
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Partition of queries and keys into independent attention blocks: block b
/// attends from query rows [b*q_rows, (b+1)*q_rows) to key rows
/// [b*k_rows, (b+1)*k_rows).
struct AttentionLayout {
  std::size_t blocks = 1;
  std::size_t q_rows = 0;
  std::size_t k_rows = 0;
};

/// Multi-head scaled dot-product attention on already-projected q, k, v.
/// Keys with mask 0 are excluded; a block with no valid keys outputs zeros.
inline Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, std::size_t heads,
                                AttentionLayout layout, const std::vector<std::uint8_t>& key_mask = {}) {
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("attention: head count " + std::to_string(heads) +
                      " does not divide model width " + std::to_string(d));
  }
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: q/k/v widths disagree");
  }
  if (layout.q_rows == 0) layout.q_rows = q.rows() / layout.blocks;
  if (layout.k_rows == 0) layout.k_rows = k.rows() / layout.blocks;
  if (layout.blocks * layout.q_rows != q.rows() || layout.blocks * layout.k_rows != k.rows()) {
    throw DimensionError("attention: layout does not tile q/k rows");
  }
  if (!key_mask.empty() && key_mask.size() != k.rows()) {
    throw DimensionError("attention: key mask length mismatch");
  }

  const std::size_t dh = d / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t qb = layout.q_rows;
  const std::size_t kb = layout.k_rows;
  Tensor out({q.rows(), d});
  // probs[((b*heads + h)*qb + i)*kb + j]
  std::vector<double> probs(layout.blocks * heads * qb * kb, 0.0);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();

  for (std::size_t b = 0; b < layout.blocks; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < qb; ++i) {
        const std::size_t qi = b * qb + i;
        double* p = probs.data() + ((b * heads + h) * qb + i) * kb;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < kb; ++j) {
          const std::size_t kj = b * kb + j;
          if (!key_mask.empty() && !key_mask[kj]) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qv.at(qi, c0 + c) * kv.at(kj, c0 + c);
          p[j] = s * scale_factor;
          mx = std::max(mx, p[j]);
        }
        if (mx == -INFINITY) continue;
        double z = 0.0;
        for (std::size_t j = 0; j < kb; ++j) {
          const std::size_t kj = b * kb + j;
          if (!key_mask.empty() && !key_mask[kj]) {
            p[j] = 0.0;
            continue;
          }
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        for (std::size_t j = 0; j < kb; ++j) p[j] /= z;
        for (std::size_t j = 0; j < kb; ++j) {
          if (p[j] == 0.0) continue;
          const std::size_t kj = b * kb + j;
          for (std::size_t c = 0; c < dh; ++c) out.at(qi, c0 + c) += p[j] * vv.at(kj, c0 + c);
        }
      }
    }
  }

  return detail::make_result(
      std::move(out), {q, k, v},
      [probs = std::move(probs), layout, heads, dh, scale_factor](Node& self) {
        auto& pq = self.parents[0];
        auto& pk = self.parents[1];
        auto& pv = self.parents[2];
        const std::size_t qb = layout.q_rows;
        const std::size_t kb = layout.k_rows;
        Tensor* gq = pq->requires_grad ? &pq->grad_buffer() : nullptr;
        Tensor* gk = pk->requires_grad ? &pk->grad_buffer() : nullptr;
        Tensor* gv = pv->requires_grad ? &pv->grad_buffer() : nullptr;
        std::vector<double> dp(kb);
        for (std::size_t b = 0; b < layout.blocks; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < qb; ++i) {
              const std::size_t qi = b * qb + i;
              const double* p = probs.data() + ((b * heads + h) * qb + i) * kb;
              double dot = 0.0;
              for (std::size_t j = 0; j < kb; ++j) {
                const std::size_t kj = b * kb + j;
                double s = 0.0;
                if (p[j] != 0.0) {
                  for (std::size_t c = 0; c < dh; ++c) {
                    s += self.grad.at(qi, c0 + c) * pv->value.at(kj, c0 + c);
                  }
                }
                dp[j] = s;
                dot += p[j] * s;
                if (gv && p[j] != 0.0) {
                  for (std::size_t c = 0; c < dh; ++c) {
                    gv->at(kj, c0 + c) += p[j] * self.grad.at(qi, c0 + c);
                  }
                }
              }
              for (std::size_t j = 0; j < kb; ++j) {
                if (p[j] == 0.0) continue;
                const std::size_t kj = b * kb + j;
                const double ds = p[j] * (dp[j] - dot) * scale_factor;
                for (std::size_t c = 0; c < dh; ++c) {
                  if (gq) gq->at(qi, c0 + c) += ds * pk->value.at(kj, c0 + c);
                  if (gk) gk->at(kj, c0 + c) += ds * pq->value.at(qi, c0 + c);
                }
              }
            }
          }
        }
      });
}

}  // namespace tddm::numerics
