#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/numerics/rng.hpp"
#include "tddm/numerics/tensor.hpp"

namespace tddm::vocabulary {

using numerics::Tensor;

inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  return a <= -std::numbers::pi ? a + 2.0 * std::numbers::pi : a;
}

struct Waypoint {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
};

/// Ordered planner waypoints stored as a [horizon x 3] tensor of (x, y, heading).
class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(Tensor points) : points_(std::move(points)) {
    if (points_.rank() != 2 || points_.cols() != 3 || points_.rows() < 2) {
      throw DimensionError("trajectory must be [T x 3] with T >= 2, got " +
                           numerics::shape_str(points_.shape()));
    }
  }
  explicit Trajectory(const std::vector<Waypoint>& pts) : Trajectory(from_waypoints(pts)) {}

  std::size_t horizon() const { return points_.rows(); }
  Waypoint operator[](std::size_t i) const {
    return {points_.at(i, 0), points_.at(i, 1), points_.at(i, 2)};
  }
  void set(std::size_t i, const Waypoint& w) {
    points_.at(i, 0) = w.x;
    points_.at(i, 1) = w.y;
    points_.at(i, 2) = w.heading;
  }
  const Tensor& points() const { return points_; }
  Tensor& points() { return points_; }
  bool operator==(const Trajectory&) const = default;

 private:
  static Tensor from_waypoints(const std::vector<Waypoint>& pts) {
    Tensor t({pts.size(), 3});
    for (std::size_t i = 0; i < pts.size(); ++i) {
      t.at(i, 0) = pts[i].x;
      t.at(i, 1) = pts[i].y;
      t.at(i, 2) = pts[i].heading;
    }
    return t;
  }

  Tensor points_;
};

// ---------------------------------------------------------------------------
// Temporal segmentation

/// Segment layout for a horizon of T waypoints preceded by the current pose.
///
/// The sequence [pose, w_1, ..., w_T] has T + 1 points. Segment n covers
/// sequence indices [n L, (n + 1) L] inclusive, so consecutive segments share
/// one boundary waypoint and every segment holds L + 1 points.
struct SegmentLayout {
  std::size_t horizon = 80;
  std::size_t segments = 4;
  std::size_t groups = 2;

  static SegmentLayout make(std::size_t horizon, std::size_t segments, std::size_t groups) {
    SegmentLayout l{horizon, segments, groups};
    l.validate();
    return l;
  }

  void validate() const {
    if (segments == 0 || horizon % segments != 0) {
      throw ConfigError("segment count " + std::to_string(segments) + " must divide horizon " +
                        std::to_string(horizon));
    }
    if (groups == 0 || segments % groups != 0) {
      throw ConfigError("group count " + std::to_string(groups) + " must divide segment count " +
                        std::to_string(segments));
    }
  }

  std::size_t length() const { return horizon / segments; }
  std::size_t points_per_segment() const { return length() + 1; }
  std::size_t segments_per_group() const { return segments / groups; }
  std::size_t group_of(std::size_t segment) const { return segment * groups / segments; }
  std::size_t first_segment(std::size_t group) const { return group * segments_per_group(); }
  std::size_t last_segment(std::size_t group) const { return first_segment(group + 1) - 1; }
  bool operator==(const SegmentLayout&) const = default;
};

/// Segments stored as [segments x (L+1) x 3].
struct SegmentedTrajectory {
  SegmentLayout layout;
  Tensor segments;

  std::size_t group_of(std::size_t n) const { return layout.group_of(n); }
  Waypoint point(std::size_t segment, std::size_t k) const {
    const std::size_t base = (segment * layout.points_per_segment() + k) * 3;
    return {segments[base], segments[base + 1], segments[base + 2]};
  }
  Waypoint start(std::size_t segment) const { return point(segment, 0); }
  Waypoint end(std::size_t segment) const { return point(segment, layout.length()); }
};

inline SegmentedTrajectory tokenize(const Trajectory& traj, const SegmentLayout& layout,
                                    const Waypoint& pose = {}) {
  layout.validate();
  if (traj.horizon() != layout.horizon) {
    throw DimensionError("trajectory horizon " + std::to_string(traj.horizon()) +
                         " does not match layout horizon " + std::to_string(layout.horizon));
  }
  const std::size_t len = layout.length();
  const std::size_t pts = layout.points_per_segment();
  SegmentedTrajectory out{layout, Tensor({layout.segments, pts, 3})};
  for (std::size_t n = 0; n < layout.segments; ++n) {
    for (std::size_t k = 0; k < pts; ++k) {
      const std::size_t seq = n * len + k;
      const Waypoint w = seq == 0 ? pose : traj[seq - 1];
      const std::size_t base = (n * pts + k) * 3;
      out.segments[base] = w.x;
      out.segments[base + 1] = w.y;
      out.segments[base + 2] = w.heading;
    }
  }
  return out;
}

inline SegmentedTrajectory tokenize(const Trajectory& traj, std::size_t segments, std::size_t groups,
                                    const Waypoint& pose = {}) {
  return tokenize(traj, SegmentLayout::make(traj.horizon(), segments, groups), pose);
}

/// Inverse of tokenize: drops the leading pose and averages each shared
/// boundary waypoint over the two segments that predict it.
inline Trajectory stitch(const SegmentedTrajectory& seg) {
  const SegmentLayout& l = seg.layout;
  l.validate();
  if (seg.segments.size() != l.segments * l.points_per_segment() * 3) {
    throw DimensionError("segment tensor does not match its layout");
  }
  const std::size_t len = l.length();
  Tensor pts({l.horizon, 3});
  for (std::size_t seq = 1; seq <= l.horizon; ++seq) {
    const std::size_t n = (seq - 1) / len;  // segment that owns seq as an interior or end point
    const std::size_t k = seq - n * len;
    Waypoint w = seg.point(n, k);
    if (k == len && n + 1 < l.segments) {
      const Waypoint next = seg.point(n + 1, 0);
      w = {0.5 * (w.x + next.x), 0.5 * (w.y + next.y), 0.5 * (w.heading + next.heading)};
    }
    pts.at(seq - 1, 0) = w.x;
    pts.at(seq - 1, 1) = w.y;
    pts.at(seq - 1, 2) = w.heading;
  }
  return Trajectory(std::move(pts));
}

// ---------------------------------------------------------------------------
// Anchor vocabulary

struct AnchorVocabulary {
  std::vector<Trajectory> anchors;

  std::size_t size() const { return anchors.size(); }
  std::size_t horizon() const { return anchors.empty() ? 0 : anchors.front().horizon(); }
};

struct KMeansOptions {
  std::size_t max_iterations = 100;
  // Cluster on (x, y) only; centroids still average all three channels.
  bool positions_only = false;
};

struct KMeansReport {
  std::vector<double> objective;  // after each Lloyd iteration
  std::size_t iterations = 0;
  bool converged = false;
  std::vector<std::size_t> assignment;
};

namespace detail {
inline double feature_distance_sq(const Tensor& a, const Tensor& b, bool positions_only) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (positions_only && i % 3 == 2) continue;
    const double e = a[i] - b[i];
    d += e * e;
  }
  return d;
}
}  // namespace detail

/// Lloyd's k-means with k-means++ seeding over flattened trajectories.
/// Empty clusters are reseeded to the point farthest from its centroid.
inline AnchorVocabulary build_vocabulary(const std::vector<Trajectory>& corpus, std::size_t count,
                                         std::uint64_t seed, const KMeansOptions& options = {},
                                         KMeansReport* report = nullptr) {
  if (count == 0) throw ConfigError("vocabulary size must be >= 1");
  if (corpus.size() < count) {
    throw ConfigError("corpus of " + std::to_string(corpus.size()) +
                      " trajectories is smaller than vocabulary size " + std::to_string(count));
  }
  const std::size_t horizon = corpus.front().horizon();
  for (const auto& t : corpus) {
    if (t.horizon() != horizon) throw DimensionError("corpus trajectories differ in horizon");
  }
  const bool pos_only = options.positions_only;
  auto dist = [&](const Tensor& a, const Tensor& b) {
    return detail::feature_distance_sq(a, b, pos_only);
  };

  numerics::CounterRng rng = numerics::CounterRng(seed).derive(0x6b6d65616e73ULL);
  std::vector<Tensor> centroids;
  centroids.push_back(corpus[rng.below(corpus.size())].points());
  std::vector<double> nearest(corpus.size(), std::numeric_limits<double>::infinity());
  while (centroids.size() < count) {
    double total = 0.0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      nearest[i] = std::min(nearest[i], dist(corpus[i].points(), centroids.back()));
      total += nearest[i];
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (pick = 0; pick + 1 < corpus.size(); ++pick) {
        target -= nearest[pick];
        if (target < 0.0 && nearest[pick] > 0.0) break;
      }
    } else {
      pick = rng.below(corpus.size());
    }
    centroids.push_back(corpus[pick].points());
  }

  KMeansReport local;
  KMeansReport& rep = report ? *report : local;
  rep = {};
  std::vector<std::size_t> assign(corpus.size(), count);
  for (std::size_t iter = 0; iter < options.max_iterations; ++iter) {
    bool changed = false;
    std::vector<double> dist_to_own(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < count; ++k) {
        const double d = dist(corpus[i].points(), centroids[k]);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      changed = changed || assign[i] != best;
      assign[i] = best;
      dist_to_own[i] = best_d;
    }

    std::vector<std::size_t> members(count, 0);
    for (std::size_t a : assign) ++members[a];
    for (std::size_t k = 0; k < count; ++k) {
      if (members[k] != 0) continue;
      std::size_t far = corpus.size();
      for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (members[assign[i]] > 1 && (far == corpus.size() || dist_to_own[i] > dist_to_own[far])) {
          far = i;
        }
      }
      if (far == corpus.size()) break;
      --members[assign[far]];
      assign[far] = k;
      members[k] = 1;
      dist_to_own[far] = 0.0;
      changed = true;
    }

    for (std::size_t k = 0; k < count; ++k) centroids[k] = Tensor(centroids[k].shape());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      Tensor& c = centroids[assign[i]];
      for (std::size_t e = 0; e < c.size(); ++e) c[e] += corpus[i].points()[e];
    }
    for (std::size_t k = 0; k < count; ++k) {
      for (double& v : centroids[k].storage()) v /= static_cast<double>(members[k]);
    }

    double objective = 0.0;
    for (std::size_t i = 0; i < corpus.size(); ++i) objective += dist(corpus[i].points(), centroids[assign[i]]);
    rep.objective.push_back(objective);
    rep.iterations = iter + 1;
    if (!changed) {
      rep.converged = true;
      break;
    }
  }
  rep.assignment = assign;

  AnchorVocabulary vocab;
  for (auto& c : centroids) vocab.anchors.emplace_back(std::move(c));
  return vocab;
}

struct LabelAssignment {
  std::size_t index = 0;
  Tensor one_hot;
};

/// Positive anchor = nearest in flattened L2; ties go to the lowest index.
inline LabelAssignment assign_label(const Trajectory& gt, const AnchorVocabulary& vocab) {
  if (vocab.size() == 0) throw ContractError("empty anchor vocabulary");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < vocab.size(); ++k) {
    numerics::require_same_shape(gt.points(), vocab.anchors[k].points(), "assign_label");
    const double d = detail::feature_distance_sq(gt.points(), vocab.anchors[k].points(), false);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  LabelAssignment label{best, Tensor({vocab.size()})};
  label.one_hot[best] = 1.0;
  return label;
}

// ---------------------------------------------------------------------------
// Anchor file: "<M> <T>" header, then M*T rows of "x y heading".

inline void save_anchors(const std::string& path, const AnchorVocabulary& vocab) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write anchor file: " + path);
  os << vocab.size() << ' ' << vocab.horizon() << '\n';
  char buf[96];
  for (const auto& a : vocab.anchors) {
    for (std::size_t i = 0; i < a.horizon(); ++i) {
      const Waypoint w = a[i];
      std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", w.x, w.y, w.heading);
      os << buf;
    }
  }
}

inline AnchorVocabulary load_anchors(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open anchor file: " + path);
  std::size_t m = 0, horizon = 0;
  if (!(is >> m >> horizon) || m == 0 || horizon < 2) throw ParseError("bad anchor file header", 0);
  AnchorVocabulary vocab;
  for (std::size_t k = 0; k < m; ++k) {
    Tensor pts({horizon, 3});
    for (double& v : pts.storage()) {
      if (!(is >> v)) throw ParseError("anchor file truncated in anchor " + std::to_string(k), static_cast<long>(k));
    }
    vocab.anchors.emplace_back(std::move(pts));
  }
  return vocab;
}

}  // namespace tddm::vocabulary
