#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "tddm/error.hpp"
#include "tddm/vocabulary.hpp"

namespace tddm::scene {

using vocabulary::Waypoint;
using vocabulary::wrap_angle;

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Rigid planar transform: p_out = R(theta) p + (tx, ty).
struct Rigid2 {
  double tx = 0.0;
  double ty = 0.0;
  double theta = 0.0;

  Point2 apply(Point2 p) const {
    const double c = std::cos(theta), s = std::sin(theta);
    return {c * p.x - s * p.y + tx, s * p.x + c * p.y + ty};
  }
  Point2 rotate(Point2 v) const {
    const double c = std::cos(theta), s = std::sin(theta);
    return {c * v.x - s * v.y, s * v.x + c * v.y};
  }
  Waypoint apply(const Waypoint& w) const {
    const Point2 p = apply(Point2{w.x, w.y});
    return {p.x, p.y, wrap_angle(w.heading + theta)};
  }

  /// Transform that maps `pose` to the origin with zero heading.
  static Rigid2 into_frame_of(const Waypoint& pose) {
    const double c = std::cos(pose.heading), s = std::sin(pose.heading);
    return {-(c * pose.x + s * pose.y), -(-s * pose.x + c * pose.y), -pose.heading};
  }
};

/// Densely sampled centerline with arc-length parameterization.
class Polyline {
 public:
  Polyline() = default;
  explicit Polyline(std::vector<Point2> pts) : pts_(std::move(pts)) {
    if (pts_.size() < 2) throw DimensionError("polyline needs at least two points");
    s_.assign(pts_.size(), 0.0);
    for (std::size_t i = 1; i < pts_.size(); ++i) {
      s_[i] = s_[i - 1] + std::hypot(pts_[i].x - pts_[i - 1].x, pts_[i].y - pts_[i - 1].y);
    }
    // Vertex headings from central differences, interpolated between vertices.
    h_.assign(pts_.size(), 0.0);
    for (std::size_t i = 0; i < pts_.size(); ++i) {
      const std::size_t a = i == 0 ? 0 : i - 1;
      const std::size_t b = i + 1 < pts_.size() ? i + 1 : i;
      h_[i] = std::atan2(pts_[b].y - pts_[a].y, pts_[b].x - pts_[a].x);
    }
  }

  const std::vector<Point2>& points() const { return pts_; }
  double length() const { return s_.back(); }

  /// Pose at arc length s; extrapolates linearly past either end.
  Waypoint pose_at(double s) const {
    std::size_t i = segment_index(s);
    const Point2 a = pts_[i], b = pts_[i + 1];
    const double seg = s_[i + 1] - s_[i];
    const double u = seg > 0.0 ? (s - s_[i]) / seg : 0.0;
    const double uh = std::clamp(u, 0.0, 1.0);
    return {a.x + u * (b.x - a.x), a.y + u * (b.y - a.y), wrap_angle(h_[i] + uh * wrap_angle(h_[i + 1] - h_[i]))};
  }

  /// Signed curvature from the heading change across neighbouring segments.
  double curvature_at(double s) const {
    const double ds = 1.0;
    const double h0 = pose_at(s - ds).heading;
    const double h1 = pose_at(s + ds).heading;
    return wrap_angle(h1 - h0) / (2.0 * ds);
  }

  struct Projection {
    double s = 0.0;
    double lateral = 0.0;  // positive to the left of travel direction
    double distance = 0.0;
  };

  Projection project(Point2 p) const {
    Projection best;
    best.distance = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < pts_.size(); ++i) {
      const Point2 a = pts_[i], b = pts_[i + 1];
      const double dx = b.x - a.x, dy = b.y - a.y;
      const double len2 = dx * dx + dy * dy;
      double u = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
      u = std::clamp(u, 0.0, 1.0);
      const double qx = a.x + u * dx, qy = a.y + u * dy;
      const double d = std::hypot(p.x - qx, p.y - qy);
      if (d < best.distance) {
        best.distance = d;
        best.s = s_[i] + u * (s_[i + 1] - s_[i]);
        const double cross = dx * (p.y - a.y) - dy * (p.x - a.x);
        best.lateral = cross >= 0.0 ? d : -d;
      }
    }
    return best;
  }

  /// Polyline shifted by `offset` to the left of travel direction.
  Polyline offset(double offset) const {
    std::vector<Point2> out;
    out.reserve(pts_.size());
    for (std::size_t i = 0; i < pts_.size(); ++i) {
      const std::size_t a = i == 0 ? 0 : i - 1;
      const std::size_t b = i + 1 < pts_.size() ? i + 1 : i;
      const double h = std::atan2(pts_[b].y - pts_[a].y, pts_[b].x - pts_[a].x);
      out.push_back({pts_[i].x - offset * std::sin(h), pts_[i].y + offset * std::cos(h)});
    }
    return Polyline(std::move(out));
  }

  Polyline reversed() const {
    std::vector<Point2> r(pts_.rbegin(), pts_.rend());
    return Polyline(std::move(r));
  }

 private:
  std::size_t segment_index(double s) const {
    if (s <= s_.front()) return 0;
    if (s >= s_.back()) return pts_.size() - 2;
    const auto it = std::upper_bound(s_.begin(), s_.end(), s);
    return static_cast<std::size_t>(std::distance(s_.begin(), it)) - 1;
  }

  std::vector<Point2> pts_;
  std::vector<double> s_;
  std::vector<double> h_;
};

/// Oriented rectangle: center, heading, full length and width.
struct OrientedBox {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double length = 0.0;
  double width = 0.0;

  std::array<Point2, 4> corners() const {
    const double c = std::cos(heading), s = std::sin(heading);
    const double hl = 0.5 * length, hw = 0.5 * width;
    return {Point2{x + c * hl - s * hw, y + s * hl + c * hw}, Point2{x - c * hl - s * hw, y - s * hl + c * hw},
            Point2{x - c * hl + s * hw, y - s * hl - c * hw}, Point2{x + c * hl + s * hw, y + s * hl - c * hw}};
  }
};

/// Separating-axis test for two oriented rectangles. Touching counts as overlap.
inline bool boxes_overlap(const OrientedBox& a, const OrientedBox& b) {
  const auto ca = a.corners();
  const auto cb = b.corners();
  const double axes[4][2] = {{std::cos(a.heading), std::sin(a.heading)},
                             {-std::sin(a.heading), std::cos(a.heading)},
                             {std::cos(b.heading), std::sin(b.heading)},
                             {-std::sin(b.heading), std::cos(b.heading)}};
  for (const auto& ax : axes) {
    double amin = INFINITY, amax = -INFINITY, bmin = INFINITY, bmax = -INFINITY;
    for (const Point2& p : ca) {
      const double d = p.x * ax[0] + p.y * ax[1];
      amin = std::min(amin, d);
      amax = std::max(amax, d);
    }
    for (const Point2& p : cb) {
      const double d = p.x * ax[0] + p.y * ax[1];
      bmin = std::min(bmin, d);
      bmax = std::max(bmax, d);
    }
    if (amax < bmin || bmax < amin) return false;
  }
  return true;
}

}  // namespace tddm::scene
