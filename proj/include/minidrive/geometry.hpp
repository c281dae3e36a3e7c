#pragma once

// Plain 2D geometry used by the simulator and losses: vectors, oriented
// boxes with SAT overlap, and arclength-parametrized polylines.

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace minidrive {

struct Vec2 {
    double x = 0.0, y = 0.0;

    Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(Vec2 o) const { return x * o.x + y * o.y; }
    double cross(Vec2 o) const { return x * o.y - y * o.x; }
    double norm() const { return std::hypot(x, y); }
};

inline Vec2 heading_vec(double heading) { return {std::cos(heading), std::sin(heading)}; }

// Rotate into a frame whose +x axis points along `heading`.
inline Vec2 to_frame(Vec2 p, Vec2 origin, double heading) {
    Vec2 d = p - origin;
    double c = std::cos(heading), s = std::sin(heading);
    return {c * d.x + s * d.y, -s * d.x + c * d.y};
}

inline Vec2 from_frame(Vec2 local, Vec2 origin, double heading) {
    double c = std::cos(heading), s = std::sin(heading);
    return {origin.x + c * local.x - s * local.y, origin.y + s * local.x + c * local.y};
}

struct OBB {
    Vec2 center;
    double heading = 0.0;
    double half_len = 0.0;  // along heading
    double half_wid = 0.0;

    std::array<Vec2, 4> corners() const {
        Vec2 u = heading_vec(heading);
        Vec2 v{-u.y, u.x};
        Vec2 a = u * half_len, b = v * half_wid;
        return {center + a + b, center + a - b, center - a - b, center - a + b};
    }
};

// Separating-axis test for two oriented boxes (touching counts as overlap).
inline bool obb_overlap(const OBB& p, const OBB& q) {
    const Vec2 axes[4] = {heading_vec(p.heading),
                          {-std::sin(p.heading), std::cos(p.heading)},
                          heading_vec(q.heading),
                          {-std::sin(q.heading), std::cos(q.heading)}};
    auto pc = p.corners(), qc = q.corners();
    for (const Vec2& ax : axes) {
        double pmin = 1e300, pmax = -1e300, qmin = 1e300, qmax = -1e300;
        for (const Vec2& c : pc) {
            double t = c.dot(ax);
            pmin = std::min(pmin, t);
            pmax = std::max(pmax, t);
        }
        for (const Vec2& c : qc) {
            double t = c.dot(ax);
            qmin = std::min(qmin, t);
            qmax = std::max(qmax, t);
        }
        if (pmax < qmin || qmax < pmin) return false;
    }
    return true;
}

// Piecewise-linear curve with cached cumulative arclengths.
class Polyline {
public:
    Polyline() = default;
    explicit Polyline(std::vector<Vec2> pts) : pts_(std::move(pts)) {
        if (pts_.size() < 2) throw std::invalid_argument("polyline: need at least 2 points");
        cum_.resize(pts_.size(), 0.0);
        for (std::size_t i = 1; i < pts_.size(); ++i)
            cum_[i] = cum_[i - 1] + (pts_[i] - pts_[i - 1]).norm();
    }

    const std::vector<Vec2>& points() const { return pts_; }
    double length() const { return cum_.back(); }

    Vec2 point_at(double s) const {
        s = std::clamp(s, 0.0, length());
        std::size_t i = segment_index(s);
        double t = (s - cum_[i]) / (cum_[i + 1] - cum_[i]);
        return pts_[i] + (pts_[i + 1] - pts_[i]) * t;
    }

    Vec2 tangent_at(double s) const {
        s = std::clamp(s, 0.0, length());
        std::size_t i = segment_index(s);
        Vec2 d = pts_[i + 1] - pts_[i];
        double n = d.norm();
        return {d.x / n, d.y / n};
    }

    // Arclength of the closest point on the curve to p.
    double project(Vec2 p) const {
        double best_s = 0.0, best_d = 1e300;
        for (std::size_t i = 0; i + 1 < pts_.size(); ++i) {
            Vec2 a = pts_[i], d = pts_[i + 1] - a;
            double len2 = d.dot(d);
            double t = len2 > 0.0 ? std::clamp((p - a).dot(d) / len2, 0.0, 1.0) : 0.0;
            Vec2 q = a + d * t;
            double dist = (p - q).norm();
            if (dist < best_d) {
                best_d = dist;
                best_s = cum_[i] + t * std::sqrt(len2);
            }
        }
        return best_s;
    }

    double distance_to(Vec2 p) const { return (p - point_at(project(p))).norm(); }

    // Signed lateral offset: positive to the left of travel direction.
    double signed_offset(Vec2 p) const {
        double s = project(p);
        Vec2 q = point_at(s), t = tangent_at(s);
        return t.cross(p - q);
    }

private:
    std::size_t segment_index(double s) const {
        std::size_t i = static_cast<std::size_t>(std::upper_bound(cum_.begin(), cum_.end(), s) - cum_.begin());
        if (i > 0) --i;
        return std::min(i, pts_.size() - 2);
    }

    std::vector<Vec2> pts_;
    std::vector<double> cum_;
};

}  // namespace minidrive
