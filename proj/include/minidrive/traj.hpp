#pragma once

// Ego-frame trajectory: kHorizon waypoints at the prediction rate.

#include <array>
#include <cmath>
#include <vector>

#include "minidrive/geometry.hpp"
#include "minidrive/world.hpp"

namespace minidrive {

struct Trajectory {
    std::array<Vec2, kHorizon> wp{};  // ego frame, 0.5 s apart

    static Trajectory zeros() { return {}; }
};

inline std::vector<Vec2> to_world(const Trajectory& t, const EgoState& ego) {
    std::vector<Vec2> out(kHorizon);
    for (int i = 0; i < kHorizon; ++i) out[static_cast<std::size_t>(i)] = from_frame(t.wp[static_cast<std::size_t>(i)], ego.pos, ego.heading);
    return out;
}

// Kinematic feasibility per the dataset contract: continuity with the current
// pose and per-step spacing within the speed bound.
inline bool trajectory_feasible(const Trajectory& t) {
    const double step_max = kVMax * kPredDt + 1e-9;
    if (t.wp[0].norm() > 3.0) return false;
    for (int i = 1; i < kHorizon; ++i)
        if ((t.wp[static_cast<std::size_t>(i)] - t.wp[static_cast<std::size_t>(i - 1)]).norm() > step_max) return false;
    for (const Vec2& p : t.wp)
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) return false;
    return true;
}

}  // namespace minidrive
