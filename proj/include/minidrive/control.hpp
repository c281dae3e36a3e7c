#pragma once

// Trajectory tracker bridging 2 Hz plans to 10 Hz controls: pure-pursuit
// steering plus proportional speed control against the plan's implied pace.

#include <algorithm>
#include <cmath>
#include <vector>

#include "minidrive/geometry.hpp"
#include "minidrive/world.hpp"

namespace minidrive {

inline Control track_trajectory(const SceneState& w, const std::vector<Vec2>& world_wps) {
    const EgoState& ego = w.ego;

    // stop intent: the whole plan collapses onto the ego
    double spread = 0.0;
    for (const Vec2& p : world_wps) spread = std::max(spread, (p - ego.pos).norm());
    if (world_wps.empty() || spread < 0.05) return clamp_control({kAccelMin, 0.0});

    // de-duplicate consecutive points so the path polyline is well-formed
    std::vector<Vec2> pts;
    pts.push_back(ego.pos);
    for (const Vec2& p : world_wps)
        if ((p - pts.back()).norm() > 1e-6) pts.push_back(p);
    if (pts.size() < 2) return clamp_control({kAccelMin, 0.0});
    Polyline path(pts);

    double s_e = path.project(ego.pos);

    // pace implied by waypoint spacing at a slight lookahead; approaching the
    // end of the planned path means the plan wants us stopped there
    double probe = std::min(s_e + std::max(0.35, 0.25 * ego.speed), path.length() - 1e-6);
    double v_ref = 0.0;
    {
        double acc = (world_wps[0] - ego.pos).norm();
        std::vector<double> seg_end{acc};
        std::vector<double> seg_speed{acc / kPredDt};
        for (std::size_t i = 1; i < world_wps.size(); ++i) {
            double d = (world_wps[i] - world_wps[i - 1]).norm();
            seg_end.push_back(seg_end.back() + d);
            seg_speed.push_back(d / kPredDt);
        }
        // the stub from the ego to wp0 shrinks as the interval is consumed,
        // so its pace is stale; use the first planned spacing instead
        if (seg_speed.size() > 1) seg_speed[0] = seg_speed[1];
        v_ref = seg_speed.back();
        for (std::size_t i = 0; i < seg_end.size(); ++i)
            if (probe <= seg_end[i] + 1e-9) {
                v_ref = seg_speed[i];
                break;
            }
        double remaining = path.length() - s_e;
        v_ref = std::min(v_ref, std::max(0.0, remaining - 0.15) / kPredDt);
    }

    // pure pursuit
    double lookahead = std::clamp(0.8 + 0.55 * ego.speed, 1.8, 5.5);
    Vec2 target = path.point_at(std::min(s_e + lookahead, path.length()));
    Vec2 local = to_frame(target, ego.pos, ego.heading);
    double dist = local.norm();
    double steer = 0.0;
    if (dist > 1e-6 && local.x > -0.5) {
        double alpha = std::atan2(local.y, local.x);
        steer = std::atan2(2.0 * kWheelbase * std::sin(alpha), std::max(dist, 1.0));
    }

    double accel = v_ref < 0.15 ? kAccelMin : 2.2 * (v_ref - ego.speed);
    return clamp_control({accel, steer});
}

}  // namespace minidrive
