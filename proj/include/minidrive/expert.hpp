#pragma once

// Rule-based oracle expert with full world knowledge: time-headway
// longitudinal control, signal phase lookahead, and gap-acceptance lane
// changes. Stateless — every call re-derives its plan from the scene, so
// decisions naturally re-commit as the world evolves.

#include <algorithm>
#include <cmath>
#include <vector>

#include "minidrive/traj.hpp"
#include "minidrive/world.hpp"

namespace minidrive {

namespace expert_detail {

inline constexpr double kHeadwayT = 1.0;
inline constexpr double kMinGap = 7.0;
inline constexpr double kComfortBrake = 2.8;
inline constexpr double kPlanAccel = 2.2;
inline constexpr double kPlanBrake = 4.5;
inline constexpr double kLateralStep = 0.62;  // max lateral motion per 0.5 s
inline constexpr double kLaneTol = 1.9;       // same-lane lateral window

// Signal phase `ahead` seconds from now.
inline bool red_at(const Signal& sig, double ahead) {
    Signal s = sig;
    if (ahead > 0.0) s.advance(ahead);
    return s.red;
}

inline const Agent* lead_in_lane(const std::vector<Agent>& agents, double x, double y,
                                 double* gap_out) {
    const Agent* best = nullptr;
    double best_gap = 1e300;
    for (const Agent& a : agents) {
        if (std::fabs(a.pos.y - y) > kLaneTol) continue;
        double gap = a.pos.x - x - 0.5 * (a.length + kEgoLength);
        if (gap < -1.0 || gap >= best_gap) continue;
        best_gap = gap;
        best = &a;
    }
    if (best && gap_out) *gap_out = best_gap;
    return best;
}

}  // namespace expert_detail

inline Trajectory oracle_expert(const SceneState& w) {
    using namespace expert_detail;

    const std::vector<std::vector<Agent>> futures = agent_futures(w);
    auto agents_at = [&](int k) -> const std::vector<Agent>& {
        return k <= 0 ? w.agents : futures[static_cast<std::size_t>(std::min(k, kHorizon) - 1)];
    };

    std::vector<double> lane_ys;
    for (const Lane& l : w.lanes) lane_ys.push_back(l.center.points()[0].y);

    auto nearest_lane_y = [&](double y) {
        double best = lane_ys[0];
        for (double ly : lane_ys)
            if (std::fabs(ly - y) < std::fabs(best - y)) best = ly;
        return best;
    };

    const double x0 = w.ego.pos.x, y0 = w.ego.pos.y, v0 = w.ego.speed;
    const double current_y = nearest_lane_y(y0);

    // nominal lane from the route a little ahead
    double s_route = w.route.project(w.ego.pos);
    double route_y = w.route.point_at(std::min(s_route + 12.0, w.route.length())).y;
    double nominal_y = nearest_lane_y(route_y);

    // overtaking: slow obstruction in the nominal lane wants a detour
    double desired_y = nominal_y;
    {
        double gap = 0.0;
        const Agent* lead = lead_in_lane(w.agents, x0, nominal_y, &gap);
        if (lead && gap < 30.0 && lead->base_speed < 2.0 && !lead->is_static() && lane_ys.size() > 1) {
            for (double ly : lane_ys)
                if (std::fabs(ly - nominal_y) > 0.1) desired_y = ly;
        }
    }
    // if already off the nominal lane (mid-overtake), return only once the
    // nominal lane is clear around the ego
    if (std::fabs(current_y - nominal_y) > 0.1 && std::fabs(desired_y - current_y) > 0.1) {
        bool clear = true;
        for (int k = 0; k <= kHorizon; ++k)
            for (const Agent& a : agents_at(k))
                if (std::fabs(a.pos.y - desired_y) <= kLaneTol && a.pos.x > x0 - 6.0 &&
                    a.pos.x < x0 + 28.0)
                    clear = false;
        if (!clear) desired_y = current_y;
    }

    // gap acceptance for any lane change; a faster rear vehicle extends the
    // rear margin by its projected closing distance, which is what makes the
    // ego yield before merging in front of it
    double target_y = current_y;
    if (std::fabs(desired_y - current_y) > 0.1) {
        bool accepted = true;
        double ve = std::max(v0, 0.7 * kCruise);
        for (int k = 0; k <= kHorizon && accepted; ++k) {
            double xe = x0 + ve * kPredDt * k;
            for (const Agent& a : agents_at(k)) {
                if (std::fabs(a.pos.y - desired_y) > kLaneTol) continue;
                double d = a.pos.x - xe;
                double body = 0.5 * (a.length + kEgoLength);
                double need = d >= 0.0 ? 5.5 + 0.35 * ve
                                       : 5.5 + 0.35 * a.speed + 15.0 * std::max(0.0, a.speed - ve);
                if (std::fabs(d) < need + body) accepted = false;
            }
        }
        if (accepted) target_y = desired_y;
    } else {
        target_y = desired_y;
    }

    // red-signal stop decision: stop unless the light stays green through our
    // projected crossing (plus margin)
    bool plan_stop = false;
    double stop_x = 0.0;
    if (w.signal) {
        stop_x = w.signal->stop_x - 0.5 * kEgoLength - 1.2;
        double d = stop_x - x0;
        if (d > -0.5) {
            double t_arr = d / std::max(0.6 * kCruise, v0);
            plan_stop = red_at(*w.signal, t_arr) || red_at(*w.signal, t_arr + 1.2) ||
                        red_at(*w.signal, 0.0);
            // creep-off: once stopped at the line and green, go
            if (!w.signal->red && !red_at(*w.signal, t_arr + 1.2)) plan_stop = false;
        }
    }

    Trajectory out;
    double x = x0, y = y0, v = v0;
    for (int k = 0; k < kHorizon; ++k) {
        double v_des = kCruise;
        bool mid_change = std::fabs(y - target_y) > 0.3;

        // full time headway against leads near the target lane; a lead in the
        // band we are sweeping through (but leaving) only imposes a clearance
        // gap, otherwise the ego could never pull out from behind it
        for (const Agent& a : agents_at(k)) {
            bool in_target = std::fabs(a.pos.y - target_y) <= kLaneTol;
            bool in_band = std::fabs(a.pos.y - y) < 2.3;
            if (!in_target && !in_band) continue;
            double gap = a.pos.x - x - 0.5 * (a.length + kEgoLength);
            if (gap < -1.0) continue;
            double keep = in_target ? kMinGap : 2.5;
            v_des = std::min(v_des, std::max(0.0, (gap - keep) / kHeadwayT));
        }

        if (plan_stop) {
            double d = std::max(0.0, stop_x - x);
            v_des = std::min(v_des, std::sqrt(2.0 * kComfortBrake * d));
        } else if (mid_change) {
            v_des = std::max(v_des, 1.6);  // keep crawling through a committed change
        }

        double dv = std::clamp(v_des - v, -kPlanBrake * kPredDt, kPlanAccel * kPredDt);
        v = std::max(0.0, v + dv);
        double forward = v * kPredDt;
        x += forward;

        double lat_cap = mid_change ? kLateralStep : std::min(kLateralStep, 0.45 * forward + 0.02);
        y += std::clamp(target_y - y, -lat_cap, lat_cap);

        out.wp[static_cast<std::size_t>(k)] = to_frame({x, y}, w.ego.pos, w.ego.heading);
    }
    return out;
}

}  // namespace minidrive
