#pragma once

// The five ability scenarios, each templated on a straight two-lane road
// along +x (lane 0 center y=0, lane 1 center y=3.5). All randomness comes
// from the scenario seed; overrides rescale difficulty knobs.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "minidrive/rng.hpp"
#include "minidrive/world.hpp"

namespace minidrive {

enum class ScenarioKind : std::uint8_t {
    Merging = 0,
    Overtaking = 1,
    EmergencyBrake = 2,
    GiveWay = 3,
    TrafficSign = 4,
};
inline constexpr int kNumScenarioKinds = 5;

inline const char* scenario_name(ScenarioKind k) {
    switch (k) {
        case ScenarioKind::Merging: return "Merging";
        case ScenarioKind::Overtaking: return "Overtaking";
        case ScenarioKind::EmergencyBrake: return "EmergencyBrake";
        case ScenarioKind::GiveWay: return "GiveWay";
        case ScenarioKind::TrafficSign: return "TrafficSign";
    }
    return "?";
}

inline ScenarioKind scenario_from_name(const std::string& s) {
    for (int i = 0; i < kNumScenarioKinds; ++i)
        if (s == scenario_name(static_cast<ScenarioKind>(i))) return static_cast<ScenarioKind>(i);
    throw std::invalid_argument("unknown scenario kind: " + s);
}

struct ScenarioOverrides {
    double gap_scale = 1.0;      // traffic gap sizes
    double speed_scale = 1.0;    // non-ego speeds
    double trigger_scale = 1.0;  // event trigger times

    bool operator==(const ScenarioOverrides&) const = default;
};

struct ScenarioSpec {
    ScenarioKind kind = ScenarioKind::Merging;
    std::uint64_t seed = 0;
    ScenarioOverrides overrides;
};

inline constexpr double kLaneWidth = 3.5;
inline constexpr double kLane1Y = 3.5;

namespace detail {

// Route following lane 0, optionally blending to lane 1 over [x0, x0+len].
inline Polyline make_route(double route_len, double change_x0 = -1.0, double change_len = 25.0) {
    std::vector<Vec2> pts;
    for (double x = 0.0; x <= route_len + 1e-9; x += 2.5) {
        double y = 0.0;
        if (change_x0 >= 0.0) {
            if (x >= change_x0 + change_len)
                y = kLane1Y;
            else if (x > change_x0) {
                double t = (x - change_x0) / change_len;
                y = kLane1Y * 0.5 * (1.0 - std::cos(t * 3.14159265358979323846));
            }
        }
        pts.push_back({x, y});
    }
    return Polyline(pts);
}

inline SceneState base_scene(RandomStream& rng, double route_len, double change_x0 = -1.0) {
    SceneState w;
    const double x_lo = -40.0, x_hi = route_len + 50.0;
    for (double y : {0.0, kLane1Y})
        w.lanes.push_back({Polyline({{x_lo, y}, {x_hi, y}}), kLaneWidth});
    w.corridor_center = Polyline({{x_lo, 0.5 * kLane1Y}, {x_hi, 0.5 * kLane1Y}});
    w.corridor_halfwidth = 0.5 * kLane1Y + kLaneWidth * 0.5;  // edges at -1.75 and 5.25
    w.route = make_route(route_len, change_x0);
    w.ego.pos = {0.0, 0.0};
    w.ego.heading = 0.0;
    w.ego.speed = rng.uniform(3.0, 4.5);
    return w;
}

inline Agent car(int id, double x, double y, double speed, Behavior b) {
    Agent a;
    a.id = id;
    a.pos = {x, y};
    a.speed = speed;
    a.base_speed = speed;
    a.behavior = b;
    return a;
}

}  // namespace detail

inline SceneState build_scenario(const ScenarioSpec& spec) {
    RandomStream rng(derive_seed(spec.seed, static_cast<std::uint64_t>(spec.kind), 0xced1));
    const double gs = spec.overrides.gap_scale;
    const double ss = spec.overrides.speed_scale;
    const double ts = spec.overrides.trigger_scale;

    switch (spec.kind) {
        case ScenarioKind::Merging: {
            double route_len = rng.uniform(125.0, 145.0);
            double lane_end = rng.uniform(55.0, 75.0);
            SceneState w = detail::base_scene(rng, route_len, lane_end - 35.0);
            // barrier closing lane 0
            Agent barrier = detail::car(1, lane_end + 6.0, 0.0, 0.0, Behavior::Static);
            barrier.length = 2.0;
            barrier.width = 3.0;
            w.agents.push_back(barrier);
            // lane-1 platoon with one acceptance gap between cars 2 and 3
            double vt = ss * rng.uniform(3.6, 4.4);
            double front = rng.uniform(14.0, 24.0);
            double gap = gs * rng.uniform(30.0, 42.0);
            w.agents.push_back(detail::car(2, front, kLane1Y, vt, Behavior::ConstSpeed));
            w.agents.push_back(detail::car(3, front - gap, kLane1Y, vt, Behavior::ConstSpeed));
            w.agents.push_back(detail::car(4, front + rng.uniform(18.0, 26.0), kLane1Y, vt, Behavior::ConstSpeed));
            return w;
        }
        case ScenarioKind::Overtaking: {
            double route_len = rng.uniform(125.0, 145.0);
            SceneState w = detail::base_scene(rng, route_len);
            double lead_x = rng.uniform(38.0, 55.0);
            double lead_v = ss * rng.uniform(0.0, 1.2);
            w.agents.push_back(detail::car(1, lead_x, 0.0, lead_v, Behavior::ConstSpeed));
            // sparse lane-1 traffic: one far ahead, one far behind
            w.agents.push_back(detail::car(2, lead_x + gs * rng.uniform(55.0, 75.0), kLane1Y,
                                           ss * rng.uniform(4.0, 4.8), Behavior::ConstSpeed));
            w.agents.push_back(detail::car(3, -gs * rng.uniform(45.0, 65.0), kLane1Y,
                                           ss * rng.uniform(3.5, 4.2), Behavior::ConstSpeed));
            return w;
        }
        case ScenarioKind::EmergencyBrake: {
            double route_len = rng.uniform(125.0, 145.0);
            SceneState w = detail::base_scene(rng, route_len);
            Agent lead = detail::car(1, w.ego.pos.x + gs * rng.uniform(22.0, 30.0), 0.0,
                                     ss * rng.uniform(4.6, 5.2), Behavior::TriggeredBrake);
            lead.trig_time = ts * rng.uniform(2.5, 5.0);
            lead.hold_time = rng.uniform(4.0, 6.5);
            w.agents.push_back(lead);
            // blocker alongside in lane 1 removes the swerve option
            w.agents.push_back(detail::car(2, w.ego.pos.x + rng.uniform(-4.0, 6.0), kLane1Y,
                                           ss * rng.uniform(4.8, 5.2), Behavior::ConstSpeed));
            return w;
        }
        case ScenarioKind::GiveWay: {
            double route_len = rng.uniform(125.0, 145.0);
            double block_x = rng.uniform(60.0, 78.0);
            SceneState w = detail::base_scene(rng, route_len, block_x - 35.0);
            Agent barrier = detail::car(1, block_x + 6.0, 0.0, 0.0, Behavior::Static);
            barrier.length = 2.0;
            barrier.width = 3.0;
            w.agents.push_back(barrier);
            // fast vehicle approaching from behind in the target lane
            w.agents.push_back(detail::car(2, -gs * rng.uniform(28.0, 42.0), kLane1Y,
                                           ss * rng.uniform(6.4, 7.4), Behavior::ConstSpeed));
            w.agents.push_back(detail::car(3, block_x + rng.uniform(25.0, 45.0), kLane1Y,
                                           ss * rng.uniform(4.0, 4.6), Behavior::ConstSpeed));
            return w;
        }
        case ScenarioKind::TrafficSign: {
            double route_len = rng.uniform(125.0, 145.0);
            SceneState w = detail::base_scene(rng, route_len);
            Signal sig;
            sig.stop_x = rng.uniform(55.0, 75.0);
            sig.pos = {sig.stop_x, -kLaneWidth};
            sig.red_dur = ts * rng.uniform(5.0, 8.0);
            sig.green_dur = rng.uniform(9.0, 12.0);
            sig.red = true;
            sig.timer = rng.uniform(0.4, 1.0) * sig.red_dur;
            w.signal = sig;
            return w;
        }
    }
    throw std::invalid_argument("unknown scenario kind");
}

// Navigation command from route geometry and signal state.
inline Command compute_command(const SceneState& w) {
    if (w.signal && w.signal->red) {
        double d = w.signal->stop_x - w.ego.pos.x;
        if (d > -1.0 && d < 35.0) return Command::Stop;
    }
    double s = w.route.project(w.ego.pos);
    double target_y = w.route.point_at(std::min(s + 15.0, w.route.length())).y;
    double dy = target_y - w.ego.pos.y;
    if (dy > 1.5) return Command::LaneChangeLeft;
    if (dy < -1.5) return Command::LaneChangeRight;
    return Command::Straight;
}

}  // namespace minidrive
