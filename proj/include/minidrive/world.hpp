#pragma once

// Deterministic 2D driving world: kinematic-bicycle ego, scripted agents,
// a timed signal, and infraction detection.
//
// Roads in this artifact run along +x with straight lane centerlines; the
// signal stop line is the vertical line x = signal.stop_x. Agents follow
// time-triggered scripts and never react to the ego, so their full future
// is a pure function of the initial state — losses and the expert query it
// by rolling copies forward.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "minidrive/geometry.hpp"

namespace minidrive {

inline constexpr double kSimDt = 0.1;        // 10 Hz physics
inline constexpr double kPredDt = 0.5;       // 2 Hz policy/prediction
inline constexpr int kHorizon = 6;           // waypoints per trajectory (3 s)
inline constexpr int kTicksPerDecision = 5;  // kPredDt / kSimDt

inline constexpr double kWheelbase = 2.8;
inline constexpr double kAccelMin = -6.0;
inline constexpr double kAccelMax = 3.0;
inline constexpr double kSteerMax = 0.5;
inline constexpr double kEgoLength = 4.6;
inline constexpr double kEgoWidth = 1.9;
inline constexpr double kVMax = 6.0;       // bounds trajectory spacing (kVMax * kPredDt)
inline constexpr double kCruise = 5.2;     // expert target / efficiency reference, m/s
inline constexpr double kRouteDeviationLimit = 8.0;

enum class Command : std::uint8_t { Straight = 0, LaneChangeLeft = 1, LaneChangeRight = 2, Stop = 3 };
inline constexpr int kNumCommands = 4;

enum class Behavior : std::uint8_t { Static = 0, ConstSpeed = 1, TriggeredBrake = 2, Follower = 3 };

struct Agent {
    int id = 0;
    Vec2 pos;
    double heading = 0.0;
    double speed = 0.0;
    double length = 4.4;
    double width = 1.8;
    Behavior behavior = Behavior::ConstSpeed;
    // script parameters (unused fields stay zero)
    double base_speed = 0.0;  // cruise / resume speed
    double trig_time = 0.0;   // TriggeredBrake: brake start, sim time
    double hold_time = 0.0;   // TriggeredBrake: stopped duration before resuming
    int lead_id = -1;         // Follower: agent to follow
    double headway = 1.5;     // Follower: time headway s
    double min_gap = 6.0;     // Follower: standstill gap m

    OBB box() const { return {pos, heading, 0.5 * length, 0.5 * width}; }
    bool is_static() const { return behavior == Behavior::Static; }
};

struct Signal {
    double stop_x = 0.0;      // stop line x
    Vec2 pos;                 // signal head position (reporting only)
    double red_dur = 8.0;
    double green_dur = 10.0;
    bool red = true;
    double timer = 0.0;       // time remaining in current phase

    void advance(double dt) {
        timer -= dt;
        while (timer <= 1e-9) {
            red = !red;
            timer += red ? red_dur : green_dur;
        }
    }
};

struct Lane {
    Polyline center;
    double width = 3.5;
};

struct EgoState {
    Vec2 pos;
    double heading = 0.0;
    double speed = 0.0;
    double last_accel = 0.0;
    double last_steer = 0.0;

    OBB box() const { return {pos, heading, 0.5 * kEgoLength, 0.5 * kEgoWidth}; }
};

struct SceneState {
    EgoState ego;
    std::vector<Agent> agents;
    std::vector<Lane> lanes;
    Polyline corridor_center;     // drivable-region spine
    double corridor_halfwidth = 0.0;
    Polyline route;               // lane-center route the ego should follow
    std::optional<Signal> signal;
    double sim_time = 0.0;
};

struct Control {
    double accel = 0.0;
    double steer = 0.0;
};

inline Control clamp_control(Control c) {
    c.accel = std::clamp(c.accel, kAccelMin, kAccelMax);
    c.steer = std::clamp(c.steer, -kSteerMax, kSteerMax);
    return c;
}

// Semi-implicit Euler: speed updates first and the new speed moves the pose.
// Position uses the pre-update heading; heading then advances by the bicycle
// yaw rate, so heading-change per arclength is exactly tan(steer)/wheelbase.
inline void step_ego(EgoState& ego, Control c, double dt) {
    c = clamp_control(c);
    ego.speed = std::max(0.0, ego.speed + c.accel * dt);
    ego.pos = ego.pos + heading_vec(ego.heading) * (ego.speed * dt);
    ego.heading += ego.speed * std::tan(c.steer) / kWheelbase * dt;
    ego.last_accel = c.accel;
    ego.last_steer = c.steer;
}

// Scripted agent update on absolute sim time. Followers read the previous
// tick's lead state (snapshot), so update order is irrelevant.
inline void advance_agents(std::vector<Agent>& agents, double sim_time, double dt) {
    const std::vector<Agent> snap = agents;
    auto find_lead = [&snap](int id) -> const Agent* {
        for (const Agent& a : snap)
            if (a.id == id) return &a;
        return nullptr;
    };
    for (Agent& a : agents) {
        switch (a.behavior) {
            case Behavior::Static:
                a.speed = 0.0;
                continue;
            case Behavior::ConstSpeed:
                a.speed = a.base_speed;
                break;
            case Behavior::TriggeredBrake: {
                double t = sim_time;
                if (t >= a.trig_time && t < a.trig_time + a.hold_time)
                    a.speed = std::max(0.0, a.speed - 7.0 * dt);
                else if (t >= a.trig_time + a.hold_time)
                    a.speed = std::min(a.base_speed, a.speed + 2.0 * dt);
                else
                    a.speed = a.base_speed;
                break;
            }
            case Behavior::Follower: {
                const Agent* lead = find_lead(a.lead_id);
                double v_des = a.base_speed;
                if (lead) {
                    Vec2 hv = heading_vec(a.heading);
                    double gap = (lead->pos - a.pos).dot(hv) - 0.5 * (lead->length + a.length);
                    v_des = std::clamp((gap - a.min_gap) / a.headway, 0.0, a.base_speed);
                }
                double dv = std::clamp(v_des - a.speed, -4.0 * dt, 2.0 * dt);
                a.speed = std::max(0.0, a.speed + dv);
                break;
            }
        }
        a.pos = a.pos + heading_vec(a.heading) * (a.speed * dt);
    }
}

inline void step_world(SceneState& w, Control c, double dt = kSimDt) {
    step_ego(w.ego, c, dt);
    advance_agents(w.agents, w.sim_time, dt);
    if (w.signal) w.signal->advance(dt);
    w.sim_time += dt;
}

inline SceneState step(const SceneState& w, Control c, double dt = kSimDt) {
    SceneState next = w;
    step_world(next, c, dt);
    return next;
}

// Agent positions at the prediction timestamps (kPredDt apart), simulated at
// the physics rate. futures[k][j] is agent j at t0 + (k+1)*kPredDt.
inline std::vector<std::vector<Agent>> agent_futures(const SceneState& w, int horizon = kHorizon) {
    std::vector<std::vector<Agent>> out;
    std::vector<Agent> agents = w.agents;
    double t = w.sim_time;
    for (int k = 0; k < horizon; ++k) {
        for (int i = 0; i < kTicksPerDecision; ++i) {
            advance_agents(agents, t, kSimDt);
            t += kSimDt;
        }
        out.push_back(agents);
    }
    return out;
}

enum class InfractionKind : std::uint8_t {
    CollisionVehicle = 0,
    CollisionStatic = 1,
    OffRoad = 2,
    RedLightViolation = 3,
    Timeout = 4,
    RouteDeviation = 5,
};

inline const char* infraction_name(InfractionKind k) {
    switch (k) {
        case InfractionKind::CollisionVehicle: return "CollisionVehicle";
        case InfractionKind::CollisionStatic: return "CollisionStatic";
        case InfractionKind::OffRoad: return "OffRoad";
        case InfractionKind::RedLightViolation: return "RedLightViolation";
        case InfractionKind::Timeout: return "Timeout";
        case InfractionKind::RouteDeviation: return "RouteDeviation";
    }
    return "?";
}

struct Infraction {
    InfractionKind kind;
    double sim_time = 0.0;
    Vec2 position;
};

inline bool is_collision(InfractionKind k) {
    return k == InfractionKind::CollisionVehicle || k == InfractionKind::CollisionStatic;
}

// Stateful detector: debounces collisions per agent, red-light crossings per
// signal cycle, and route deviation per episode.
class InfractionDetector {
public:
    std::vector<Infraction> check(const SceneState& prev, const SceneState& next) {
        std::vector<Infraction> out;
        OBB ego = next.ego.box();

        for (const Agent& a : next.agents) {
            if (already_hit(a.id)) continue;
            if (obb_overlap(ego, a.box())) {
                hit_.push_back(a.id);
                out.push_back({a.is_static() ? InfractionKind::CollisionStatic
                                             : InfractionKind::CollisionVehicle,
                               next.sim_time, next.ego.pos});
            }
        }

        if (!offroad_flagged_) {
            bool all_out = true;
            for (const Vec2& c : ego.corners())
                if (std::fabs(next.corridor_center.signed_offset(c)) <= next.corridor_halfwidth)
                    all_out = false;
            if (all_out) {
                offroad_flagged_ = true;
                out.push_back({InfractionKind::OffRoad, next.sim_time, next.ego.pos});
            }
        }

        if (next.signal) {
            if (prev.signal && prev.signal->red != next.signal->red) red_latched_ = false;
            if (next.signal->red && !red_latched_ && prev.ego.pos.x < next.signal->stop_x &&
                next.ego.pos.x >= next.signal->stop_x) {
                red_latched_ = true;
                out.push_back({InfractionKind::RedLightViolation, next.sim_time, next.ego.pos});
            }
        }

        if (!deviation_flagged_ && next.route.distance_to(next.ego.pos) > kRouteDeviationLimit) {
            deviation_flagged_ = true;
            out.push_back({InfractionKind::RouteDeviation, next.sim_time, next.ego.pos});
        }

        return out;
    }

private:
    bool already_hit(int id) const {
        for (int h : hit_)
            if (h == id) return true;
        return false;
    }

    std::vector<int> hit_;
    bool offroad_flagged_ = false;
    bool red_latched_ = false;
    bool deviation_flagged_ = false;
};

}  // namespace minidrive
