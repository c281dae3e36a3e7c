#pragma once

// Closed-loop episode runner: policy at 2 Hz, tracker and physics at 10 Hz.

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "minidrive/control.hpp"
#include "minidrive/expert.hpp"
#include "minidrive/scenarios.hpp"
#include "minidrive/traj.hpp"
#include "minidrive/world.hpp"

namespace minidrive {

using PolicyFn = std::function<Trajectory(const SceneState&, Command)>;

enum class TerminalReason : std::uint8_t { Complete = 0, Collision = 1, Timeout = 2, OffRoad = 3 };

inline const char* terminal_name(TerminalReason r) {
    switch (r) {
        case TerminalReason::Complete: return "complete";
        case TerminalReason::Collision: return "collision";
        case TerminalReason::Timeout: return "timeout";
        case TerminalReason::OffRoad: return "offroad";
    }
    return "?";
}

struct TraceTick {
    double time = 0.0;
    Vec2 pos;
    double heading = 0.0;
    double speed = 0.0;
    double accel = 0.0;
    double jerk = 0.0;
};

struct EpisodeResult {
    ScenarioKind kind = ScenarioKind::Merging;
    std::uint64_t seed = 0;
    double completion = 0.0;
    std::vector<Infraction> infractions;
    std::vector<TraceTick> trace;
    std::vector<double> latency_ms;  // per policy invocation; in-memory only
    TerminalReason terminal = TerminalReason::Timeout;
};

// Per-decision hook for dataset recording: scene, command, planned trajectory.
using DecisionHook = std::function<void(const SceneState&, Command, const Trajectory&)>;

// Pre-decision world mutator (state perturbation during recording).
using WorldHook = std::function<void(SceneState&)>;

inline EpisodeResult run_episode(const PolicyFn& policy, const ScenarioSpec& spec,
                                 double time_limit = 120.0, const DecisionHook& hook = {},
                                 const WorldHook& pre_decide = {}) {
    SceneState w = build_scenario(spec);
    EpisodeResult res;
    res.kind = spec.kind;
    res.seed = spec.seed;

    InfractionDetector detector;
    const double route_len = w.route.length();
    double prev_accel = 0.0;
    bool have_prev_accel = false;

    std::vector<Vec2> plan_world;
    bool aborted = false;

    while (true) {
        if (w.sim_time >= time_limit - 1e-9) {
            res.infractions.push_back({InfractionKind::Timeout, w.sim_time, w.ego.pos});
            res.terminal = TerminalReason::Timeout;
            break;
        }

        if (pre_decide) pre_decide(w);
        Command cmd = compute_command(w);
        Trajectory plan;
        auto t0 = std::chrono::steady_clock::now();
        plan = policy(w, cmd);
        auto t1 = std::chrono::steady_clock::now();
        res.latency_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());

        if (!trajectory_feasible(plan)) {
            aborted = true;
            res.terminal = TerminalReason::Timeout;  // recorded as failure
            break;
        }
        if (hook) hook(w, cmd, plan);
        plan_world = to_world(plan, w.ego);

        bool done = false;
        for (int i = 0; i < kTicksPerDecision && !done; ++i) {
            SceneState prev = w;
            Control c = track_trajectory(w, plan_world);
            step_world(w, c, kSimDt);

            double jerk = have_prev_accel ? (w.ego.last_accel - prev_accel) / kSimDt : 0.0;
            res.trace.push_back({w.sim_time, w.ego.pos, w.ego.heading, w.ego.speed,
                                 w.ego.last_accel, jerk});
            prev_accel = w.ego.last_accel;
            have_prev_accel = true;

            res.completion = std::max(res.completion, w.route.project(w.ego.pos) / route_len);

            for (const Infraction& inf : detector.check(prev, w)) {
                res.infractions.push_back(inf);
                if (is_collision(inf.kind)) {
                    res.terminal = TerminalReason::Collision;
                    done = true;
                } else if (inf.kind == InfractionKind::OffRoad) {
                    res.terminal = TerminalReason::OffRoad;
                    done = true;
                }
            }
            if (!done && res.completion >= 0.995) {
                res.completion = 1.0;
                res.terminal = TerminalReason::Complete;
                done = true;
            }
        }
        if (done || aborted) break;
    }
    return res;
}

inline PolicyFn expert_policy() {
    return [](const SceneState& w, Command) { return oracle_expert(w); };
}

}  // namespace minidrive
