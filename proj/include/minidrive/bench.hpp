#pragma once

// Evaluation harness: closed-loop route suite (Driving Score, Success Rate,
// Efficiency, Comfortness, Multi-Ability), open-loop trajectory metrics,
// latency measurement, and byte-stable report emission.

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "minidrive/checkpoint.hpp"
#include "minidrive/clips.hpp"
#include "minidrive/encoder.hpp"
#include "minidrive/episode.hpp"
#include "minidrive/runconfig.hpp"
#include "minidrive/student.hpp"
#include "minidrive/teacher.hpp"

namespace minidrive {

// ---------------------------------------------------------------------------
// scoring

struct PenaltyTable {
    int version = 1;
    double collision_vehicle = 0.60;
    double collision_static = 0.65;
    double red_light = 0.70;
    double off_road = 0.65;
    double route_deviation = 0.70;
    double timeout = 0.70;

    double factor(InfractionKind k) const {
        switch (k) {
            case InfractionKind::CollisionVehicle: return collision_vehicle;
            case InfractionKind::CollisionStatic: return collision_static;
            case InfractionKind::RedLightViolation: return red_light;
            case InfractionKind::OffRoad: return off_road;
            case InfractionKind::RouteDeviation: return route_deviation;
            case InfractionKind::Timeout: return timeout;
        }
        return 1.0;
    }
};

inline PenaltyTable penalty_table(const RunConfig& cfg) {
    PenaltyTable p;
    p.collision_vehicle = cfg.d("penalty.collision_vehicle");
    p.collision_static = cfg.d("penalty.collision_static");
    p.red_light = cfg.d("penalty.red_light");
    p.off_road = cfg.d("penalty.off_road");
    p.route_deviation = cfg.d("penalty.route_deviation");
    p.timeout = cfg.d("penalty.timeout");
    for (double f : {p.collision_vehicle, p.collision_static, p.red_light, p.off_road,
                     p.route_deviation, p.timeout})
        if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("penalty factors must be in (0,1]");
    return p;
}

inline double driving_score(const EpisodeResult& r, const PenaltyTable& pen) {
    double score = 100.0 * r.completion;
    for (const Infraction& inf : r.infractions) score *= pen.factor(inf.kind);
    return score;
}

inline bool success(const EpisodeResult& r) {
    if (r.terminal != TerminalReason::Complete) return false;
    for (const Infraction& inf : r.infractions)
        if (is_collision(inf.kind)) return false;
    return true;
}

inline double efficiency(const EpisodeResult& r) {
    if (r.trace.empty()) throw std::invalid_argument("efficiency: empty trace");
    double sum = 0.0;
    for (const TraceTick& t : r.trace) sum += t.speed;
    return 100.0 * (sum / static_cast<double>(r.trace.size())) / kCruise;
}

inline double comfort(const EpisodeResult& r) {
    if (r.trace.empty()) throw std::invalid_argument("comfort: empty trace");
    std::size_t ok = 0;
    for (const TraceTick& t : r.trace)
        if (std::fabs(t.accel) <= 3.0 && std::fabs(t.jerk) <= 5.0) ++ok;
    return 100.0 * static_cast<double>(ok) / static_cast<double>(r.trace.size());
}

struct MultiAbility {
    std::array<double, kNumScenarioKinds> sr{};     // percentage per kind
    std::array<int, kNumScenarioKinds> routes{};    // routes seen per kind
    double mean = 0.0;
    bool complete = true;  // false when some category had no routes
};

inline MultiAbility multi_ability(const std::vector<EpisodeResult>& results) {
    MultiAbility ma;
    std::array<int, kNumScenarioKinds> won{};
    for (const EpisodeResult& r : results) {
        int k = static_cast<int>(r.kind);
        ma.routes[static_cast<std::size_t>(k)] += 1;
        if (success(r)) won[static_cast<std::size_t>(k)] += 1;
    }
    int present = 0;
    double sum = 0.0;
    for (int k = 0; k < kNumScenarioKinds; ++k) {
        if (ma.routes[static_cast<std::size_t>(k)] == 0) {
            ma.complete = false;
            continue;
        }
        ma.sr[static_cast<std::size_t>(k)] = 100.0 * won[static_cast<std::size_t>(k)] /
                                             static_cast<double>(ma.routes[static_cast<std::size_t>(k)]);
        sum += ma.sr[static_cast<std::size_t>(k)];
        ++present;
    }
    ma.mean = present > 0 ? sum / present : 0.0;
    return ma;
}

// ---------------------------------------------------------------------------
// neural policy bridge

struct NeuralPolicy {
    EncoderParams enc;
    std::shared_ptr<TeacherReasoner> teacher;  // exactly one of teacher/student set
    std::shared_ptr<StudentParams> student;
    VaePlanner planner;
    MemoryBank mem;

    Tensor reason(const TokenSeq& seq) const {
        if (teacher) return teacher_forward(seq, *teacher);
        if (student) return student_forward(seq, *student);
        throw std::logic_error("NeuralPolicy: no reasoner loaded");
    }

    Trajectory decide(const SceneState& w, Command cmd) {
        NoGradGuard ng;
        if (w.sim_time < 0.5 * kSimDt) mem.clear();  // episode start
        TokenSeq seq = encode_scene(w, cmd, mem, enc);
        update_memory(mem, seq, enc);
        return vae_decode(std::vector<double>(kDz, 0.0), reason(seq), planner);
    }

    std::size_t reasoner_params() const {
        if (teacher) return teacher->param_count();
        if (student) return count_params(*student);
        return 0;
    }

    PolicyFn policy() {
        return [this](const SceneState& w, Command cmd) { return decide(w, cmd); };
    }
};

// Loads a policy from a checkpoint: `student/*` tensors select the student
// pipeline, otherwise the teacher reasoner is expected.
inline NeuralPolicy load_policy(const std::string& ckpt_path, int student_depth = kStudentK) {
    LoadedCheckpoint ckpt = load_checkpoint(ckpt_path);
    RandomStream rng(1);
    NeuralPolicy p;
    p.enc = EncoderParams(rng);
    p.planner = VaePlanner(kCp, rng);
    ParamRegistry reg;
    p.enc.register_params(reg);
    p.planner.register_params(reg);
    if (ckpt.has_prefix("student/")) {
        p.student = std::make_shared<StudentParams>(student_depth, kCh, kStudentHeads, kCp, rng);
        p.student->register_params(reg);
    } else {
        p.teacher = std::make_shared<TeacherReasoner>(rng);
        p.teacher->register_params(reg);
    }
    restore_params(reg, ckpt);
    return p;
}

// ---------------------------------------------------------------------------
// closed-loop suite

struct RouteSpec {
    ScenarioKind kind;
    std::uint64_t seed;
};

inline std::vector<RouteSpec> default_routes(const RunConfig& cfg) {
    std::vector<RouteSpec> out;
    const int per_kind = static_cast<int>(cfg.i("eval.routes_per_kind"));
    const std::uint64_t base = static_cast<std::uint64_t>(cfg.i("eval.seed_base"));
    for (int k = 0; k < kNumScenarioKinds; ++k)
        for (int j = 0; j < per_kind; ++j)
            out.push_back({static_cast<ScenarioKind>(k),
                           base + static_cast<std::uint64_t>(k * per_kind + j)});
    return out;
}

struct RouteRow {
    ScenarioKind kind;
    std::uint64_t seed = 0;
    double completion = 0.0;
    double ds = 0.0;
    bool success = false;
    double efficiency = 0.0;
    double comfort = 0.0;
    int infractions = 0;
    TerminalReason terminal = TerminalReason::Timeout;
};

struct ClosedLoopSummary {
    std::vector<RouteRow> rows;
    std::vector<EpisodeResult> results;
    double mean_ds = 0.0;
    double success_rate = 0.0;  // fraction in [0,1]
    double mean_efficiency = 0.0;
    double mean_comfort = 0.0;
    MultiAbility ability;
};

inline ClosedLoopSummary closed_loop_suite(const std::function<PolicyFn()>& make_policy,
                                           const std::vector<RouteSpec>& routes,
                                           double time_limit, const PenaltyTable& pen,
                                           ScenarioOverrides overrides = {}, int workers = 1) {
    if (routes.empty()) throw std::invalid_argument("closed_loop_suite: no routes");
    std::vector<EpisodeResult> results(routes.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        PolicyFn policy = make_policy();
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= routes.size()) break;
            ScenarioSpec spec{routes[i].kind, routes[i].seed, overrides};
            results[i] = run_episode(policy, spec, time_limit);
        }
    };
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }

    ClosedLoopSummary s;
    s.results = std::move(results);
    for (std::size_t i = 0; i < routes.size(); ++i) {
        const EpisodeResult& r = s.results[i];
        RouteRow row;
        row.kind = r.kind;
        row.seed = r.seed;
        row.completion = r.completion;
        row.ds = driving_score(r, pen);
        row.success = success(r);
        row.efficiency = efficiency(r);
        row.comfort = comfort(r);
        row.infractions = static_cast<int>(r.infractions.size());
        row.terminal = r.terminal;
        s.rows.push_back(row);
    }
    double n = static_cast<double>(s.rows.size());
    int wins = 0;
    for (const RouteRow& row : s.rows) {
        s.mean_ds += row.ds / n;
        s.mean_efficiency += row.efficiency / n;
        s.mean_comfort += row.comfort / n;
        if (row.success) ++wins;
    }
    s.success_rate = wins / n;
    s.ability = multi_ability(s.results);
    return s;
}

// ---------------------------------------------------------------------------
// open-loop evaluation

struct OpenLoopStats {
    std::array<double, 3> l2{};        // @1s, @2s, @3s
    double l2_avg = 0.0;               // mean over all horizon waypoints
    std::array<double, 3> collision{}; // rate @1s, @2s, @3s
    double collision_avg = 0.0;
    int n_records = 0;
};

// Evaluates a policy on the held-out split of a dataset. Only records with a
// full H-step future (for agent GT boxes) enter the tables, keeping all
// denominators identical.
inline OpenLoopStats open_loop_eval(const PolicyFn& policy, const DatasetManifest& data) {
    OpenLoopStats st;
    std::array<double, 3> l2_sum{};
    double l2_all = 0.0;
    std::array<int, 3> col_cnt{};
    const std::array<int, 3> wp_at = {1, 3, 5};  // 1 s, 2 s, 3 s at 2 Hz

    for (const DatasetEntry& e : data.split(false)) {
        Clip clip = load_clip(data.dir + "/" + e.file);
        SceneState base = build_scenario(clip.spec);
        for (std::size_t ri = 0; ri + static_cast<std::size_t>(kHorizon) < clip.records.size();
             ++ri) {
            const ClipRecord& rec = clip.records[ri];
            SceneState scene = scene_for_record(base, rec);
            Trajectory pred = policy(scene, rec.command);
            const Trajectory& gt = rec.expert;

            for (int h = 0; h < 3; ++h) {
                std::size_t k = static_cast<std::size_t>(wp_at[static_cast<std::size_t>(h)]);
                l2_sum[static_cast<std::size_t>(h)] += (pred.wp[k] - gt.wp[k]).norm();
            }
            for (int k = 0; k < kHorizon; ++k)
                l2_all += (pred.wp[static_cast<std::size_t>(k)] -
                           gt.wp[static_cast<std::size_t>(k)])
                              .norm() /
                          kHorizon;

            for (int h = 0; h < 3; ++h) {
                int k = wp_at[static_cast<std::size_t>(h)];
                Vec2 prev = k > 0 ? pred.wp[static_cast<std::size_t>(k - 1)] : Vec2{0.0, 0.0};
                Vec2 step = pred.wp[static_cast<std::size_t>(k)] - prev;
                double local = (std::fabs(step.x) + std::fabs(step.y) > 1e-9)
                                   ? std::atan2(step.y, step.x)
                                   : 0.0;
                OBB ego_box{from_frame(pred.wp[static_cast<std::size_t>(k)], rec.ego.pos,
                                       rec.ego.heading),
                            rec.ego.heading + local, 0.5 * kEgoLength, 0.5 * kEgoWidth};
                const ClipRecord& fut = clip.records[ri + static_cast<std::size_t>(k) + 1];
                bool hit = false;
                for (const Agent& a : fut.agents)
                    if (obb_overlap(ego_box, OBB{a.pos, a.heading, 0.5 * a.length, 0.5 * a.width})) {
                        hit = true;
                        break;
                    }
                if (hit) col_cnt[static_cast<std::size_t>(h)] += 1;
            }
            ++st.n_records;
        }
    }
    if (st.n_records == 0) throw std::runtime_error("open_loop_eval: no evaluable records");
    double n = static_cast<double>(st.n_records);
    for (int h = 0; h < 3; ++h) {
        st.l2[static_cast<std::size_t>(h)] = l2_sum[static_cast<std::size_t>(h)] / n;
        st.collision[static_cast<std::size_t>(h)] = col_cnt[static_cast<std::size_t>(h)] / n;
        st.collision_avg += st.collision[static_cast<std::size_t>(h)] / 3.0;
    }
    st.l2_avg = l2_all / n;
    return st;
}

// ---------------------------------------------------------------------------
// latency

struct LatencyStats {
    double reasoner_median_ms = 0.0;
    double reasoner_mean_ms = 0.0;
    double e2e_median_ms = 0.0;
    double e2e_mean_ms = 0.0;
    std::size_t reasoner_params = 0;
};

namespace bench_detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

}  // namespace bench_detail

// Wall-clock per decision on a fixed representative scene; single-threaded.
inline LatencyStats measure_latency(NeuralPolicy& p, int n_warmup, int n_samples) {
    if (n_samples < 30) throw std::invalid_argument("measure_latency: need >= 30 samples");
    SceneState scene = build_scenario({ScenarioKind::Merging, 7, {}});
    TokenSeq seq;
    {
        NoGradGuard ng;
        p.mem.clear();
        seq = encode_scene(scene, Command::Straight, p.mem, p.enc);
    }
    using clk = std::chrono::steady_clock;
    std::vector<double> reasoner, e2e;
    for (int i = 0; i < n_warmup + n_samples; ++i) {
        NoGradGuard ng;
        auto t0 = clk::now();
        Tensor tok = p.reason(seq);
        auto t1 = clk::now();
        (void)tok;
        if (i >= n_warmup)
            reasoner.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    for (int i = 0; i < n_warmup + n_samples; ++i) {
        auto t0 = clk::now();
        Trajectory traj = p.decide(scene, Command::Straight);
        auto t1 = clk::now();
        (void)traj;
        if (i >= n_warmup)
            e2e.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    LatencyStats st;
    st.reasoner_median_ms = bench_detail::median(reasoner);
    st.reasoner_mean_ms = bench_detail::mean(reasoner);
    st.e2e_median_ms = bench_detail::median(e2e);
    st.e2e_mean_ms = bench_detail::mean(e2e);
    st.reasoner_params = p.reasoner_params();
    return st;
}

// ---------------------------------------------------------------------------
// report emission

struct BenchmarkReport {
    std::string config_hash;
    PenaltyTable penalties;
    std::optional<ClosedLoopSummary> closed;
    std::optional<OpenLoopStats> open;
    std::optional<LatencyStats> latency_teacher;
    std::optional<LatencyStats> latency_student;
};

namespace bench_detail {

inline nlohmann::json penalties_json(const PenaltyTable& p) {
    return {{"version", p.version},
            {"CollisionVehicle", p.collision_vehicle},
            {"CollisionStatic", p.collision_static},
            {"RedLightViolation", p.red_light},
            {"OffRoad", p.off_road},
            {"RouteDeviation", p.route_deviation},
            {"Timeout", p.timeout}};
}

inline nlohmann::json latency_json(const LatencyStats& l) {
    return {{"reasoner_median_ms", l.reasoner_median_ms},
            {"reasoner_mean_ms", l.reasoner_mean_ms},
            {"e2e_median_ms", l.e2e_median_ms},
            {"e2e_mean_ms", l.e2e_mean_ms},
            {"reasoner_params", l.reasoner_params}};
}

}  // namespace bench_detail

inline nlohmann::json report_json(const BenchmarkReport& r) {
    nlohmann::json j;
    j["version"] = 1;
    j["config_hash"] = r.config_hash;
    j["penalties"] = bench_detail::penalties_json(r.penalties);
    if (r.closed) {
        const ClosedLoopSummary& c = *r.closed;
        nlohmann::json rows = nlohmann::json::array();
        std::vector<std::uint64_t> seeds;
        for (const RouteRow& row : c.rows) {
            rows.push_back({{"kind", scenario_name(row.kind)},
                            {"seed", row.seed},
                            {"completion", row.completion},
                            {"ds", row.ds},
                            {"success", row.success},
                            {"efficiency", row.efficiency},
                            {"comfort", row.comfort},
                            {"infractions", row.infractions},
                            {"terminal", terminal_name(row.terminal)}});
            seeds.push_back(row.seed);
        }
        nlohmann::json ability;
        for (int k = 0; k < kNumScenarioKinds; ++k)
            ability[scenario_name(static_cast<ScenarioKind>(k))] =
                c.ability.sr[static_cast<std::size_t>(k)];
        ability["Mean"] = c.ability.mean;
        j["closed_loop"] = {{"routes", rows},
                            {"seeds", seeds},
                            {"mean_ds", c.mean_ds},
                            {"success_rate", c.success_rate},
                            {"mean_efficiency", c.mean_efficiency},
                            {"mean_comfort", c.mean_comfort},
                            {"multi_ability", ability}};
    }
    if (r.open) {
        const OpenLoopStats& o = *r.open;
        j["open_loop"] = {{"l2_1s", o.l2[0]},       {"l2_2s", o.l2[1]},
                          {"l2_3s", o.l2[2]},       {"l2_avg", o.l2_avg},
                          {"col_1s", o.collision[0]}, {"col_2s", o.collision[1]},
                          {"col_3s", o.collision[2]}, {"col_avg", o.collision_avg},
                          {"n_records", o.n_records}};
    }
    if (r.latency_teacher) j["latency_teacher"] = bench_detail::latency_json(*r.latency_teacher);
    if (r.latency_student) j["latency_student"] = bench_detail::latency_json(*r.latency_student);
    if (r.latency_teacher && r.latency_student && r.latency_student->reasoner_median_ms > 0.0) {
        j["speedup_reasoner_median"] =
            r.latency_teacher->reasoner_median_ms / r.latency_student->reasoner_median_ms;
        j["param_ratio"] = static_cast<double>(r.latency_teacher->reasoner_params) /
                           static_cast<double>(r.latency_student->reasoner_params);
    }
    return j;
}

inline std::string report_text(const BenchmarkReport& r) {
    char buf[200];
    std::string out;
    out += "config_hash: " + r.config_hash + "\n";
    if (r.closed) {
        const ClosedLoopSummary& c = *r.closed;
        std::snprintf(buf, sizeof buf,
                      "closed-loop  DS %7.2f  SR %6.2f%%  Eff %7.2f  Comfort %7.2f  (%zu routes)\n",
                      c.mean_ds, 100.0 * c.success_rate, c.mean_efficiency, c.mean_comfort,
                      c.rows.size());
        out += buf;
        out += "multi-ability:";
        for (int k = 0; k < kNumScenarioKinds; ++k) {
            std::snprintf(buf, sizeof buf, "  %s %.1f", scenario_name(static_cast<ScenarioKind>(k)),
                          c.ability.sr[static_cast<std::size_t>(k)]);
            out += buf;
        }
        std::snprintf(buf, sizeof buf, "  Mean %.1f\n", c.ability.mean);
        out += buf;
    }
    if (r.open) {
        const OpenLoopStats& o = *r.open;
        std::snprintf(buf, sizeof buf,
                      "open-loop    L2 %.4f/%.4f/%.4f m  avg %.4f  col %.4f/%.4f/%.4f  avg %.4f  "
                      "(%d records)\n",
                      o.l2[0], o.l2[1], o.l2[2], o.l2_avg, o.collision[0], o.collision[1],
                      o.collision[2], o.collision_avg, o.n_records);
        out += buf;
    }
    auto lat_line = [&](const char* tag, const LatencyStats& l) {
        std::snprintf(buf, sizeof buf,
                      "latency %s  reasoner %.3f ms (median, %.3f mean)  e2e %.3f ms  params %zu\n",
                      tag, l.reasoner_median_ms, l.reasoner_mean_ms, l.e2e_median_ms,
                      l.reasoner_params);
        out += buf;
    };
    if (r.latency_teacher) lat_line("teacher", *r.latency_teacher);
    if (r.latency_student) lat_line("student", *r.latency_student);
    if (r.latency_teacher && r.latency_student && r.latency_student->reasoner_median_ms > 0.0) {
        std::snprintf(buf, sizeof buf, "speedup (reasoner median): %.1fx   param ratio: %.1fx\n",
                      r.latency_teacher->reasoner_median_ms / r.latency_student->reasoner_median_ms,
                      static_cast<double>(r.latency_teacher->reasoner_params) /
                          static_cast<double>(r.latency_student->reasoner_params));
        out += buf;
    }
    return out;
}

inline void emit_report(const BenchmarkReport& r, const std::string& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir + "/report.json", std::ios::trunc | std::ios::binary);
        if (!f) throw std::runtime_error("emit_report: cannot write " + dir + "/report.json");
        f << report_json(r).dump(2) << "\n";
    }
    {
        std::ofstream f(dir + "/report.txt", std::ios::trunc | std::ios::binary);
        if (!f) throw std::runtime_error("emit_report: cannot write " + dir + "/report.txt");
        f << report_text(r);
    }
}

}  // namespace minidrive
