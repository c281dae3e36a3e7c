#pragma once

// Demonstration clips: expert rollouts recorded at the prediction rate.
//
// A clip file stores only the scenario spec and per-tick dynamic state;
// static geometry (lanes, route, signal schedule) is reproduced exactly by
// build_scenario(spec), which is deterministic by contract.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "minidrive/byteio.hpp"
#include "minidrive/episode.hpp"
#include "minidrive/scenarios.hpp"
#include "minidrive/traj.hpp"

namespace minidrive {

inline constexpr char kClipMagic[8] = {'M', 'D', 'C', 'L', 'I', 'P', '1', '\n'};

struct ClipRecord {
    double sim_time = 0.0;
    EgoState ego;
    std::vector<Agent> agents;
    bool has_signal = false;
    bool signal_red = false;
    double signal_timer = 0.0;
    Command command = Command::Straight;
    Trajectory expert;
};

struct Clip {
    ScenarioSpec spec;
    std::vector<ClipRecord> records;
};

// Rebuilds the full world at a record from the clip's scenario geometry.
inline SceneState scene_for_record(const SceneState& base, const ClipRecord& rec) {
    SceneState w = base;
    w.ego = rec.ego;
    w.agents = rec.agents;
    w.sim_time = rec.sim_time;
    if (w.signal && rec.has_signal) {
        w.signal->red = rec.signal_red;
        w.signal->timer = rec.signal_timer;
    }
    return w;
}

inline std::string clip_bytes(const Clip& clip) {
    ByteWriter bw;
    bw.raw(kClipMagic, 8);
    bw.u32(1);
    bw.u8(static_cast<std::uint8_t>(clip.spec.kind));
    bw.u64(clip.spec.seed);
    bw.f64(clip.spec.overrides.gap_scale);
    bw.f64(clip.spec.overrides.speed_scale);
    bw.f64(clip.spec.overrides.trigger_scale);
    bw.u32(static_cast<std::uint32_t>(clip.records.size()));
    for (const ClipRecord& r : clip.records) {
        bw.f64(r.sim_time);
        bw.f64(r.ego.pos.x);
        bw.f64(r.ego.pos.y);
        bw.f64(r.ego.heading);
        bw.f64(r.ego.speed);
        bw.f64(r.ego.last_accel);
        bw.f64(r.ego.last_steer);
        bw.u32(static_cast<std::uint32_t>(r.agents.size()));
        for (const Agent& a : r.agents) {
            bw.i32(a.id);
            bw.f64(a.pos.x);
            bw.f64(a.pos.y);
            bw.f64(a.heading);
            bw.f64(a.speed);
            bw.f64(a.length);
            bw.f64(a.width);
            bw.u8(static_cast<std::uint8_t>(a.behavior));
            bw.f64(a.base_speed);
            bw.f64(a.trig_time);
            bw.f64(a.hold_time);
            bw.i32(a.lead_id);
            bw.f64(a.headway);
            bw.f64(a.min_gap);
        }
        bw.u8(r.has_signal ? 1 : 0);
        if (r.has_signal) {
            bw.u8(r.signal_red ? 1 : 0);
            bw.f64(r.signal_timer);
        }
        bw.u8(static_cast<std::uint8_t>(r.command));
        for (const Vec2& p : r.expert.wp) {
            bw.f64(p.x);
            bw.f64(p.y);
        }
    }
    return bw.bytes();
}

inline void save_clip(const std::string& path, const Clip& clip) {
    std::string bytes = clip_bytes(clip);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

inline Clip load_clip(const std::string& path) {
    ByteReader br = ByteReader::from_file(path);
    char magic[8];
    for (int i = 0; i < 8; ++i) magic[i] = static_cast<char>(br.u8());
    if (std::string(magic, 8) != std::string(kClipMagic, 8))
        throw std::runtime_error("clip: bad magic in " + path);
    if (br.u32() != 1) throw std::runtime_error("clip: unsupported version in " + path);
    Clip clip;
    clip.spec.kind = static_cast<ScenarioKind>(br.u8());
    clip.spec.seed = br.u64();
    clip.spec.overrides.gap_scale = br.f64();
    clip.spec.overrides.speed_scale = br.f64();
    clip.spec.overrides.trigger_scale = br.f64();
    std::uint32_t n = br.u32();
    clip.records.resize(n);
    for (ClipRecord& r : clip.records) {
        r.sim_time = br.f64();
        r.ego.pos.x = br.f64();
        r.ego.pos.y = br.f64();
        r.ego.heading = br.f64();
        r.ego.speed = br.f64();
        r.ego.last_accel = br.f64();
        r.ego.last_steer = br.f64();
        r.agents.resize(br.u32());
        for (Agent& a : r.agents) {
            a.id = br.i32();
            a.pos.x = br.f64();
            a.pos.y = br.f64();
            a.heading = br.f64();
            a.speed = br.f64();
            a.length = br.f64();
            a.width = br.f64();
            a.behavior = static_cast<Behavior>(br.u8());
            a.base_speed = br.f64();
            a.trig_time = br.f64();
            a.hold_time = br.f64();
            a.lead_id = br.i32();
            a.headway = br.f64();
            a.min_gap = br.f64();
        }
        r.has_signal = br.u8() != 0;
        if (r.has_signal) {
            r.signal_red = br.u8() != 0;
            r.signal_timer = br.f64();
        }
        r.command = static_cast<Command>(br.u8());
        for (Vec2& p : r.expert.wp) {
            p.x = br.f64();
            p.y = br.f64();
        }
    }
    return clip;
}

struct DatasetEntry {
    std::string file;
    ScenarioKind kind = ScenarioKind::Merging;
    std::uint64_t seed = 0;
    int records = 0;
    bool train = true;
};

struct DatasetManifest {
    int n = 0;
    std::uint64_t seed = 0;
    ScenarioOverrides overrides;
    double perturb = 0.0;  // recovery-perturbation probability per decision
    std::string dir;
    std::vector<DatasetEntry> entries;

    std::vector<DatasetEntry> split(bool train) const {
        std::vector<DatasetEntry> out;
        for (const DatasetEntry& e : entries)
            if (e.train == train) out.push_back(e);
        return out;
    }
};

inline void save_manifest(const DatasetManifest& m) {
    nlohmann::json j;
    j["version"] = 1;
    j["n"] = m.n;
    j["seed"] = m.seed;
    j["overrides"] = {{"gap_scale", m.overrides.gap_scale},
                      {"speed_scale", m.overrides.speed_scale},
                      {"trigger_scale", m.overrides.trigger_scale}};
    j["perturb"] = m.perturb;
    nlohmann::json clips = nlohmann::json::array();
    for (const DatasetEntry& e : m.entries)
        clips.push_back({{"file", e.file},
                         {"kind", scenario_name(e.kind)},
                         {"seed", e.seed},
                         {"records", e.records},
                         {"split", e.train ? "train" : "val"}});
    j["clips"] = clips;
    std::ofstream f(m.dir + "/dataset.json", std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write manifest in " + m.dir);
    f << j.dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream f(dir + "/dataset.json");
    if (!f) throw std::runtime_error("no dataset manifest in " + dir);
    nlohmann::json j = nlohmann::json::parse(f);
    DatasetManifest m;
    m.n = j.at("n").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.overrides.gap_scale = j.at("overrides").at("gap_scale").get<double>();
    m.overrides.speed_scale = j.at("overrides").at("speed_scale").get<double>();
    m.overrides.trigger_scale = j.at("overrides").at("trigger_scale").get<double>();
    m.perturb = j.value("perturb", 0.0);
    m.dir = dir;
    for (const auto& e : j.at("clips")) {
        DatasetEntry d;
        d.file = e.at("file").get<std::string>();
        d.kind = scenario_from_name(e.at("kind").get<std::string>());
        d.seed = e.at("seed").get<std::uint64_t>();
        d.records = e.at("records").get<int>();
        d.train = e.at("split").get<std::string>() == "train";
        m.entries.push_back(d);
    }
    return m;
}

// Rolls the oracle expert over round-robin scenarios. Clips where the expert
// fails (any infraction, non-completion, or an infeasible plan) are discarded
// and regenerated under a fresh derived seed. With perturb > 0, the ego state
// is occasionally kicked sideways before a decision, so recorded clips carry
// expert demonstrations of recovering toward the route instead of only
// zero-error states (pure on-expert data collapses in closed loop).
inline DatasetManifest generate_clips(int n, std::uint64_t seed, const std::string& dir,
                                      ScenarioOverrides overrides = {}, double perturb = 0.0) {
    if (n < 1) throw std::invalid_argument("generate_clips: n must be >= 1");
    if (perturb < 0.0 || perturb >= 1.0)
        throw std::invalid_argument("generate_clips: perturb must be in [0, 1)");
    std::filesystem::create_directories(dir);

    DatasetManifest m;
    m.n = n;
    m.seed = seed;
    m.overrides = overrides;
    m.perturb = perturb;
    m.dir = dir;

    const int n_val = std::max(1, n / 20);
    for (int i = 0; i < n; ++i) {
        ScenarioKind kind = static_cast<ScenarioKind>(i % kNumScenarioKinds);
        Clip clip;
        for (std::uint64_t attempt = 0;; ++attempt) {
            if (attempt >= 64)
                throw std::runtime_error("generate_clips: expert cannot complete scenario " +
                                         std::string(scenario_name(kind)));
            ScenarioSpec spec{kind, derive_seed(seed, static_cast<std::uint64_t>(i), attempt),
                              overrides};
            clip.spec = spec;
            clip.records.clear();
            WorldHook kick;
            RandomStream prng(derive_seed(spec.seed, 0x3e2));
            if (perturb > 0.0)
                kick = [&prng, perturb](SceneState& w) {
                    if (w.sim_time < 1.0 || prng.uniform(0.0, 1.0) >= perturb) return;
                    double dy = prng.uniform(-0.7, 0.7);
                    double dpsi = prng.uniform(-0.1, 0.1);
                    w.ego.pos.x += -std::sin(w.ego.heading) * dy;
                    w.ego.pos.y += std::cos(w.ego.heading) * dy;
                    w.ego.heading += dpsi;
                };
            EpisodeResult res = run_episode(
                expert_policy(), spec, 120.0,
                [&clip](const SceneState& w, Command cmd, const Trajectory& plan) {
                    ClipRecord r;
                    r.sim_time = w.sim_time;
                    r.ego = w.ego;
                    r.agents = w.agents;
                    if (w.signal) {
                        r.has_signal = true;
                        r.signal_red = w.signal->red;
                        r.signal_timer = w.signal->timer;
                    }
                    r.command = cmd;
                    r.expert = plan;
                    clip.records.push_back(r);
                },
                kick);
            if (res.terminal == TerminalReason::Complete && res.infractions.empty()) break;
        }

        char name[32];
        std::snprintf(name, sizeof name, "clip_%05d.bin", i);
        save_clip(dir + "/" + name, clip);
        m.entries.push_back({name, kind, clip.spec.seed, static_cast<int>(clip.records.size()),
                             i < n - n_val});
    }
    save_manifest(m);
    return m;
}

}  // namespace minidrive
