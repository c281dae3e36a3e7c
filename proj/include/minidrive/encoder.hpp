#pragma once

// Scene tokenizer: SceneState + command + ego status + history memory -> the
// N_c x C_c token sequence consumed by both reasoners, plus the scene-query
// memory bank pooling historical context across prediction ticks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "minidrive/nn.hpp"
#include "minidrive/scenarios.hpp"
#include "minidrive/tensor.hpp"
#include "minidrive/world.hpp"

namespace minidrive {

inline constexpr int kAgentSlots = 16;
inline constexpr int kLaneSlots = 32;
inline constexpr int kHistSlots = 8;
inline constexpr int kReservedSlots = 6;
inline constexpr int kNc = kAgentSlots + kLaneSlots + kHistSlots + 1 + 1 + kReservedSlots;
inline constexpr int kCc = 128;
inline constexpr int kCq = 128;
inline constexpr int kNs = 4;     // scene queries pooling the memory write
inline constexpr int kNMem = 8;   // memory bank capacity

inline constexpr int kAgentFeat = 7;
inline constexpr int kLaneFeat = 7;
inline constexpr int kEgoFeat = 3;
inline constexpr int kCmdFeat = 4;

enum class SlotType { Agent, Lane, History, EgoStatus, Command, Reserved };

struct TokenSeq {
    Tensor tokens;  // kNc x kCc
    Mask mask;      // 1 = valid
    std::vector<SlotType> tags;
};

// drop masked rows so downstream consumers see only valid tokens; keeps
// their outputs exactly invariant to how many masked slots the layout
// reserves (masked rows never even enter the arithmetic)
inline TokenSeq compact_seq(const TokenSeq& seq) {
    std::vector<int> keep;
    for (std::size_t i = 0; i < seq.mask.size(); ++i)
        if (seq.mask[i]) keep.push_back(static_cast<int>(i));
    if (keep.empty()) throw std::invalid_argument("compact_seq: empty valid mask");
    TokenSeq out;
    out.tokens = gather_rows(seq.tokens, keep);
    out.mask.assign(keep.size(), 1);
    for (int i : keep) out.tags.push_back(seq.tags[static_cast<std::size_t>(i)]);
    return out;
}

struct MemoryBank {
    std::deque<std::vector<double>> entries;  // each kCq, oldest first

    void clear() { entries.clear(); }
    void push(std::vector<double> e) {
        entries.push_back(std::move(e));
        if (entries.size() > static_cast<std::size_t>(kNMem)) entries.pop_front();
    }
};

struct EncoderParams {
    MLP agent_mlp, lane_mlp, ego_mlp, cmd_mlp;
    Linear hist_proj;       // kCq -> kCc
    Tensor scene_q;         // kNs x kCq
    Linear mem_k, mem_v;    // kCc -> kCq

    EncoderParams() = default;
    explicit EncoderParams(RandomStream& rng)
        : agent_mlp({kAgentFeat, 64, kCc}, rng),
          lane_mlp({kLaneFeat, 64, kCc}, rng),
          ego_mlp({kEgoFeat, 64, kCc}, rng),
          cmd_mlp({kCmdFeat, 64, kCc}, rng),
          hist_proj(kCq, kCc, rng),
          scene_q(Tensor::randn({kNs, kCq}, rng, 0.02, true)),
          mem_k(kCc, kCq, rng),
          mem_v(kCc, kCq, rng) {}

    void register_params(ParamRegistry& reg, const std::string& prefix = "encoder/") const {
        agent_mlp.register_params(reg, prefix + "agent");
        lane_mlp.register_params(reg, prefix + "lane");
        ego_mlp.register_params(reg, prefix + "ego");
        cmd_mlp.register_params(reg, prefix + "cmd");
        hist_proj.register_params(reg, prefix + "hist_proj");
        reg.add(prefix + "scene_q", scene_q);
        mem_k.register_params(reg, prefix + "mem_k");
        mem_v.register_params(reg, prefix + "mem_v");
    }
};

namespace encoder_detail {

// nearest-kAgentSlots agents, ascending distance (documented truncation order)
inline std::vector<const Agent*> nearest_agents(const SceneState& w) {
    std::vector<const Agent*> ptrs;
    for (const Agent& a : w.agents) ptrs.push_back(&a);
    std::stable_sort(ptrs.begin(), ptrs.end(), [&](const Agent* a, const Agent* b) {
        return (a->pos - w.ego.pos).norm() < (b->pos - w.ego.pos).norm();
    });
    if (ptrs.size() > static_cast<std::size_t>(kAgentSlots))
        ptrs.resize(static_cast<std::size_t>(kAgentSlots));
    return ptrs;
}

inline std::vector<double> agent_features(const SceneState& w) {
    std::vector<double> f(static_cast<std::size_t>(kAgentSlots) * kAgentFeat, 0.0);
    std::vector<const Agent*> near = nearest_agents(w);
    for (std::size_t i = 0; i < near.size(); ++i) {
        const Agent& a = *near[i];
        Vec2 rel = to_frame(a.pos, w.ego.pos, w.ego.heading);
        double dh = a.heading - w.ego.heading;
        double* row = f.data() + i * kAgentFeat;
        row[0] = 0.1 * rel.x;
        row[1] = 0.1 * rel.y;
        row[2] = std::cos(dh);
        row[3] = std::sin(dh);
        row[4] = 0.2 * a.speed;
        row[5] = 0.2 * a.length;
        row[6] = 0.2 * a.width;
    }
    return f;
}

// lane-boundary sample points: both edges of each lane sampled at fixed
// arclength offsets around the ego's projection, expressed in the ego frame;
// signal state is folded into every lane token (red flag, phase timer,
// distance to the stop line)
inline constexpr int kLaneOffsets = 8;
inline constexpr double kLaneOffsetAt[kLaneOffsets] = {-10, -5, 0, 5, 10, 15, 20, 30};

inline int lane_slot_count(const SceneState& w) {
    return static_cast<int>(std::min(w.lanes.size(), std::size_t(2))) * 2 * kLaneOffsets;
}

inline std::vector<double> lane_features(const SceneState& w) {
    double red = 0.0, timer = 0.0, stop_dx = 50.0;
    if (w.signal) {
        red = w.signal->red ? 1.0 : 0.0;
        timer = std::min(w.signal->timer, 30.0);
        stop_dx = std::clamp(w.signal->stop_x - w.ego.pos.x, -5.0, 50.0);
    }
    std::vector<double> f(static_cast<std::size_t>(kLaneSlots) * kLaneFeat, 0.0);
    std::size_t slot = 0;
    for (std::size_t li = 0; li < std::min(w.lanes.size(), std::size_t(2)); ++li) {
        const Lane& lane = w.lanes[li];
        double s0 = lane.center.project(w.ego.pos);
        for (int side = -1; side <= 1; side += 2)
            for (int k = 0; k < kLaneOffsets; ++k, ++slot) {
                double s = std::clamp(s0 + kLaneOffsetAt[k], 0.0, lane.center.length());
                Vec2 tan = lane.center.tangent_at(s);
                Vec2 normal{-tan.y, tan.x};
                Vec2 p = lane.center.point_at(s) + normal * (0.5 * lane.width * side);
                Vec2 rel = to_frame(p, w.ego.pos, w.ego.heading);
                Vec2 rel_tan = to_frame(tan, {0.0, 0.0}, w.ego.heading);
                double* row = f.data() + slot * kLaneFeat;
                row[0] = 0.1 * rel.x;
                row[1] = 0.1 * rel.y;
                row[2] = rel_tan.x;
                row[3] = rel_tan.y;
                row[4] = red;
                row[5] = 0.1 * timer;
                row[6] = 0.05 * stop_dx;
            }
    }
    return f;
}

}  // namespace encoder_detail

inline TokenSeq encode_scene(const SceneState& w, Command cmd, const MemoryBank& memory,
                             const EncoderParams& p) {
    TokenSeq out;
    out.mask.assign(static_cast<std::size_t>(kNc), 0);
    out.tags.assign(static_cast<std::size_t>(kNc), SlotType::Reserved);

    std::size_t n_agents = std::min(w.agents.size(), static_cast<std::size_t>(kAgentSlots));
    Tensor agent_tok = p.agent_mlp(
        Tensor::from({kAgentSlots, kAgentFeat}, encoder_detail::agent_features(w)));
    Tensor lane_tok =
        p.lane_mlp(Tensor::from({kLaneSlots, kLaneFeat}, encoder_detail::lane_features(w)));

    std::size_t n_hist = memory.entries.size();
    std::vector<double> hist_raw(static_cast<std::size_t>(kHistSlots) * kCq, 0.0);
    for (std::size_t i = 0; i < n_hist; ++i)
        std::copy(memory.entries[i].begin(), memory.entries[i].end(),
                  hist_raw.begin() + static_cast<std::ptrdiff_t>(i * kCq));
    Tensor hist_tok = p.hist_proj(Tensor::from({kHistSlots, kCq}, std::move(hist_raw)));

    std::vector<double> ego_raw{0.2 * w.ego.speed, w.ego.last_accel / 3.0,
                                w.ego.last_steer / kSteerMax};
    Tensor ego_tok = p.ego_mlp(Tensor::from({1, kEgoFeat}, std::move(ego_raw)));

    std::vector<double> cmd_raw(kCmdFeat, 0.0);
    cmd_raw[static_cast<std::size_t>(cmd)] = 1.0;
    Tensor cmd_tok = p.cmd_mlp(Tensor::from({1, kCmdFeat}, std::move(cmd_raw)));

    Tensor reserved = Tensor::zeros({kReservedSlots, kCc});
    Tensor toks = concat_rows({agent_tok, lane_tok, hist_tok, ego_tok, cmd_tok, reserved});

    // invalid slots carry exact zero vectors (bias output scrubbed)
    std::size_t s = 0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(kAgentSlots); ++i, ++s) {
        out.mask[s] = i < n_agents;
        out.tags[s] = SlotType::Agent;
    }
    int n_lane = encoder_detail::lane_slot_count(w);
    for (int i = 0; i < kLaneSlots; ++i, ++s) {
        out.mask[s] = i < n_lane;
        out.tags[s] = SlotType::Lane;
    }
    for (std::size_t i = 0; i < static_cast<std::size_t>(kHistSlots); ++i, ++s) {
        out.mask[s] = i < n_hist;
        out.tags[s] = SlotType::History;
    }
    out.mask[s] = 1;
    out.tags[s++] = SlotType::EgoStatus;
    out.mask[s] = 1;
    out.tags[s++] = SlotType::Command;

    std::vector<double> scrub(static_cast<std::size_t>(kNc) * kCc, 0.0);
    for (int r = 0; r < kNc; ++r)
        if (out.mask[static_cast<std::size_t>(r)])
            std::fill_n(scrub.begin() + static_cast<std::ptrdiff_t>(r) * kCc, kCc, 1.0);
    out.tokens = mul(toks, Tensor::from({kNc, kCc}, std::move(scrub)));
    return out;
}

// scene queries attend over the valid tokens; the mean-pooled result is
// appended to the ring buffer, detached (memory writes carry no gradient)
inline void update_memory(MemoryBank& memory, const TokenSeq& seq, const EncoderParams& p) {
    NoGradGuard ng;
    Tensor k = p.mem_k(seq.tokens);
    Tensor v = p.mem_v(seq.tokens);
    Tensor scores = scale(matmul(p.scene_q, transpose(k)), 1.0 / std::sqrt(double(kCq)));
    Tensor pooled = mean_rows(matmul(softmax_masked(scores, &seq.mask), v));
    memory.push(pooled.data());
}

}  // namespace minidrive
