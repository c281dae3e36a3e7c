#pragma once

// Training loops. train_teacher jointly fits encoder + reasoner + planner on
// the GT objectives; distill freezes the teacher side and fits the student
// decoder (and, per config, the planner / a fresh encoder) on cached teacher
// targets plus the same GT terms.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "minidrive/adamw.hpp"
#include "minidrive/checkpoint.hpp"
#include "minidrive/clips.hpp"
#include "minidrive/encoder.hpp"
#include "minidrive/losses.hpp"
#include "minidrive/runconfig.hpp"
#include "minidrive/student.hpp"
#include "minidrive/teacher.hpp"

namespace minidrive {

enum class SupervisionMode { GtOnly, MimicOnly, Joint };

inline const char* supervision_name(SupervisionMode m) {
    switch (m) {
        case SupervisionMode::GtOnly: return "gt-only";
        case SupervisionMode::MimicOnly: return "mimic-only";
        default: return "joint";
    }
}

inline SupervisionMode supervision_from_name(const std::string& s) {
    if (s == "gt-only") return SupervisionMode::GtOnly;
    if (s == "mimic-only") return SupervisionMode::MimicOnly;
    if (s == "joint") return SupervisionMode::Joint;
    throw std::invalid_argument("unknown supervision mode: " + s);
}

inline Tensor traj_tensor(const Trajectory& t) {
    Tensor out = Tensor::zeros({kHorizon, 2});
    for (int k = 0; k < kHorizon; ++k) {
        out.at(k, 0) = t.wp[static_cast<std::size_t>(k)].x;
        out.at(k, 1) = t.wp[static_cast<std::size_t>(k)].y;
    }
    return out;
}

inline Tensor traj_flat_tensor(const Trajectory& t) {
    std::vector<double> flat;
    flat.reserve(2 * kHorizon);
    for (const Vec2& p : t.wp) {
        flat.push_back(p.x);
        flat.push_back(p.y);
    }
    return Tensor::from({1, 2 * kHorizon}, std::move(flat));
}

// Everything the GT losses need about one record, precomputed once per clip.
struct GtContext {
    std::vector<AgentFutureRel> futures;  // ego frame at decision time
    double ego_y = 0.0, ego_heading = 0.0;
    double center_y = 0.0, halfwidth = 0.0;
    Tensor gt, gt_flat;  // expert plan as [H x 2] and [1 x 2H]
};

namespace train_detail {

inline const Agent* find_agent(const std::vector<Agent>& agents, int id) {
    for (const Agent& a : agents)
        if (a.id == id) return &a;
    return nullptr;
}

inline GtContext gt_context(const Clip& clip, std::size_t ri, const SceneState& base) {
    const ClipRecord& r = clip.records[ri];
    GtContext ctx;
    ctx.ego_y = r.ego.pos.y;
    ctx.ego_heading = r.ego.heading;
    ctx.center_y = base.corridor_center.point_at(base.corridor_center.project(r.ego.pos)).y;
    ctx.halfwidth = base.corridor_halfwidth;
    ctx.gt = traj_tensor(r.expert);
    ctx.gt_flat = traj_flat_tensor(r.expert);
    if (ri + static_cast<std::size_t>(kHorizon) < clip.records.size()) {
        for (const Agent& a : r.agents) {
            AgentFutureRel f;
            f.half_extent = 0.5 * a.width;
            bool complete = true;
            for (int k = 1; k <= kHorizon; ++k) {
                const Agent* fut = find_agent(clip.records[ri + static_cast<std::size_t>(k)].agents, a.id);
                if (!fut) {
                    complete = false;
                    break;
                }
                f.pos.push_back(to_frame(fut->pos, r.ego.pos, r.ego.heading));
            }
            if (complete) ctx.futures.push_back(std::move(f));
        }
    }
    return ctx;
}

struct TrainClip {
    Clip clip;
    SceneState base;
    std::vector<std::size_t> recs;  // strided record indices
    std::vector<GtContext> ctx;     // parallel to recs
};

// Control transitions (braking onsets, launches from stop) are rare under a
// plain stride yet decide closed-loop survival, so they are always kept.
// Steady cruising and idling at a stop are plentiful and stay strided.
inline bool critical_record(const ClipRecord& rec) {
    double v0 = rec.expert.wp[0].norm() / 0.5;
    double v1 = (rec.expert.wp[1] - rec.expert.wp[0]).norm() / 0.5;
    if (rec.ego.speed < 2.0) return v0 > 0.75 || v1 - v0 > 0.5;
    return v0 - v1 > 1.0 || rec.ego.speed - v0 > 1.0;
}

inline std::vector<TrainClip> load_training_clips(const DatasetManifest& data,
                                                  const RunConfig& cfg) {
    const int stride = static_cast<int>(cfg.i("train.tick_stride"));
    if (stride < 1) throw std::invalid_argument("train.tick_stride must be >= 1");
    const bool keep_critical = cfg.b("train.keep_critical");
    const long long cap = cfg.i("train.max_clips");
    std::vector<TrainClip> out;
    for (const DatasetEntry& e : data.split(true)) {
        if (cap > 0 && static_cast<long long>(out.size()) >= cap) break;
        TrainClip tc;
        tc.clip = load_clip(data.dir + "/" + e.file);
        tc.base = build_scenario(tc.clip.spec);
        for (std::size_t ri = 0; ri < tc.clip.records.size(); ++ri) {
            if (ri % static_cast<std::size_t>(stride) != 0 &&
                !(keep_critical && critical_record(tc.clip.records[ri])))
                continue;
            tc.recs.push_back(ri);
            tc.ctx.push_back(gt_context(tc.clip, ri, tc.base));
        }
        out.push_back(std::move(tc));
    }
    if (out.empty()) throw std::runtime_error("training: no train clips in " + data.dir);
    return out;
}

inline LossWeights loss_weights(const RunConfig& cfg) {
    LossWeights w;
    w.lambda_bd = cfg.d("loss.lambda_bd");
    w.lambda_reg = cfg.d("loss.lambda_reg");
    w.lambda_vae = cfg.d("loss.lambda_vae");
    w.metric = mimic_metric_from_name(cfg.s("distill.metric"));
    w.huber_delta = cfg.d("loss.huber_delta");
    w.d_safe = cfg.d("loss.d_safe");
    w.margin_bd = cfg.d("loss.margin_bd");
    return w;
}

inline AdamWConfig opt_config(const RunConfig& cfg, double lr) {
    AdamWConfig oc;
    oc.lr = lr;
    oc.beta1 = cfg.d("opt.beta1");
    oc.beta2 = cfg.d("opt.beta2");
    oc.eps = cfg.d("opt.eps");
    oc.weight_decay = cfg.d("opt.weight_decay");
    return oc;
}

inline std::vector<int> shuffled_indices(std::size_t n, RandomStream& rng) {
    std::vector<int> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
    for (std::size_t i = n; i > 1; --i) {
        int j = rng.uniform_int(0, static_cast<int>(i) - 1);
        std::swap(idx[i - 1], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

inline std::string log_line(int epoch, long long step, const LossBreakdown& br) {
    char buf[256];
    std::string s = "epoch=" + std::to_string(epoch) + " step=" + std::to_string(step);
    if (br.has_gt) {
        std::snprintf(buf, sizeof buf, " col=%.6f bd=%.6f reg=%.6f vae=%.6f", br.col, br.bd,
                      br.reg, br.vae);
        s += buf;
    }
    if (br.has_mimic) {
        std::snprintf(buf, sizeof buf, " mimic=%.6f", br.mimic);
        s += buf;
    }
    std::snprintf(buf, sizeof buf, " total=%.6f", br.total);
    s += buf;
    return s;
}

}  // namespace train_detail

struct TrainResult {
    std::string ckpt_path;
    double first_epoch_total = 0.0;
    double last_epoch_total = 0.0;
};

inline TrainResult train_teacher(const DatasetManifest& data, const RunConfig& cfg,
                                 const std::string& out_dir) {
    namespace td = train_detail;
    std::filesystem::create_directories(out_dir + "/checkpoints");

    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.i("run.seed"));
    RandomStream init_rng(derive_seed(seed, 0x7ea));
    EncoderParams enc(init_rng);
    TeacherReasoner reasoner(init_rng);
    VaePlanner planner(kCp, init_rng);
    ParamRegistry reg;
    enc.register_params(reg);
    reasoner.register_params(reg);
    planner.register_params(reg);

    AdamW opt(td::opt_config(cfg, cfg.d("teacher.lr")));
    for (const auto& [name, t] : reg.items()) opt.add_param(t);

    std::vector<td::TrainClip> clips = td::load_training_clips(data, cfg);
    LossWeights lw = td::loss_weights(cfg);
    const int epochs = static_cast<int>(cfg.i("teacher.epochs"));
    const int batch = static_cast<int>(cfg.i("teacher.batch"));
    if (epochs < 1 || batch < 1) throw std::invalid_argument("teacher epochs/batch must be >= 1");

    std::ofstream log(out_dir + "/train.log", std::ios::trunc);
    RandomStream shuffle_rng(derive_seed(seed, 0x5f1e));
    RandomStream zrng(derive_seed(seed, 0xe25));

    TrainResult res;
    res.ckpt_path = out_dir + "/checkpoints/teacher.ckpt";
    long long step = 0;
    try {
        for (int epoch = 1; epoch <= epochs; ++epoch) {
            std::size_t n_records = 0;
            for (const td::TrainClip& tc : clips) n_records += tc.recs.size();
            std::vector<int> order = td::shuffled_indices(clips.size(), shuffle_rng);

            double epoch_total = 0.0;
            std::size_t done = 0;
            int in_batch = 0;
            LossBreakdown acc;
            opt.zero_grads();
            for (int ci : order) {
                td::TrainClip& tc = clips[static_cast<std::size_t>(ci)];
                MemoryBank mem;
                std::size_t si = 0;
                // memory advances over every record (matching deployment);
                // only strided records contribute training steps
                for (std::size_t ri = 0; ri < tc.clip.records.size(); ++ri) {
                    const ClipRecord& rec = tc.clip.records[ri];
                    SceneState scene = scene_for_record(tc.base, rec);
                    if (si >= tc.recs.size() || tc.recs[si] != ri) {
                        NoGradGuard ng;
                        TokenSeq skip = encode_scene(scene, rec.command, mem, enc);
                        update_memory(mem, skip, enc);
                        continue;
                    }
                    const GtContext& ctx = tc.ctx[si];
                    ++si;
                    TokenSeq seq = encode_scene(scene, rec.command, mem, enc);
                    update_memory(mem, seq, enc);

                    Tensor tp = teacher_forward(seq, reasoner);
                    auto [mu, logvar] = vae_encode(ctx.gt_flat, tp, planner);
                    Tensor pred = vae_decode_tensor(sample_z(mu, logvar, zrng), tp, planner);
                    LossTerms terms{collision_loss(pred, ctx.futures, lw.d_safe),
                                    boundary_loss(pred, ctx.ego_y, ctx.ego_heading, ctx.center_y,
                                                  ctx.halfwidth, lw.margin_bd),
                                    reg_loss(pred, ctx.gt),
                                    kl_vae_loss(mu, logvar),
                                    Tensor::scalar(0.0)};
                    auto [total, br] = total_loss(terms, lw, false, true);

                    // size of the batch this record belongs to (final one may be short)
                    const std::size_t remaining = n_records - done;
                    const int this_batch = static_cast<int>(std::min<std::size_t>(
                        static_cast<std::size_t>(batch), remaining + static_cast<std::size_t>(in_batch)));
                    backward(scale(total, 1.0 / static_cast<double>(this_batch)));

                    acc.col += br.col;
                    acc.bd += br.bd;
                    acc.reg += br.reg;
                    acc.vae += br.vae;
                    acc.gt += br.gt;
                    acc.total += br.total;
                    epoch_total += br.total;
                    ++in_batch;
                    ++done;
                    if (in_batch == this_batch) {
                        opt.step();
                        ++step;
                        LossBreakdown mean;
                        mean.has_gt = true;
                        mean.col = acc.col / in_batch;
                        mean.bd = acc.bd / in_batch;
                        mean.reg = acc.reg / in_batch;
                        mean.vae = acc.vae / in_batch;
                        mean.total = acc.total / in_batch;
                        log << td::log_line(epoch, step, mean) << "\n";
                        acc = LossBreakdown{};
                        in_batch = 0;
                        opt.zero_grads();
                    }
                }
            }
            double mean_total = epoch_total / static_cast<double>(n_records);
            if (epoch == 1) res.first_epoch_total = mean_total;
            res.last_epoch_total = mean_total;
            log << "epoch_done=" << epoch << " mean_total=" << mean_total << "\n";
            log.flush();
        }
    } catch (const std::exception& e) {
        // parameters still hold the last completed update
        save_checkpoint(out_dir + "/checkpoints/last_good.ckpt", reg);
        throw std::runtime_error(std::string("train_teacher aborted at step ") +
                                 std::to_string(step) + ": " + e.what() +
                                 " (last-good checkpoint written)");
    }

    save_checkpoint(res.ckpt_path, reg);
    return res;
}

struct DistillResult {
    std::string ckpt_path;
    double first_epoch_total = 0.0;
    double last_epoch_total = 0.0;
    std::uint64_t frozen_hash_pre = 0;
    std::uint64_t frozen_hash_post = 0;
};

inline DistillResult distill(const std::string& teacher_ckpt, const DatasetManifest& data,
                             const RunConfig& cfg, const std::string& out_dir) {
    namespace td = train_detail;
    std::filesystem::create_directories(out_dir + "/checkpoints");

    const std::uint64_t seed = static_cast<std::uint64_t>(cfg.i("run.seed"));
    const SupervisionMode mode = supervision_from_name(cfg.s("distill.mode"));
    const bool enable_mimic = mode != SupervisionMode::GtOnly;
    const bool enable_gt = mode != SupervisionMode::MimicOnly;
    const std::string enc_init = cfg.s("distill.encoder_init");
    if (enc_init != "teacher-frozen" && enc_init != "random-frozen" &&
        enc_init != "random-trainable")
        throw std::invalid_argument("unknown distill.encoder_init: " + enc_init);
    const bool encoder_frozen = enc_init != "random-trainable";

    // teacher side, strictly frozen (shape mismatches surface in restore)
    LoadedCheckpoint ckpt = load_checkpoint(teacher_ckpt);
    RandomStream trng(derive_seed(seed, 0x7ea, 1));
    EncoderParams enc_t(trng);
    TeacherReasoner reasoner(trng);
    VaePlanner planner_t(kCp, trng);
    ParamRegistry teacher_reg;
    enc_t.register_params(teacher_reg);
    reasoner.register_params(teacher_reg);
    planner_t.register_params(teacher_reg);
    restore_params(teacher_reg, ckpt);

    std::vector<td::TrainClip> clips = td::load_training_clips(data, cfg);

    // teacher targets: deterministic function of the frozen teacher + data,
    // so they are computed once and reused every epoch
    std::vector<std::vector<std::vector<double>>> targets(clips.size());
    if (enable_mimic) {
        NoGradGuard ng;
        for (std::size_t ci = 0; ci < clips.size(); ++ci) {
            const td::TrainClip& tc = clips[ci];
            MemoryBank mem;
            std::size_t si = 0;
            for (std::size_t ri = 0; ri < tc.clip.records.size(); ++ri) {
                const ClipRecord& rec = tc.clip.records[ri];
                TokenSeq seq = encode_scene(scene_for_record(tc.base, rec), rec.command, mem, enc_t);
                update_memory(mem, seq, enc_t);
                if (si < tc.recs.size() && tc.recs[si] == ri) {
                    targets[ci].push_back(teacher_forward(seq, reasoner).data());
                    ++si;
                }
            }
        }
    }

    // student side
    RandomStream srng(derive_seed(seed, 0x57d, static_cast<std::uint64_t>(cfg.i("distill.depth"))));
    EncoderParams enc_s(srng);
    StudentParams student(static_cast<int>(cfg.i("distill.depth")), kCh, kStudentHeads, kCp, srng);
    VaePlanner planner_s(kCp, srng);
    ParamRegistry student_enc_reg, student_reg, planner_reg;
    enc_s.register_params(student_enc_reg);
    student.register_params(student_reg);
    planner_s.register_params(planner_reg);
    if (enc_init == "teacher-frozen") restore_params(student_enc_reg, ckpt, "encoder/");
    restore_params(planner_reg, ckpt, "planner/");  // pre-trained generative planner

    AdamW opt(td::opt_config(cfg, cfg.d("distill.lr")));
    for (const auto& [name, t] : student_reg.items()) opt.add_param(t);
    if (enable_gt)
        for (const auto& [name, t] : planner_reg.items()) opt.add_param(t);
    if (!encoder_frozen)
        for (const auto& [name, t] : student_enc_reg.items()) opt.add_param(t);

    auto frozen_hash = [&]() {
        std::uint64_t h = namespace_hash(teacher_reg, "");
        if (encoder_frozen) h ^= namespace_hash(student_enc_reg, "encoder/");
        if (!enable_gt) h ^= namespace_hash(planner_reg, "planner/");
        return h;
    };

    DistillResult res;
    res.ckpt_path = out_dir + "/checkpoints/student.ckpt";
    res.frozen_hash_pre = frozen_hash();

    LossWeights lw = td::loss_weights(cfg);
    const int epochs = static_cast<int>(cfg.i("distill.epochs"));
    const int batch = static_cast<int>(cfg.i("distill.batch"));
    if (epochs < 1 || batch < 1) throw std::invalid_argument("distill epochs/batch must be >= 1");

    std::ofstream log(out_dir + "/train.log", std::ios::trunc);
    RandomStream shuffle_rng(derive_seed(seed, 0x5f1e, 2));
    RandomStream zrng(derive_seed(seed, 0xe25, 2));

    long long step = 0;
    try {
        for (int epoch = 1; epoch <= epochs; ++epoch) {
            std::size_t n_records = 0;
            for (const td::TrainClip& tc : clips) n_records += tc.recs.size();
            std::vector<int> order = td::shuffled_indices(clips.size(), shuffle_rng);

            double epoch_total = 0.0;
            std::size_t done = 0;
            int in_batch = 0;
            LossBreakdown acc;
            opt.zero_grads();
            for (int ci : order) {
                td::TrainClip& tc = clips[static_cast<std::size_t>(ci)];
                MemoryBank mem;
                std::size_t si = 0;
                for (std::size_t ri = 0; ri < tc.clip.records.size(); ++ri) {
                    const ClipRecord& rec = tc.clip.records[ri];
                    SceneState scene = scene_for_record(tc.base, rec);
                    const bool trained = si < tc.recs.size() && tc.recs[si] == ri;
                    TokenSeq seq;
                    if (encoder_frozen || !trained) {
                        NoGradGuard ng;
                        seq = encode_scene(scene, rec.command, mem, enc_s);
                    } else {
                        seq = encode_scene(scene, rec.command, mem, enc_s);
                    }
                    update_memory(mem, seq, enc_s);
                    if (!trained) continue;
                    const GtContext& ctx = tc.ctx[si];
                    const std::size_t ti = si;
                    ++si;

                    Tensor ts = student_forward(seq, student);
                    LossTerms terms{Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0),
                                    Tensor::scalar(0.0), Tensor::scalar(0.0)};
                    if (enable_gt) {
                        auto [mu, logvar] = vae_encode(ctx.gt_flat, ts, planner_s);
                        Tensor pred = vae_decode_tensor(sample_z(mu, logvar, zrng), ts, planner_s);
                        terms.col = collision_loss(pred, ctx.futures, lw.d_safe);
                        terms.bd = boundary_loss(pred, ctx.ego_y, ctx.ego_heading, ctx.center_y,
                                                 ctx.halfwidth, lw.margin_bd);
                        terms.reg = reg_loss(pred, ctx.gt);
                        terms.vae = kl_vae_loss(mu, logvar);
                    }
                    if (enable_mimic) {
                        Tensor target = Tensor::from({1, kCp}, targets[static_cast<std::size_t>(ci)][ti]);
                        terms.mimic = mimic_loss(ts, target, lw.metric, lw.huber_delta);
                    }
                    auto [total, br] = total_loss(terms, lw, enable_mimic, enable_gt);

                    const std::size_t remaining = n_records - done;
                    const int this_batch = static_cast<int>(std::min<std::size_t>(
                        static_cast<std::size_t>(batch), remaining + static_cast<std::size_t>(in_batch)));
                    backward(scale(total, 1.0 / static_cast<double>(this_batch)));

                    acc.col += br.col;
                    acc.bd += br.bd;
                    acc.reg += br.reg;
                    acc.vae += br.vae;
                    acc.mimic += br.mimic;
                    acc.total += br.total;
                    epoch_total += br.total;
                    ++in_batch;
                    ++done;
                    if (in_batch == this_batch) {
                        opt.step();
                        ++step;
                        LossBreakdown mean;
                        mean.has_gt = enable_gt;
                        mean.has_mimic = enable_mimic;
                        mean.col = acc.col / in_batch;
                        mean.bd = acc.bd / in_batch;
                        mean.reg = acc.reg / in_batch;
                        mean.vae = acc.vae / in_batch;
                        mean.mimic = acc.mimic / in_batch;
                        mean.total = acc.total / in_batch;
                        log << td::log_line(epoch, step, mean) << "\n";
                        acc = LossBreakdown{};
                        in_batch = 0;
                        opt.zero_grads();
                    }
                }
            }
            double mean_total = epoch_total / static_cast<double>(n_records);
            if (epoch == 1) res.first_epoch_total = mean_total;
            res.last_epoch_total = mean_total;
            log << "epoch_done=" << epoch << " mean_total=" << mean_total << "\n";
            log.flush();
        }
    } catch (const std::exception& e) {
        ParamRegistry out_reg;
        enc_s.register_params(out_reg);
        student.register_params(out_reg);
        planner_s.register_params(out_reg);
        save_checkpoint(out_dir + "/checkpoints/last_good.ckpt", out_reg);
        throw std::runtime_error(std::string("distill aborted at step ") + std::to_string(step) +
                                 ": " + e.what() + " (last-good checkpoint written)");
    }

    // freeze integrity: frozen namespaces byte-identical, teacher untouched
    res.frozen_hash_post = frozen_hash();
    if (res.frozen_hash_post != res.frozen_hash_pre)
        throw std::runtime_error("distill: frozen parameters changed during the run");
    for (const auto& [name, t] : teacher_reg.items())
        if (t.grad() != nullptr)
            throw std::runtime_error("distill: teacher parameter acquired a grad buffer: " + name);

    ParamRegistry out_reg;
    enc_s.register_params(out_reg);
    student.register_params(out_reg);
    planner_s.register_params(out_reg);
    save_checkpoint(res.ckpt_path, out_reg);
    return res;
}

}  // namespace minidrive
