#pragma once

// Ablation sweeps over the distillation config: supervision mode, mimic
// distance metric, decoder depth, encoder initialization. Every row of a
// sweep shares the dataset and the evaluation route set, so rows differ
// only in the swept key (plus the training seed when a seed list is given).

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "minidrive/bench.hpp"
#include "minidrive/train.hpp"

namespace minidrive {

struct AblationRun {
    std::string variant;
    std::uint64_t seed = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;
    double ds = 0.0;
    double sr = 0.0;  // fraction
    double efficiency = 0.0;
    double comfort = 0.0;
    OpenLoopStats open;
    std::string run_dir;
};

struct AblationMeanRow {
    std::string variant;
    int n_seeds = 0;
    double first_loss = 0.0, last_loss = 0.0;
    double ds = 0.0, sr = 0.0;
    double l2_avg = 0.0, col_avg = 0.0;
};

struct SweepResult {
    std::string kind;
    std::vector<AblationRun> runs;       // one per variant x seed
    std::vector<AblationMeanRow> table;  // one per variant, in sweep order
};

namespace ablate_detail {

struct SweepDef {
    std::string config_key;
    std::vector<std::string> values;
    std::vector<std::string> labels;
};

inline SweepDef sweep_def(const std::string& kind) {
    if (kind == "supervision")
        return {"distill.mode",
                {"gt-only", "mimic-only", "joint"},
                {"gt-only", "mimic-only", "joint"}};
    if (kind == "metric")
        return {"distill.metric", {"l1", "l2", "kl", "huber"}, {"l1", "l2", "kl", "huber"}};
    if (kind == "depth")
        return {"distill.depth", {"2", "4", "6", "8", "10"}, {"K=2", "K=4", "K=6", "K=8", "K=10"}};
    if (kind == "encoder-init")
        return {"distill.encoder_init",
                {"teacher-frozen", "random-frozen", "random-trainable"},
                {"teacher-frozen", "random-frozen", "random-trainable"}};
    throw std::invalid_argument("ablation_sweep: unknown kind '" + kind + "'");
}

inline std::string bar(double value, double lo, double hi, int width) {
    double t = hi > lo ? (value - lo) / (hi - lo) : 0.0;
    int n = static_cast<int>(std::lround(t * width));
    n = std::clamp(n, 0, width);
    return std::string(static_cast<std::size_t>(n), '#') +
           std::string(static_cast<std::size_t>(width - n), ' ');
}

}  // namespace ablate_detail

inline std::string sweep_table_text(const SweepResult& r) {
    char buf[240];
    std::string out = "sweep: " + r.kind + "\n";
    std::snprintf(buf, sizeof buf, "%-16s %5s %12s %12s %8s %7s %8s %8s\n", "variant", "seeds",
                  "loss(first)", "loss(last)", "DS", "SR%", "L2avg", "colAvg");
    out += buf;
    for (const AblationMeanRow& m : r.table) {
        std::snprintf(buf, sizeof buf, "%-16s %5d %12.4f %12.4f %8.2f %7.1f %8.4f %8.4f\n",
                      m.variant.c_str(), m.n_seeds, m.first_loss, m.last_loss, m.ds, 100.0 * m.sr,
                      m.l2_avg, m.col_avg);
        out += buf;
    }
    if (r.kind == "depth" && !r.table.empty()) {
        double lo = r.table[0].ds, hi = r.table[0].ds;
        for (const AblationMeanRow& m : r.table) {
            lo = std::min(lo, m.ds);
            hi = std::max(hi, m.ds);
        }
        out += "\nDS vs decoder depth\n";
        for (const AblationMeanRow& m : r.table) {
            std::snprintf(buf, sizeof buf, "%-5s %7.2f |%s|\n", m.variant.c_str(), m.ds,
                          ablate_detail::bar(m.ds, std::min(lo, hi - 1e-9), hi, 40).c_str());
            out += buf;
        }
    }
    return out;
}

inline nlohmann::json sweep_json(const SweepResult& r) {
    nlohmann::json j;
    j["kind"] = r.kind;
    nlohmann::json runs = nlohmann::json::array();
    for (const AblationRun& run : r.runs)
        runs.push_back({{"variant", run.variant},
                        {"seed", run.seed},
                        {"first_loss", run.first_loss},
                        {"last_loss", run.last_loss},
                        {"ds", run.ds},
                        {"sr", run.sr},
                        {"efficiency", run.efficiency},
                        {"comfort", run.comfort},
                        {"l2_avg", run.open.l2_avg},
                        {"col_avg", run.open.collision_avg},
                        {"run_dir", run.run_dir}});
    j["runs"] = runs;
    nlohmann::json table = nlohmann::json::array();
    for (const AblationMeanRow& m : r.table)
        table.push_back({{"variant", m.variant},
                         {"n_seeds", m.n_seeds},
                         {"first_loss", m.first_loss},
                         {"last_loss", m.last_loss},
                         {"ds", m.ds},
                         {"sr", m.sr},
                         {"l2_avg", m.l2_avg},
                         {"col_avg", m.col_avg}});
    j["table"] = table;
    return j;
}

// Runs one distill + eval per (variant, seed). Workers parallelize across
// whole runs; each run stays sequential so its artifacts are independent of
// the schedule.
inline SweepResult ablation_sweep(const std::string& kind, const RunConfig& base,
                                  const std::string& teacher_ckpt, const DatasetManifest& data,
                                  const std::string& out_dir,
                                  std::vector<std::uint64_t> seeds = {}, int workers = 1) {
    ablate_detail::SweepDef def = ablate_detail::sweep_def(kind);
    if (seeds.empty()) seeds.push_back(static_cast<std::uint64_t>(base.i("run.seed")));

    struct Job {
        std::string value, label;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t v = 0; v < def.values.size(); ++v)
        for (std::uint64_t s : seeds) jobs.push_back({def.values[v], def.labels[v], s});

    const std::vector<RouteSpec> routes = default_routes(base);
    const PenaltyTable pen = penalty_table(base);
    const double time_limit = base.d("eval.time_limit");

    SweepResult result;
    result.kind = kind;
    result.runs.resize(jobs.size());

    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_err;
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) break;
            {
                std::lock_guard<std::mutex> lk(err_mu);
                if (first_err) break;
            }
            try {
                const Job& job = jobs[i];
                RunConfig cfg = base;
                cfg.set(def.config_key, job.value);
                cfg.set("run.seed", std::to_string(job.seed));
                std::string dir =
                    out_dir + "/" + kind + "/" + job.value + "-s" + std::to_string(job.seed);
                std::filesystem::create_directories(dir);
                cfg.write_resolved(dir + "/config");
                DistillResult dr = distill(teacher_ckpt, data, cfg, dir);

                NeuralPolicy pol =
                    load_policy(dr.ckpt_path, static_cast<int>(cfg.i("distill.depth")));
                auto factory = [&pol]() {
                    NeuralPolicy local = pol;  // params shared, memory bank private
                    return PolicyFn([local](const SceneState& w, Command cmd) mutable {
                        return local.decide(w, cmd);
                    });
                };
                ClosedLoopSummary closed =
                    closed_loop_suite(factory, routes, time_limit, pen, {}, 1);
                OpenLoopStats open = open_loop_eval(factory(), data);

                AblationRun& row = result.runs[i];
                row.variant = job.label;
                row.seed = job.seed;
                row.first_loss = dr.first_epoch_total;
                row.last_loss = dr.last_epoch_total;
                row.ds = closed.mean_ds;
                row.sr = closed.success_rate;
                row.efficiency = closed.mean_efficiency;
                row.comfort = closed.mean_comfort;
                row.open = open;
                row.run_dir = dir;
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_err) first_err = std::current_exception();
                break;
            }
        }
    };
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < workers; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    if (first_err) std::rethrow_exception(first_err);

    for (std::size_t v = 0; v < def.values.size(); ++v) {
        AblationMeanRow m;
        m.variant = def.labels[v];
        for (const AblationRun& run : result.runs) {
            if (run.variant != def.labels[v]) continue;
            m.n_seeds += 1;
            m.first_loss += run.first_loss;
            m.last_loss += run.last_loss;
            m.ds += run.ds;
            m.sr += run.sr;
            m.l2_avg += run.open.l2_avg;
            m.col_avg += run.open.collision_avg;
        }
        if (m.n_seeds == 0) throw std::logic_error("ablation_sweep: variant produced no runs");
        double n = m.n_seeds;
        m.first_loss /= n;
        m.last_loss /= n;
        m.ds /= n;
        m.sr /= n;
        m.l2_avg /= n;
        m.col_avg /= n;
        result.table.push_back(m);
    }

    std::filesystem::create_directories(out_dir + "/" + kind);
    {
        std::ofstream f(out_dir + "/" + kind + "/table.txt", std::ios::trunc | std::ios::binary);
        f << sweep_table_text(result);
    }
    {
        std::ofstream f(out_dir + "/" + kind + "/table.json", std::ios::trunc | std::ios::binary);
        f << sweep_json(result).dump(2) << "\n";
    }
    return result;
}

}  // namespace minidrive
