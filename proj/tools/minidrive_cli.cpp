// minidrive: single entry point for the distillation lab.
//
//   gen-data       generate the demonstration clip dataset
//   train-teacher  pretrain the teacher reasoner + VAE planner
//   distill        train a student decoder against a frozen teacher
//   eval-open      open-loop trajectory metrics on the held-out split
//   eval-closed    closed-loop route suite (DS / SR / ability tables)
//   ablate         run a config sweep (supervision, metric, depth, encoder-init)
//   report         latency + parameter accounting for teacher vs student
//   grad-check     central-difference check of every op and loss
//
// Exit codes: 0 success, 2 validation/usage error, 3 threshold violation.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "minidrive/ablate.hpp"
#include "minidrive/bench.hpp"
#include "minidrive/gradcheck.hpp"
#include "minidrive/train.hpp"

using namespace minidrive;

namespace {

const char* kUsage =
    "usage: minidrive <verb> [flags]\n"
    "\n"
    "verbs:\n"
    "  gen-data       generate the demonstration clip dataset (into data.dir)\n"
    "  train-teacher  pretrain the teacher reasoner + VAE planner\n"
    "  distill        train a student decoder against a frozen teacher\n"
    "  eval-open      open-loop L2/collision metrics on the held-out split\n"
    "  eval-closed    closed-loop route suite (DS / SR / ability tables)\n"
    "  ablate         config sweep: --kind supervision|metric|depth|encoder-init\n"
    "  report         latency + parameter accounting for teacher vs student\n"
    "  grad-check     central-difference check of every op and loss\n"
    "\n"
    "flags:\n"
    "  --config FILE      load key=value config file before overrides\n"
    "  --set KEY=VALUE    override one config key (repeatable)\n"
    "  --out DIR          output directory        (= run.out)\n"
    "  --seed N           master seed             (= run.seed)\n"
    "  --n N              clips to generate       (= data.n)\n"
    "  --data DIR         dataset directory       (= data.dir)\n"
    "  --teacher PATH     teacher checkpoint      (= io.teacher)\n"
    "  --policy PATH      policy ckpt or 'expert' (= io.policy)\n"
    "  --mode M           supervision mode        (= distill.mode)\n"
    "  --metric M         mimic metric            (= distill.metric)\n"
    "  --depth K          student decoder depth   (= distill.depth)\n"
    "  --kind KIND        ablation sweep kind (ablate only)\n"
    "  --seeds CSV        sweep training seeds    (= ablate.seeds)\n"
    "  --workers N        worker threads          (= eval.workers)\n"
    "  --help             this text plus every config key\n";

struct Cli {
    std::string verb;
    RunConfig cfg;
    std::string kind;  // ablate only
    bool help = false;
};

int usage_error(const std::string& msg) {
    std::fprintf(stderr, "minidrive: %s\n\n%s", msg.c_str(), kUsage);
    return 2;
}

// Maps sugar flags onto their config keys; returns the key or "" for
// flags with dedicated handling.
std::string flag_key(const std::string& flag) {
    if (flag == "--out") return "run.out";
    if (flag == "--seed") return "run.seed";
    if (flag == "--n") return "data.n";
    if (flag == "--data") return "data.dir";
    if (flag == "--teacher") return "io.teacher";
    if (flag == "--policy") return "io.policy";
    if (flag == "--mode") return "distill.mode";
    if (flag == "--metric") return "distill.metric";
    if (flag == "--depth") return "distill.depth";
    if (flag == "--seeds") return "ablate.seeds";
    if (flag == "--workers") return "eval.workers";
    return "";
}

Cli parse_args(int argc, char** argv) {
    Cli cli;
    if (argc < 2) throw std::invalid_argument("missing verb");
    cli.verb = argv[1];
    if (cli.verb == "--help" || cli.verb == "-h") {
        cli.help = true;
        return cli;
    }

    std::vector<std::pair<std::string, std::string>> overrides;
    std::string config_file;
    for (int i = 2; i < argc; ++i) {
        std::string a = argv[i];
        if (a == "--help" || a == "-h") {
            cli.help = true;
            continue;
        }
        auto need_value = [&](const char* what) -> std::string {
            if (i + 1 >= argc) throw std::invalid_argument(std::string(what) + " needs a value");
            return argv[++i];
        };
        if (a == "--config") {
            config_file = need_value("--config");
        } else if (a == "--set") {
            std::string kv = need_value("--set");
            std::size_t eq = kv.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("--set expects KEY=VALUE, got '" + kv + "'");
            overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        } else if (a == "--kind") {
            cli.kind = need_value("--kind");
        } else if (std::string key = flag_key(a); !key.empty()) {
            overrides.emplace_back(key, need_value(a.c_str()));
        } else {
            throw std::invalid_argument("unknown flag '" + a + "'");
        }
    }
    if (!config_file.empty()) cli.cfg.load_file(config_file);
    for (const auto& [k, v] : overrides) cli.cfg.set(k, v);
    return cli;
}

// Output directory: explicit run.out wins, else $MINIDRIVE_OUT (or "runs")
// plus a verb-derived leaf.
std::string resolve_out(const RunConfig& cfg, const std::string& leaf) {
    std::string out = cfg.s("run.out");
    if (!out.empty()) return out;
    const char* root = std::getenv("MINIDRIVE_OUT");
    return std::string(root && *root ? root : "runs") + "/" + leaf;
}

std::string prepare_out(RunConfig& cfg, const std::string& leaf) {
    std::string out = resolve_out(cfg, leaf);
    cfg.set("run.out", out);
    std::filesystem::create_directories(out);
    cfg.write_resolved(out + "/config");  // before any work
    return out;
}

ScenarioOverrides data_overrides(const RunConfig& cfg) {
    ScenarioOverrides ov;
    ov.gap_scale = cfg.d("data.gap_scale");
    ov.speed_scale = cfg.d("data.speed_scale");
    ov.trigger_scale = cfg.d("data.trigger_scale");
    return ov;
}

std::function<PolicyFn()> policy_factory(const RunConfig& cfg, NeuralPolicy* neural) {
    if (cfg.s("io.policy") == "expert") return []() { return expert_policy(); };
    return [neural]() {
        NeuralPolicy local = *neural;  // shared params, private memory bank
        return PolicyFn(
            [local](const SceneState& w, Command cmd) mutable { return local.decide(w, cmd); });
    };
}

// Loads io.policy unless it is the expert; depth for student checkpoints
// comes from distill.depth.
std::optional<NeuralPolicy> maybe_load_policy(const RunConfig& cfg) {
    std::string spec = cfg.s("io.policy");
    if (spec == "expert") return std::nullopt;
    if (!std::filesystem::exists(spec))
        throw std::invalid_argument("io.policy checkpoint not found: " + spec);
    return load_policy(spec, static_cast<int>(cfg.i("distill.depth")));
}

int verb_gen_data(RunConfig cfg) {
    std::string dir = cfg.s("data.dir");
    std::filesystem::create_directories(dir);
    cfg.write_resolved(dir + "/config");
    DatasetManifest m = generate_clips(static_cast<int>(cfg.i("data.n")),
                                       static_cast<std::uint64_t>(cfg.i("run.seed")), dir,
                                       data_overrides(cfg), cfg.d("data.perturb"));
    std::printf("gen-data: %zu clips -> %s (train %zu, val %zu)\n", m.entries.size(), dir.c_str(),
                m.split(true).size(), m.split(false).size());
    return 0;
}

int verb_train_teacher(RunConfig cfg) {
    std::string out = prepare_out(cfg, "teacher");
    DatasetManifest data = load_manifest(cfg.s("data.dir"));
    TrainResult r = train_teacher(data, cfg, out);
    std::printf("train-teacher: loss %.6f -> %.6f, checkpoint %s\n", r.first_epoch_total,
                r.last_epoch_total, r.ckpt_path.c_str());
    return 0;
}

int verb_distill(RunConfig cfg) {
    std::string teacher = cfg.s("io.teacher");
    if (!std::filesystem::exists(teacher))
        throw std::invalid_argument("io.teacher checkpoint not found: " + teacher);
    std::string out = prepare_out(cfg, "distill");
    DatasetManifest data = load_manifest(cfg.s("data.dir"));
    DistillResult r = distill(teacher, data, cfg, out);
    std::printf("distill: mode=%s loss %.6f -> %.6f, checkpoint %s\n",
                cfg.s("distill.mode").c_str(), r.first_epoch_total, r.last_epoch_total,
                r.ckpt_path.c_str());
    return 0;
}

int verb_eval_open(RunConfig cfg) {
    std::string out = prepare_out(cfg, "eval-open");
    DatasetManifest data = load_manifest(cfg.s("data.dir"));
    std::optional<NeuralPolicy> neural = maybe_load_policy(cfg);
    PolicyFn policy = policy_factory(cfg, neural ? &*neural : nullptr)();

    BenchmarkReport rep;
    rep.config_hash = cfg.hash_hex();
    rep.penalties = penalty_table(cfg);
    rep.open = open_loop_eval(policy, data);
    emit_report(rep, out);
    const OpenLoopStats& o = *rep.open;
    std::printf("eval-open: L2 %.4f/%.4f/%.4f avg %.4f  col avg %.4f  (%d records) -> %s\n",
                o.l2[0], o.l2[1], o.l2[2], o.l2_avg, o.collision_avg, o.n_records, out.c_str());
    double max_l2 = cfg.d("gate.max_l2_avg");
    if (max_l2 >= 0.0 && o.l2_avg > max_l2) {
        std::fprintf(stderr, "gate: open-loop avg L2 %.4f exceeds %.4f\n", o.l2_avg, max_l2);
        return 3;
    }
    return 0;
}

int verb_eval_closed(RunConfig cfg) {
    std::string out = prepare_out(cfg, "eval-closed");
    std::optional<NeuralPolicy> neural = maybe_load_policy(cfg);

    BenchmarkReport rep;
    rep.config_hash = cfg.hash_hex();
    rep.penalties = penalty_table(cfg);
    rep.closed = closed_loop_suite(policy_factory(cfg, neural ? &*neural : nullptr),
                                   default_routes(cfg), cfg.d("eval.time_limit"), rep.penalties,
                                   {}, static_cast<int>(cfg.i("eval.workers")));
    emit_report(rep, out);
    const ClosedLoopSummary& c = *rep.closed;
    std::printf("eval-closed: DS %.2f  SR %.2f%%  Eff %.2f  Comfort %.2f  ability %.1f -> %s\n",
                c.mean_ds, 100.0 * c.success_rate, c.mean_efficiency, c.mean_comfort,
                c.ability.mean, out.c_str());
    double min_ds = cfg.d("gate.min_ds"), min_sr = cfg.d("gate.min_sr");
    if (min_ds >= 0.0 && c.mean_ds < min_ds) {
        std::fprintf(stderr, "gate: DS %.2f below %.2f\n", c.mean_ds, min_ds);
        return 3;
    }
    if (min_sr >= 0.0 && c.success_rate < min_sr) {
        std::fprintf(stderr, "gate: SR %.3f below %.3f\n", c.success_rate, min_sr);
        return 3;
    }
    return 0;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::string cur;
    for (char ch : csv + ",") {
        if (ch == ',') {
            if (!cur.empty()) seeds.push_back(std::stoull(cur));
            cur.clear();
        } else if (ch != ' ') {
            cur += ch;
        }
    }
    return seeds;
}

int verb_ablate(RunConfig cfg, const std::string& kind) {
    if (kind.empty())
        throw std::invalid_argument("ablate needs --kind supervision|metric|depth|encoder-init");
    std::string teacher = cfg.s("io.teacher");
    if (!std::filesystem::exists(teacher))
        throw std::invalid_argument("io.teacher checkpoint not found: " + teacher);
    std::string out = prepare_out(cfg, "ablate");
    DatasetManifest data = load_manifest(cfg.s("data.dir"));
    SweepResult r = ablation_sweep(kind, cfg, teacher, data, out,
                                   parse_seed_list(cfg.s("ablate.seeds")),
                                   static_cast<int>(cfg.i("eval.workers")));
    std::fputs(sweep_table_text(r).c_str(), stdout);
    std::printf("ablate: %zu runs -> %s/%s\n", r.runs.size(), out.c_str(), kind.c_str());
    return 0;
}

int verb_report(RunConfig cfg) {
    std::string teacher = cfg.s("io.teacher");
    if (!std::filesystem::exists(teacher))
        throw std::invalid_argument("io.teacher checkpoint not found: " + teacher);
    std::string out = prepare_out(cfg, "report");

    BenchmarkReport rep;
    rep.config_hash = cfg.hash_hex();
    rep.penalties = penalty_table(cfg);
    int warmup = static_cast<int>(cfg.i("latency.warmup"));
    int samples = static_cast<int>(cfg.i("latency.samples"));

    NeuralPolicy tp = load_policy(teacher);
    rep.latency_teacher = measure_latency(tp, warmup, samples);
    std::string student = cfg.s("io.policy");
    if (student != "expert") {
        if (!std::filesystem::exists(student))
            throw std::invalid_argument("io.policy checkpoint not found: " + student);
        NeuralPolicy sp = load_policy(student, static_cast<int>(cfg.i("distill.depth")));
        rep.latency_student = measure_latency(sp, warmup, samples);
    }
    emit_report(rep, out);
    std::fputs(report_text(rep).c_str(), stdout);

    if (rep.latency_student) {
        double speedup =
            rep.latency_teacher->reasoner_median_ms / rep.latency_student->reasoner_median_ms;
        double min_speedup = cfg.d("gate.min_speedup");
        if (min_speedup >= 0.0 && speedup < min_speedup) {
            std::fprintf(stderr, "gate: reasoner speedup %.2fx below %.2fx\n", speedup,
                         min_speedup);
            return 3;
        }
    }
    return 0;
}

int verb_grad_check(RunConfig cfg) {
    std::string out = prepare_out(cfg, "grad-check");
    GradBatteryResult r = run_grad_battery(static_cast<int>(cfg.i("gradcheck.trials")));
    {
        std::ofstream f(out + "/gradcheck.txt", std::ios::trunc | std::ios::binary);
        char buf[160];
        for (const GradBatteryItem& it : r.items) {
            std::snprintf(buf, sizeof buf, "%-24s %.3e\n", it.name.c_str(), it.rel_err);
            f << buf;
        }
    }
    std::printf("grad-check: %d checks over %d trials, max rel err %.3e (%s)\n", r.checks,
                r.trials, r.max_rel_err, r.worst_name.c_str());
    double gate = cfg.d("gate.max_grad_err");
    if (r.max_rel_err >= gate) {
        std::fprintf(stderr, "gate: max rel err %.3e >= %.3e\n", r.max_rel_err, gate);
        return 3;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    Cli cli;
    try {
        cli = parse_args(argc, argv);
    } catch (const std::exception& e) {
        return usage_error(e.what());
    }
    if (cli.help) {
        std::fputs(kUsage, stdout);
        std::fputs("\nconfig keys (defaults shown):\n", stdout);
        std::fputs(config_help().c_str(), stdout);
        return 0;
    }
    try {
        if (cli.verb == "gen-data") return verb_gen_data(cli.cfg);
        if (cli.verb == "train-teacher") return verb_train_teacher(cli.cfg);
        if (cli.verb == "distill") return verb_distill(cli.cfg);
        if (cli.verb == "eval-open") return verb_eval_open(cli.cfg);
        if (cli.verb == "eval-closed") return verb_eval_closed(cli.cfg);
        if (cli.verb == "ablate") return verb_ablate(cli.cfg, cli.kind);
        if (cli.verb == "report") return verb_report(cli.cfg);
        if (cli.verb == "grad-check") return verb_grad_check(cli.cfg);
        return usage_error("unknown verb '" + cli.verb + "'");
    } catch (const std::exception& e) {
        std::fprintf(stderr, "minidrive %s: %s\n", cli.verb.c_str(), e.what());
        return 2;
    }
}
