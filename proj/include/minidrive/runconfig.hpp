#pragma once

// Flat, typed key=value run configuration. Section prefixes are dotted key
// names; overrides win over the file, the file wins over defaults. The
// resolved document serializes in sorted key order, so equal configs hash
// equal and diffs stay line-local.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace minidrive {

enum class CfgType { Int, Double, Bool, Str };

struct CfgKey {
    const char* name;
    CfgType type;
    const char* def;
    const char* help;
};

inline const std::vector<CfgKey>& config_schema() {
    static const std::vector<CfgKey> schema = {
        {"run.seed", CfgType::Int, "1", "master seed for the whole run"},
        {"run.out", CfgType::Str, "",
         "output directory (empty = $MINIDRIVE_OUT or runs, plus the verb name)"},

        {"io.teacher", CfgType::Str, "runs/teacher/checkpoints/teacher.ckpt",
         "teacher checkpoint consumed by distill/ablate/report"},
        {"io.policy", CfgType::Str, "expert",
         "policy to evaluate: 'expert' or a checkpoint path"},

        {"data.dir", CfgType::Str, "data", "clip dataset directory"},
        {"data.n", CfgType::Int, "200", "number of demonstration clips to generate"},
        {"data.gap_scale", CfgType::Double, "1", "scenario difficulty: inter-agent gap scale"},
        {"data.speed_scale", CfgType::Double, "1", "scenario difficulty: agent speed scale"},
        {"data.trigger_scale", CfgType::Double, "1", "scenario difficulty: event trigger scale"},
        {"data.perturb", CfgType::Double, "0.25",
         "per-decision probability of a recovery kick while recording clips"},

        {"teacher.epochs", CfgType::Int, "30", "teacher pretraining epochs"},
        {"teacher.batch", CfgType::Int, "32", "teacher batch size (records)"},
        {"teacher.lr", CfgType::Double, "0.0003", "teacher AdamW learning rate"},

        {"distill.mode", CfgType::Str, "joint", "supervision: gt-only | mimic-only | joint"},
        {"distill.metric", CfgType::Str, "l2", "mimic metric: l1 | l2 | kl | huber"},
        {"distill.depth", CfgType::Int, "6", "student decoder depth K"},
        {"distill.encoder_init", CfgType::Str, "teacher-frozen",
         "encoder weights: teacher-frozen | random-frozen | random-trainable"},
        {"distill.epochs", CfgType::Int, "20", "distillation epochs"},
        {"distill.batch", CfgType::Int, "32", "distillation batch size (records)"},
        {"distill.lr", CfgType::Double, "0.0005", "distillation AdamW learning rate"},

        {"opt.weight_decay", CfgType::Double, "0.01", "AdamW weight decay"},
        {"opt.beta1", CfgType::Double, "0.9", "AdamW beta1"},
        {"opt.beta2", CfgType::Double, "0.999", "AdamW beta2"},
        {"opt.eps", CfgType::Double, "1e-08", "AdamW epsilon"},

        {"loss.lambda_bd", CfgType::Double, "3", "boundary loss weight"},
        {"loss.lambda_reg", CfgType::Double, "3", "regression loss weight"},
        {"loss.lambda_vae", CfgType::Double, "3", "VAE KL loss weight"},
        {"loss.huber_delta", CfgType::Double, "1", "Huber delta for the mimic metric"},
        {"loss.d_safe", CfgType::Double, "2", "collision loss safety radius [m]"},
        {"loss.margin_bd", CfgType::Double, "0.3", "boundary loss margin [m]"},

        {"train.max_clips", CfgType::Int, "0", "cap on training clips (0 = all)"},
        {"train.tick_stride", CfgType::Int, "1", "use every n-th record of each clip"},
        {"train.keep_critical", CfgType::Bool, "true",
         "always train on near-agent/braking/stopped records regardless of stride"},

        {"eval.routes_per_kind", CfgType::Int, "20", "closed-loop routes per scenario kind"},
        {"eval.time_limit", CfgType::Double, "120", "closed-loop episode limit [sim s]"},
        {"eval.seed_base", CfgType::Int, "10000", "first evaluation route seed (held out)"},
        {"eval.workers", CfgType::Int, "1", "episode worker threads"},

        {"latency.warmup", CfgType::Int, "5", "discarded warmup decisions"},
        {"latency.samples", CfgType::Int, "50", "timed decisions per latency row"},

        {"ablate.seeds", CfgType::Str, "",
         "comma-separated training seeds for sweeps (empty = run.seed)"},
        {"gradcheck.trials", CfgType::Int, "20", "random seeds per gradient-check item"},

        {"penalty.collision_vehicle", CfgType::Double, "0.6", "DS factor: vehicle collision"},
        {"penalty.collision_static", CfgType::Double, "0.65", "DS factor: static collision"},
        {"penalty.red_light", CfgType::Double, "0.7", "DS factor: red-light violation"},
        {"penalty.off_road", CfgType::Double, "0.65", "DS factor: off-road"},
        {"penalty.route_deviation", CfgType::Double, "0.7", "DS factor: route deviation"},
        {"penalty.timeout", CfgType::Double, "0.7", "DS factor: timeout"},

        {"gate.min_ds", CfgType::Double, "-1", "fail run if mean DS below this (-1 = off)"},
        {"gate.min_sr", CfgType::Double, "-1", "fail run if SR below this (-1 = off)"},
        {"gate.max_l2_avg", CfgType::Double, "-1", "fail run if open-loop avg L2 above this"},
        {"gate.min_speedup", CfgType::Double, "-1",
         "fail report if reasoner median speedup below this"},
        {"gate.max_grad_err", CfgType::Double, "0.0001", "grad-check max relative error"},
    };
    return schema;
}

namespace cfg_detail {

inline const CfgKey& schema_entry(const std::string& name) {
    for (const CfgKey& k : config_schema())
        if (name == k.name) return k;
    throw std::invalid_argument("config: unknown key '" + name + "'");
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::string canonical(const CfgKey& key, const std::string& raw) {
    const std::string v = trim(raw);
    switch (key.type) {
        case CfgType::Int: {
            std::size_t used = 0;
            long long x;
            try {
                x = std::stoll(v, &used);
            } catch (const std::exception&) {
                throw std::invalid_argument(std::string("config: ") + key.name +
                                            " expects an integer, got '" + v + "'");
            }
            if (used != v.size())
                throw std::invalid_argument(std::string("config: ") + key.name +
                                            " expects an integer, got '" + v + "'");
            return std::to_string(x);
        }
        case CfgType::Double: {
            std::size_t used = 0;
            double x;
            try {
                x = std::stod(v, &used);
            } catch (const std::exception&) {
                throw std::invalid_argument(std::string("config: ") + key.name +
                                            " expects a number, got '" + v + "'");
            }
            if (used != v.size())
                throw std::invalid_argument(std::string("config: ") + key.name +
                                            " expects a number, got '" + v + "'");
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", x);
            return buf;
        }
        case CfgType::Bool:
            if (v == "true" || v == "1") return "true";
            if (v == "false" || v == "0") return "false";
            throw std::invalid_argument(std::string("config: ") + key.name +
                                        " expects true/false, got '" + v + "'");
        case CfgType::Str:
            return v;  // empty means "unset" for optional keys
    }
    throw std::logic_error("config: unreachable");
}

}  // namespace cfg_detail

class RunConfig {
  public:
    RunConfig() {
        for (const CfgKey& k : config_schema())
            values_[k.name] = cfg_detail::canonical(k, k.def);
    }

    // "key = value" lines, '#' comments; unknown keys and type errors throw
    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::invalid_argument("config: cannot open " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            std::string s = line.substr(0, line.find('#'));
            s = cfg_detail::trim(s);
            if (s.empty()) continue;
            std::size_t eq = s.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("config: " + path + ":" + std::to_string(lineno) +
                                            ": expected key = value");
            set(cfg_detail::trim(s.substr(0, eq)), s.substr(eq + 1));
        }
    }

    void set(const std::string& key, const std::string& value) {
        const CfgKey& k = cfg_detail::schema_entry(key);
        values_[k.name] = cfg_detail::canonical(k, value);
    }

    // "key=value" as passed on a command line
    void apply_override(const std::string& assignment) {
        std::size_t eq = assignment.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: override '" + assignment +
                                        "' is not key=value");
        set(cfg_detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
    }

    long long i(const std::string& key) const { return std::stoll(raw(key, CfgType::Int)); }
    double d(const std::string& key) const { return std::stod(raw(key, CfgType::Double)); }
    bool b(const std::string& key) const { return raw(key, CfgType::Bool) == "true"; }
    const std::string& s(const std::string& key) const { return raw(key, CfgType::Str); }

    // sorted canonical document (std::map iterates in key order)
    std::string serialize() const {
        std::ostringstream out;
        for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
        return out.str();
    }

    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : serialize()) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return h;
    }

    std::string hash_hex() const {
        char buf[20];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash()));
        return buf;
    }

    void write_resolved(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw std::runtime_error("config: cannot write " + path);
        f << serialize();
        if (!f) throw std::runtime_error("config: write failed: " + path);
    }

  private:
    const std::string& raw(const std::string& key, CfgType want) const {
        const CfgKey& k = cfg_detail::schema_entry(key);
        if (k.type != want)
            throw std::invalid_argument("config: key '" + key + "' accessed with wrong type");
        return values_.at(k.name);
    }

    std::map<std::string, std::string> values_;
};

inline std::string config_help() {
    std::ostringstream out;
    const char* tn[] = {"int", "float", "bool", "str"};
    for (const CfgKey& k : config_schema()) {
        char head[72];
        std::snprintf(head, sizeof head, "  %-26s %-5s default=%-14s", k.name,
                      tn[static_cast<int>(k.type)], k.def);
        out << head << k.help << "\n";
    }
    return out.str();
}

}  // namespace minidrive
