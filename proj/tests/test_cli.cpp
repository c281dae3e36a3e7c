#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "minidrive/clips.hpp"
#include "minidrive/runconfig.hpp"

using namespace minidrive;

namespace {

namespace fs = std::filesystem;

fs::path scratch() {
    static fs::path p = [] {
        fs::path r = fs::temp_directory_path() / "md_cli_test";
        fs::remove_all(r);
        fs::create_directories(r);
        return r;
    }();
    return p;
}

struct CliResult {
    int code = -1;
    std::string text;
};

// Runs the binary inside the scratch dir; env can prefix variable bindings.
CliResult run_cli(const std::string& args, const std::string& env = "") {
    static int n = 0;
    fs::path log = scratch() / ("log" + std::to_string(n++) + ".txt");
    std::string cmd = "cd '" + scratch().string() + "' && " + (env.empty() ? "" : env + " ") +
                      "'" MD_CLI_PATH "' " + args + " >'" + log.string() + "' 2>&1";
    int st = std::system(cmd.c_str());
    CliResult r;
    if (WIFEXITED(st)) r.code = WEXITSTATUS(st);
    std::ifstream f(log);
    std::stringstream ss;
    ss << f.rdbuf();
    r.text = ss.str();
    return r;
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("cli: usage and validation errors exit 2") {
    CHECK(run_cli("").code == 2);
    CHECK(run_cli("frobnicate").code == 2);
    CliResult r = run_cli("eval-closed --frobnicate 1");
    CHECK(r.code == 2);
    CHECK(r.text.find("unknown flag") != std::string::npos);
    CHECK(run_cli("gen-data --set data.n=many").code == 2);
    CHECK(run_cli("gen-data --set data.n").code == 2);
    CHECK(run_cli("gen-data --set nonsense").code == 2);
    CHECK(run_cli("distill --teacher missing.ckpt --data nowhere").code == 2);
    CHECK(run_cli("eval-open --data nowhere").code == 2);
    CHECK(run_cli("ablate --teacher missing.ckpt").code == 2);  // --kind missing first
}

TEST_CASE("cli: help lists verbs and every config key") {
    CliResult r = run_cli("--help");
    REQUIRE(r.code == 0);
    for (const char* verb : {"gen-data", "train-teacher", "distill", "eval-open", "eval-closed",
                             "ablate", "report", "grad-check"})
        CHECK(r.text.find(verb) != std::string::npos);
    for (const CfgKey& k : config_schema()) {
        INFO(k.name);
        CHECK(r.text.find(k.name) != std::string::npos);
    }
    CHECK(run_cli("eval-closed --help").code == 0);
}

TEST_CASE("cli: gen-data is deterministic and writes its resolved config first") {
    REQUIRE(run_cli("gen-data --data ds1 --n 3 --seed 9").code == 0);
    REQUIRE(run_cli("gen-data --data ds2 --n 3 --seed 9").code == 0);
    REQUIRE(run_cli("gen-data --data ds3 --n 3 --seed 10").code == 0);

    CHECK(slurp(scratch() / "ds1" / "dataset.json") == slurp(scratch() / "ds2" / "dataset.json"));
    DatasetManifest m = load_manifest((scratch() / "ds1").string());
    REQUIRE(m.entries.size() == 3);
    for (const DatasetEntry& e : m.entries)
        CHECK(slurp(scratch() / "ds1" / e.file) == slurp(scratch() / "ds2" / e.file));
    CHECK(slurp(scratch() / "ds1" / "dataset.json") != slurp(scratch() / "ds3" / "dataset.json"));

    RunConfig resolved;
    resolved.load_file((scratch() / "ds1" / "config").string());
    CHECK(resolved.i("data.n") == 3);
    CHECK(resolved.i("run.seed") == 9);
}

TEST_CASE("cli: eval-closed runs the expert, honors gates and $MINIDRIVE_OUT") {
    CliResult ok = run_cli("eval-closed --out ev1 --set eval.routes_per_kind=1");
    REQUIRE(ok.code == 0);
    CHECK(ok.text.find("eval-closed: DS") != std::string::npos);
    CHECK(fs::exists(scratch() / "ev1" / "config"));
    CHECK(fs::exists(scratch() / "ev1" / "report.json"));
    CHECK(fs::exists(scratch() / "ev1" / "report.txt"));

    CliResult gated =
        run_cli("eval-closed --out ev2 --set eval.routes_per_kind=1 --set gate.min_ds=100.5");
    CHECK(gated.code == 3);
    CHECK(gated.text.find("gate:") != std::string::npos);
    // the run itself still produced its artifacts before the gate fired
    CHECK(fs::exists(scratch() / "ev2" / "report.json"));

    CliResult env = run_cli("eval-closed --set eval.routes_per_kind=1", "MINIDRIVE_OUT=envroot");
    REQUIRE(env.code == 0);
    CHECK(fs::exists(scratch() / "envroot" / "eval-closed" / "config"));
}

TEST_CASE("cli: grad-check reports the battery and gates on the threshold") {
    CliResult ok = run_cli("grad-check --out gc1 --set gradcheck.trials=2");
    REQUIRE(ok.code == 0);
    CHECK(ok.text.find("max rel err") != std::string::npos);
    CHECK(fs::exists(scratch() / "gc1" / "gradcheck.txt"));

    CliResult gated =
        run_cli("grad-check --out gc2 --set gradcheck.trials=2 --set gate.max_grad_err=1e-18");
    CHECK(gated.code == 3);
}

TEST_CASE("cli: train/distill/eval/report round-trip on a tiny dataset") {
    const std::string tiny =
        " --set train.max_clips=1 --set train.tick_stride=8 --set teacher.epochs=1"
        " --set teacher.batch=8 --set distill.epochs=1 --set distill.batch=8";
    REQUIRE(run_cli("gen-data --data ds4 --n 3 --seed 21").code == 0);
    REQUIRE(run_cli("train-teacher --data ds4 --out tt" + tiny).code == 0);
    REQUIRE(fs::exists(scratch() / "tt" / "checkpoints" / "teacher.ckpt"));

    REQUIRE(run_cli("distill --data ds4 --teacher tt/checkpoints/teacher.ckpt --out st" + tiny)
                .code == 0);
    REQUIRE(fs::exists(scratch() / "st" / "checkpoints" / "student.ckpt"));

    CHECK(run_cli("eval-open --data ds4 --teacher tt/checkpoints/teacher.ckpt"
                  " --policy st/checkpoints/student.ckpt --out eo1")
              .code == 0);

    CliResult rep = run_cli(
        "report --teacher tt/checkpoints/teacher.ckpt --policy st/checkpoints/student.ckpt"
        " --out rep1 --set latency.samples=30 --set latency.warmup=2");
    REQUIRE(rep.code == 0);
    CHECK(rep.text.find("speedup") != std::string::npos);
    CHECK(fs::exists(scratch() / "rep1" / "report.json"));

    CliResult gated = run_cli(
        "report --teacher tt/checkpoints/teacher.ckpt --policy st/checkpoints/student.ckpt"
        " --out rep2 --set latency.samples=30 --set latency.warmup=2"
        " --set gate.min_speedup=10000");
    CHECK(gated.code == 3);
}
