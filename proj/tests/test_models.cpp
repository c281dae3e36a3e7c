#include <catch2/catch_amalgamated.hpp>

#include "minidrive/encoder.hpp"
#include "minidrive/losses.hpp"
#include "minidrive/scenarios.hpp"
#include "minidrive/student.hpp"
#include "minidrive/teacher.hpp"

using namespace minidrive;

namespace {

struct Fixture {
    EncoderParams enc;
    TokenSeq seq;

    explicit Fixture(std::uint64_t seed, ScenarioKind kind = ScenarioKind::Merging) {
        RandomStream rng(derive_seed(seed, 0x30d));
        enc = EncoderParams(rng);
        SceneState w = build_scenario({kind, seed, {}});
        MemoryBank mem;
        update_memory(mem, encode_scene(w, Command::Straight, mem, enc), enc);
        NoGradGuard ng;
        seq = encode_scene(w, Command::Straight, mem, enc);
    }
};

TokenSeq pad_masked(const TokenSeq& seq, int extra) {
    TokenSeq out;
    out.tokens = concat_rows({seq.tokens, Tensor::zeros({extra, seq.tokens.cols()})});
    out.mask = seq.mask;
    out.tags = seq.tags;
    for (int i = 0; i < extra; ++i) {
        out.mask.push_back(0);
        out.tags.push_back(SlotType::Reserved);
    }
    return out;
}

}  // namespace

TEST_CASE("teacher forward: shape, determinism, masked-padding inertness") {
    Fixture f(3);
    RandomStream rng(derive_seed(3, 0x7ea));
    TeacherReasoner t(rng);

    NoGradGuard ng;
    Tensor tp = teacher_forward(f.seq, t);
    REQUIRE(tp.rows() == 1);
    REQUIRE(tp.cols() == kCp);

    Tensor tp2 = teacher_forward(f.seq, t);
    CHECK(tp.data() == tp2.data());

    Tensor tp3 = teacher_forward(pad_masked(f.seq, 5), t);
    CHECK(tp.data() == tp3.data());

    TokenSeq empty = f.seq;
    std::fill(empty.mask.begin(), empty.mask.end(), 0);
    CHECK_THROWS_AS(teacher_forward(empty, t), std::invalid_argument);
}

TEST_CASE("teacher parameter budget dwarfs the default student") {
    RandomStream rng(derive_seed(5, 0x7ea));
    TeacherReasoner t(rng);
    StudentParams s(rng);
    std::size_t ts = t.param_count();
    std::size_t ss = count_params(s);
    CHECK(ts >= 10 * ss);
    CHECK(ss * 10 <= ts);  // criterion 8 phrasing: student <= 10% of teacher
}

TEST_CASE("vae posterior: dims, determinism, clamped logvar, sensitivity") {
    RandomStream rng(derive_seed(7, 0x7ea));
    VaePlanner p(kCp, rng);
    Tensor cond = Tensor::randn({1, kCp}, rng);

    NoGradGuard ng;
    std::vector<double> flat(2 * kHorizon);
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = 0.3 * static_cast<double>(i);
    Tensor traj = Tensor::from({1, 2 * kHorizon}, flat);

    auto [mu, logvar] = vae_encode(traj, cond, p);
    REQUIRE(mu.cols() == kDz);
    REQUIRE(logvar.cols() == kDz);
    for (int j = 0; j < kDz; ++j) {
        CHECK(logvar.at(0, j) <= kLogvarClamp);
        CHECK(logvar.at(0, j) >= -kLogvarClamp);
    }

    auto [mu2, lv2] = vae_encode(traj, cond, p);
    CHECK(mu.data() == mu2.data());

    std::vector<double> flat_b = flat;
    flat_b[3] += 2.0;
    auto [mu3, lv3] = vae_encode(Tensor::from({1, 2 * kHorizon}, flat_b), cond, p);
    CHECK(mu.data() != mu3.data());
}

TEST_CASE("vae decode is deterministic and structurally feasible") {
    RandomStream rng(derive_seed(9, 0x7ea));
    VaePlanner p(kCp, rng);

    NoGradGuard ng;
    for (int trial = 0; trial < 50; ++trial) {
        Tensor cond = Tensor::randn({1, kCp}, rng, 3.0);
        std::vector<double> z(kDz);
        for (double& v : z) v = 4.0 * rng.normal();
        Trajectory traj = vae_decode(z, cond, p);
        CHECK(trajectory_feasible(traj));
        Trajectory again = vae_decode(z, cond, p);
        for (int k = 0; k < kHorizon; ++k) {
            CHECK(traj.wp[static_cast<std::size_t>(k)].x == again.wp[static_cast<std::size_t>(k)].x);
            CHECK(traj.wp[static_cast<std::size_t>(k)].y == again.wp[static_cast<std::size_t>(k)].y);
        }
    }
}

TEST_CASE("plan modes: mean deterministic, sampling seeded with spread") {
    Fixture f(11);
    RandomStream rng(derive_seed(11, 0x7ea));
    TeacherReasoner t(rng);
    VaePlanner p(kCp, rng);

    Trajectory m1 = plan(f.seq, t, p, PlanMode::Mean);
    Trajectory m2 = plan(f.seq, t, p, PlanMode::Mean);
    for (int k = 0; k < kHorizon; ++k)
        CHECK((m1.wp[static_cast<std::size_t>(k)] - m2.wp[static_cast<std::size_t>(k)]).norm() == 0.0);

    Trajectory s1 = plan(f.seq, t, p, PlanMode::Sample, 42);
    Trajectory s2 = plan(f.seq, t, p, PlanMode::Sample, 42);
    for (int k = 0; k < kHorizon; ++k)
        CHECK((s1.wp[static_cast<std::size_t>(k)] - s2.wp[static_cast<std::size_t>(k)]).norm() == 0.0);

    double spread = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Trajectory s = plan(f.seq, t, p, PlanMode::Sample, seed);
        for (int k = 0; k < kHorizon; ++k)
            spread = std::max(spread, (s.wp[static_cast<std::size_t>(k)] - m1.wp[static_cast<std::size_t>(k)]).norm());
    }
    CHECK(spread > 0.0);
}

TEST_CASE("student forward: shape, inertness, determinism") {
    Fixture f(13);
    RandomStream rng(derive_seed(13, 0x57d));
    StudentParams s(rng);

    NoGradGuard ng;
    Tensor out = student_forward(f.seq, s);
    REQUIRE(out.rows() == 1);
    REQUIRE(out.cols() == kCp);

    CHECK(out.data() == student_forward(f.seq, s).data());
    CHECK(out.data() == student_forward(pad_masked(f.seq, 7), s).data());

    auto [compressed, mask] = input_project(f.seq, s);
    CHECK(compressed.rows() == kNc);
    CHECK(compressed.cols() == s.width);
    CHECK(mask == f.seq.mask);

    TokenSeq empty = f.seq;
    std::fill(empty.mask.begin(), empty.mask.end(), 0);
    CHECK_THROWS_AS(student_forward(empty, s), std::invalid_argument);
}

TEST_CASE("student K=0 output is independent of the scene") {
    RandomStream rng(derive_seed(17, 0x57d));
    StudentParams s(0, kCh, kStudentHeads, kCp, rng);

    Fixture fa(17, ScenarioKind::Merging);
    Fixture fb(17, ScenarioKind::EmergencyBrake);
    NoGradGuard ng;
    Tensor oa = student_forward(fa.seq, s);
    Tensor ob = student_forward(fb.seq, s);
    CHECK(oa.data() == ob.data());

    Tensor manual = s.out_proj(s.final_ln(s.q_plan));
    CHECK(oa.data() == manual.data());
}

TEST_CASE("single-query self-attention with zeroed output projection is a no-op") {
    Fixture f(19);
    RandomStream rng(derive_seed(19, 0x57d));
    StudentParams s(1, kCh, kStudentHeads, kCp, rng);
    for (double& v : s.layers[0].self_attn.wo.W.data()) v = 0.0;
    for (double& v : s.layers[0].self_attn.wo.b.data()) v = 0.0;

    NoGradGuard ng;
    Tensor full = student_forward(f.seq, s);

    // manual pipeline with the self-attention branch removed entirely
    auto [compressed, mask] = input_project(compact_seq(f.seq), s);
    const DecoderLayer& L = s.layers[0];
    Tensor x = s.q_plan;
    x = add(x, L.cross_attn(L.ln2(x), compressed, &mask));
    x = add(x, L.ffn(L.ln3(x)));
    Tensor manual = s.out_proj(s.final_ln(x));
    CHECK(full.data() == manual.data());
}

TEST_CASE("student parameter count matches the closed form and is monotone") {
    RandomStream rng(derive_seed(23, 0x57d));
    StudentParams s(rng);
    CHECK(count_params(s) == student_reasoner_param_count());

    StudentParams wide(kStudentK, 2 * kCh, kStudentHeads, kCp, rng);
    CHECK(count_params(wide) > count_params(s));
    CHECK(count_params(wide) == student_reasoner_param_count(kStudentK, 2 * kCh));

    // count is a function of shapes only
    s.q_plan.data()[0] += 100.0;
    CHECK(count_params(s) == student_reasoner_param_count());

    CHECK_THROWS_AS(StudentParams(13, kCh, kStudentHeads, kCp, rng), std::invalid_argument);
}

TEST_CASE("no dead parameters: gradient reaches every student tensor") {
    Fixture f(29);
    RandomStream rng(derive_seed(29, 0x57d));
    StudentParams s(rng);
    ParamRegistry reg;
    s.register_params(reg);

    Tensor target;
    {
        NoGradGuard ng;
        target = Tensor::randn({1, kCp}, rng);
    }
    reg.zero_grads();
    backward(mimic_loss(student_forward(f.seq, s), target, MimicMetric::L2));
    for (const auto& [name, t] : reg.items()) {
        REQUIRE(t.grad() != nullptr);
        double mag = 0.0;
        for (double g : *t.grad()) mag += std::fabs(g);
        INFO(name);
        // self-attention over the lone plan query softmaxes a single score,
        // so the q/k projections sit behind a constant weight of 1 and are
        // structurally gradient-free; every other tensor must be live
        bool inert = name.find(".self.q") != std::string::npos ||
                     name.find(".self.k") != std::string::npos;
        if (inert)
            CHECK(mag == 0.0);
        else
            CHECK(mag > 0.0);
    }
}

TEST_CASE("student output feeds the teacher planner without adapters") {
    Fixture f(31);
    RandomStream rng(derive_seed(31, 0x57d));
    StudentParams s(rng);
    VaePlanner p(kCp, rng);

    NoGradGuard ng;
    Tensor ts = student_forward(f.seq, s);
    Trajectory traj = vae_decode(std::vector<double>(kDz, 0.0), ts, p);
    CHECK(trajectory_feasible(traj));
}
