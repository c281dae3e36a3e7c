#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "minidrive/adamw.hpp"
#include "minidrive/checkpoint.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/tensor.hpp"

using namespace minidrive;

namespace {

Tensor vec(std::vector<double> v) {
    int n = static_cast<int>(v.size());
    return Tensor::from({n}, std::move(v));
}

}  // namespace

TEST_CASE("matmul forward") {
    Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor p = matmul(i2, i2);
    CHECK(p.data() == std::vector<double>{1, 0, 0, 1});

    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2, 1}, {1, 1});
    Tensor c = matmul(a, b);
    REQUIRE(c.shape() == Shape{2, 1});
    CHECK(c.at(0, 0) == 3.0);
    CHECK(c.at(1, 0) == 7.0);

    Tensor bad_a = Tensor::zeros({2, 3}), bad_b = Tensor::zeros({4, 5});
    CHECK_THROWS(matmul(bad_a, bad_b));
}

TEST_CASE("layernorm forward") {
    Tensor gain1 = Tensor::full({3}, 1.0), bias0 = Tensor::zeros({3});

    Tensor constant = Tensor::from({1, 3}, {5, 5, 5});
    Tensor z = layernorm(constant, gain1, bias0, 1e-5);
    for (double x : z.data()) CHECK(std::fabs(x) < 1e-12);

    Tensor pm = Tensor::from({1, 2}, {1, -1});
    Tensor g2 = Tensor::full({2}, 1.0), b2 = Tensor::zeros({2});
    Tensor n = layernorm(pm, g2, b2, 1e-12);
    CHECK(n.at(0, 0) == Catch::Approx(1.0).margin(1e-6));
    CHECK(n.at(0, 1) == Catch::Approx(-1.0).margin(1e-6));

    RandomStream rng(1);
    Tensor x = Tensor::randn({4, 3}, rng);
    Tensor gain0 = Tensor::zeros({3});
    Tensor biasb = Tensor::from({3}, {0.5, -2.0, 7.0});
    Tensor affine = layernorm(x, gain0, biasb, 1e-5);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 3; ++c)
            CHECK(affine.at(r, c) == biasb.data()[static_cast<std::size_t>(c)]);
}

TEST_CASE("layernorm row statistics pre-affine") {
    RandomStream rng(77);
    Tensor x = Tensor::randn({8, 16}, rng, 3.0);
    Tensor gain = Tensor::full({16}, 1.0), bias = Tensor::zeros({16});
    const double eps = 1e-9;
    Tensor y = layernorm(x, gain, bias, eps);
    for (int r = 0; r < 8; ++r) {
        double m = 0.0, v = 0.0;
        for (int c = 0; c < 16; ++c) m += y.at(r, c);
        m /= 16;
        for (int c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m);
        v /= 16;
        CHECK(std::fabs(m) < 1e-9);
        CHECK(std::fabs(v - 1.0) < 1e-6);
    }
}

TEST_CASE("softmax forward") {
    Tensor u = softmax(vec({0, 0, 0}));
    for (double x : u.data()) CHECK(x == Catch::Approx(1.0 / 3).margin(1e-15));

    Tensor hot = softmax(vec({1000, 0}));
    CHECK(std::fabs(hot.data()[0] - 1.0) < 1e-12);
    CHECK(std::fabs(hot.data()[1]) < 1e-12);

    Tensor logs = softmax(vec({std::log(1.0), std::log(2.0), std::log(3.0)}));
    CHECK(logs.data()[0] == Catch::Approx(1.0 / 6).epsilon(1e-12));
    CHECK(logs.data()[1] == Catch::Approx(2.0 / 6).epsilon(1e-12));
    CHECK(logs.data()[2] == Catch::Approx(3.0 / 6).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
    RandomStream rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = Tensor::randn({6, 9}, rng, 4.0);
        Tensor s = softmax(x);
        for (int r = 0; r < 6; ++r) {
            double total = 0.0;
            for (int c = 0; c < 9; ++c) total += s.at(r, c);
            CHECK(std::fabs(total - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("attention basics") {
    RandomStream rng(11);
    // single key: output equals v row exactly
    Tensor q = Tensor::randn({1, 2, 4}, rng);
    Tensor k = Tensor::randn({1, 1, 4}, rng);
    Tensor v = Tensor::randn({1, 1, 4}, rng);
    Tensor out = attention(q, k, v, nullptr);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(out.data()[static_cast<std::size_t>(i) * 4 + j] == v.data()[static_cast<std::size_t>(j)]);

    // duplicate keys -> mean of their values
    Tensor krow = Tensor::randn({1, 1, 4}, rng);
    Tensor k2 = Tensor::zeros({1, 2, 4});
    for (int j = 0; j < 4; ++j) {
        k2.data()[static_cast<std::size_t>(j)] = krow.data()[static_cast<std::size_t>(j)];
        k2.data()[4 + static_cast<std::size_t>(j)] = krow.data()[static_cast<std::size_t>(j)];
    }
    Tensor v2 = Tensor::randn({1, 2, 4}, rng);
    Tensor out2 = attention(q, k2, v2, nullptr);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 4; ++j) {
            double want = 0.5 * (v2.data()[static_cast<std::size_t>(j)] + v2.data()[4 + static_cast<std::size_t>(j)]);
            CHECK(out2.data()[static_cast<std::size_t>(i) * 4 + j] == Catch::Approx(want).margin(1e-12));
        }
}

TEST_CASE("masked attention positions are inert") {
    RandomStream rng(23);
    const int h = 2, nq = 3, nk = 4, d = 8;
    Tensor q = Tensor::randn({h, nq, d}, rng);
    Tensor k = Tensor::randn({h, nk, d}, rng);
    Tensor v = Tensor::randn({h, nk, d}, rng);
    Tensor base = attention(q, k, v, nullptr);

    // append one masked key/value pair -> bit-identical output
    Tensor kx = Tensor::zeros({h, nk + 1, d}), vx = Tensor::zeros({h, nk + 1, d});
    for (int hh = 0; hh < h; ++hh) {
        for (int i = 0; i < nk; ++i)
            for (int j = 0; j < d; ++j) {
                kx.data()[(static_cast<std::size_t>(hh) * (nk + 1) + i) * d + j] =
                    k.data()[(static_cast<std::size_t>(hh) * nk + i) * d + j];
                vx.data()[(static_cast<std::size_t>(hh) * (nk + 1) + i) * d + j] =
                    v.data()[(static_cast<std::size_t>(hh) * nk + i) * d + j];
            }
        for (int j = 0; j < d; ++j) {
            kx.data()[(static_cast<std::size_t>(hh) * (nk + 1) + nk) * d + j] = 1e6;
            vx.data()[(static_cast<std::size_t>(hh) * (nk + 1) + nk) * d + j] = -1e6;
        }
    }
    Mask mask(static_cast<std::size_t>(nk + 1), 1);
    mask[static_cast<std::size_t>(nk)] = 0;
    Tensor ext = attention(q, kx, vx, &mask);
    REQUIRE(ext.data().size() == base.data().size());
    for (std::size_t i = 0; i < base.data().size(); ++i) CHECK(ext.data()[i] == base.data()[i]);

    // perturbing masked v rows never changes output
    for (int hh = 0; hh < h; ++hh)
        for (int j = 0; j < d; ++j)
            vx.data()[(static_cast<std::size_t>(hh) * (nk + 1) + nk) * d + j] = 3.14 * (j + 1);
    Tensor ext2 = attention(q, kx, vx, &mask);
    for (std::size_t i = 0; i < base.data().size(); ++i) CHECK(ext2.data()[i] == base.data()[i]);

    Mask all_masked(static_cast<std::size_t>(nk + 1), 0);
    CHECK_THROWS(attention(q, kx, vx, &all_masked));
}

TEST_CASE("backward basics") {
    // identity
    Tensor x = Tensor::from({1}, {4.0}, true);
    Tensor loss = scale(x, 1.0);
    backward(loss);
    CHECK((*x.grad())[0] == 1.0);

    // sum(x*x), x=[1,2,3] -> [2,4,6]
    Tensor x2 = Tensor::from({3}, {1, 2, 3}, true);
    backward(sum(mul(x2, x2)));
    CHECK((*x2.grad()) == std::vector<double>{2, 4, 6});

    // fan-out: y used twice
    Tensor y = Tensor::from({1}, {1.5}, true);
    backward(add(y, y));
    CHECK((*y.grad())[0] == 2.0);
}

TEST_CASE("gather_rows copies rows and scatter-adds duplicates") {
    Tensor a = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
    Tensor g = gather_rows(a, {2, 0, 2});
    CHECK(g.data() == std::vector<double>{5, 6, 1, 2, 5, 6});
    backward(sum(g));
    CHECK((*a.grad()) == std::vector<double>{1, 1, 0, 0, 2, 2});
    CHECK_THROWS(gather_rows(a, {3}));
    CHECK_THROWS(gather_rows(a, {}));
}

TEST_CASE("backward error contract") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    Tensor non_scalar = mul(x, x);
    CHECK_THROWS(backward(non_scalar));

    Tensor detached = Tensor::from({1}, {3.0});
    CHECK_THROWS(backward(detached));

    Tensor loss = sum(mul(x, x));
    backward(loss);
    CHECK_THROWS(backward(loss));
}

TEST_CASE("no-grad mode records no graph") {
    Tensor x = Tensor::from({2}, {1, 2}, true);
    {
        NoGradGuard ng;
        Tensor y = sum(mul(x, x));
        CHECK_FALSE(y.tracked());
        CHECK(y.node() == nullptr);
    }
    Tensor z = sum(mul(x, x));
    CHECK(z.tracked());
}

TEST_CASE("non-finite forward output is a hard error") {
    Tensor x = Tensor::from({1}, {-1.0});
    CHECK_THROWS(log_op(x));
    Tensor big = Tensor::from({1}, {1e308});
    CHECK_THROWS(mul(big, big));
}

TEST_CASE("grad_check on linear and attention") {
    RandomStream rng(3);
    Tensor a = Tensor::randn({4, 3}, rng);
    double lin_err = grad_check(
        [](const std::vector<Tensor>& in) { return sum(scale(in[0], 2.5)); }, {a});
    CHECK(lin_err < 1e-10);

    Tensor q = Tensor::randn({2, 3, 4}, rng, 0.5);
    Tensor k = Tensor::randn({2, 5, 4}, rng, 0.5);
    Tensor v = Tensor::randn({2, 5, 4}, rng, 0.5);
    Mask mask = {1, 1, 0, 1, 1};
    double attn_err = grad_check(
        [&mask](const std::vector<Tensor>& in) {
            return mean(attention(in[0], in[1], in[2], &mask));
        },
        {q, k, v});
    CHECK(attn_err < 1e-5);
}

TEST_CASE("grad_check every op across seeds") {
    struct OpCase {
        const char* name;
        int arity;
        double lo, hi;  // input magnitude range (sign randomized unless lo>0 guards a domain)
        bool positive_only;
        std::function<Tensor(const std::vector<Tensor>&)> f;
    };
    // Kinked ops (relu/abs/huber/clamp) get inputs bounded away from their
    // kinks so central differences stay on one branch.
    std::vector<OpCase> cases = {
        {"add", 2, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(add(in[0], in[1])); }},
        {"sub", 2, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(sub(in[0], in[1])); }},
        {"mul", 2, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(mul(in[0], in[1])); }},
        {"scale", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(scale(in[0], -1.7)); }},
        {"add_scalar", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(add_scalar(in[0], 0.3)); }},
        {"relu", 1, 0.2, 2.0, false, [](const std::vector<Tensor>& in) { return mean(relu(in[0])); }},
        {"abs", 1, 0.2, 2.0, false, [](const std::vector<Tensor>& in) { return mean(abs_op(in[0])); }},
        {"huber", 1, 0.2, 2.0, false, [](const std::vector<Tensor>& in) { return mean(huber(in[0], 1.0)); }},
        {"gelu", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(gelu(in[0])); }},
        {"tanh", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(tanh_op(in[0])); }},
        {"exp", 1, 0.1, 1.5, false, [](const std::vector<Tensor>& in) { return mean(exp_op(in[0])); }},
        {"log", 1, 0.5, 2.0, true, [](const std::vector<Tensor>& in) { return mean(log_op(in[0])); }},
        {"sqrt", 1, 0.5, 2.0, true, [](const std::vector<Tensor>& in) { return mean(sqrt_op(in[0])); }},
        {"clamp", 1, 0.2, 0.8, false, [](const std::vector<Tensor>& in) { return mean(clamp(in[0], -1.0, 1.0)); }},
        {"sum", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return sum(in[0]); }},
        {"mean", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(in[0]); }},
        {"matmul", 2, 0.1, 1.0, false,
         [](const std::vector<Tensor>& in) { return mean(matmul(in[0], transpose(in[1]))); }},
        {"add_rowvec", 1, 0.1, 1.0, false,
         [](const std::vector<Tensor>& in) {
             return mean(add_rowvec(in[0], Tensor::from({4}, {0.1, -0.2, 0.3, 0.4}, true)));
         }},
        {"transpose", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(transpose(in[0])); }},
        {"reshape", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(reshape(in[0], {4, 3})); }},
        {"slice_rows", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(slice_rows(in[0], 1, 2)); }},
        {"slice_cols", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(slice_cols(in[0], 1, 2)); }},
        {"gather_rows", 1, 0.1, 2.0, false,
         [](const std::vector<Tensor>& in) { return mean(gather_rows(in[0], {2, 0, 2})); }},
        {"concat_rows", 2, 0.1, 2.0, false,
         [](const std::vector<Tensor>& in) { return mean(concat_rows({in[0], in[1]})); }},
        {"concat_cols", 2, 0.1, 2.0, false,
         [](const std::vector<Tensor>& in) { return mean(concat_cols({in[0], in[1]})); }},
        {"split_merge_heads", 1, 0.1, 2.0, false,
         [](const std::vector<Tensor>& in) { return mean(merge_heads(split_heads(in[0], 2))); }},
        {"slab_stack", 1, 0.1, 2.0, false,
         [](const std::vector<Tensor>& in) {
             Tensor h = split_heads(in[0], 2);
             return mean(stack_slabs({slab(h, 1), slab(h, 0)}));
         }},
        {"cumsum_rows", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(cumsum_rows(in[0])); }},
        {"softmax", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(mul(softmax(in[0]), in[0])); }},
        {"softmax_masked", 1, 0.1, 2.0, false,
         [](const std::vector<Tensor>& in) {
             Mask m = {1, 0, 1, 1};
             return mean(mul(softmax_masked(in[0], &m), in[0]));
         }},
        {"layernorm", 1, 0.1, 2.0, false,
         [](const std::vector<Tensor>& in) {
             Tensor g = Tensor::from({4}, {1.1, 0.9, 1.3, 0.7}, true);
             Tensor b = Tensor::from({4}, {0.1, -0.1, 0.2, 0.0}, true);
             return mean(mul(layernorm(in[0], g, b, 1e-5), in[0]));
         }},
        {"attention", 2, 0.1, 1.0, false,
         [](const std::vector<Tensor>& in) {
             Tensor q = split_heads(in[0], 2);
             Tensor kv = split_heads(in[1], 2);
             return mean(attention(q, kv, kv, nullptr));
         }},
    };

    for (const auto& oc : cases) {
        double worst = 0.0;
        for (int seed = 1; seed <= 20; ++seed) {
            RandomStream rng(derive_seed(900, static_cast<std::uint64_t>(seed)));
            std::vector<Tensor> inputs;
            for (int a = 0; a < oc.arity; ++a) {
                Tensor t = Tensor::zeros({3, 4});
                for (double& xv : t.data()) {
                    double mag = rng.uniform(oc.lo, oc.hi);
                    double sign = (!oc.positive_only && rng.uniform(0.0, 1.0) < 0.5) ? -1.0 : 1.0;
                    xv = sign * mag;
                }
                inputs.push_back(t);
            }
            worst = std::max(worst, grad_check(oc.f, inputs));
        }
        INFO(oc.name);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("determinism of forward passes") {
    auto run = [](std::uint64_t seed) {
        RandomStream rng(seed);
        Tensor x = Tensor::randn({5, 8}, rng);
        Tensor w = Tensor::randn({8, 8}, rng);
        Tensor g = Tensor::full({8}, 1.0), b = Tensor::zeros({8});
        return sum(softmax(layernorm(matmul(x, w), g, b, 1e-5))).value();
    };
    CHECK(run(42) == run(42));
}

TEST_CASE("adamw update rules") {
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.0;

    // zero grad, zero weight decay -> unchanged
    {
        Tensor p = Tensor::from({2}, {1.0, -2.0}, true);
        AdamW opt(cfg);
        opt.add_param(p);
        opt.zero_grads();
        opt.step();
        CHECK(p.data() == std::vector<double>{1.0, -2.0});
    }

    // one step, g=1 -> delta close to -lr (bias-corrected unit update)
    {
        Tensor p = Tensor::from({1}, {0.7}, true);
        AdamW opt(cfg);
        opt.add_param(p);
        p.zero_grad();
        p.grad_buffer()[0] = 1.0;
        opt.step();
        // m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
        double expect = 0.7 - cfg.lr * (1.0 / (1.0 + cfg.eps));
        CHECK(p.data()[0] == Catch::Approx(expect).margin(1e-15));
        CHECK(p.data()[0] == Catch::Approx(0.7 - cfg.lr).margin(1e-9));
    }

    // weight decay only: g = 0 everywhere -> param scaled by (1 - lr wd)
    {
        AdamWConfig wd = cfg;
        wd.weight_decay = 0.1;
        Tensor p = Tensor::from({2}, {4.0, -4.0}, true);
        AdamW opt(wd);
        opt.add_param(p);
        opt.zero_grads();
        opt.step();
        CHECK(p.data()[0] == Catch::Approx(4.0 * (1.0 - wd.lr * wd.weight_decay)).margin(1e-15));
        CHECK(p.data()[1] == Catch::Approx(-4.0 * (1.0 - wd.lr * wd.weight_decay)).margin(1e-15));
    }

    // missing grad buffer -> error
    {
        Tensor p = Tensor::from({1}, {1.0}, true);
        AdamW opt(cfg);
        opt.add_param(p);
        CHECK_THROWS(opt.step());
    }
}

TEST_CASE("adamw matches reference trajectory") {
    // independent scalar re-implementation, several steps
    AdamWConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.01;
    Tensor p = Tensor::from({1}, {1.0}, true);
    AdamW opt(cfg);
    opt.add_param(p);

    double theta = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 5; ++t) {
        double g = 0.3 * t;  // deterministic synthetic gradient
        p.zero_grad();
        p.grad_buffer()[0] = g;
        opt.step();

        m = cfg.beta1 * m + (1 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
        double mh = m / (1 - std::pow(cfg.beta1, t));
        double vh = v / (1 - std::pow(cfg.beta2, t));
        theta -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * theta);
        REQUIRE(p.data()[0] == Catch::Approx(theta).margin(1e-14));
    }
}

TEST_CASE("gradient accumulation across separate graphs") {
    Tensor w = Tensor::from({1}, {2.0}, true);
    w.zero_grad();
    for (int i = 0; i < 3; ++i) {
        Tensor x = Tensor::from({1}, {static_cast<double>(i + 1)});
        backward(sum(mul(w, x)));
    }
    CHECK((*w.grad())[0] == 6.0);  // 1 + 2 + 3
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    RandomStream rng(99);
    ParamRegistry reg;
    Linear lin(3, 5, rng);
    LayerNorm ln(5);
    lin.register_params(reg, "student/lin");
    ln.register_params(reg, "student/ln");

    auto tmp = std::filesystem::temp_directory_path() / "md_ckpt_test.bin";
    save_checkpoint(tmp.string(), reg);
    LoadedCheckpoint back = load_checkpoint(tmp.string());
    REQUIRE(back.items.size() == reg.items().size());

    // float32 is lossy against the live float64 params, but a save of the
    // loaded copy must reproduce the original bytes exactly
    std::string bytes1 = checkpoint_bytes(reg.items());
    std::string bytes2 = checkpoint_bytes(back.items);
    CHECK(bytes1 == bytes2);

    // and restoring then re-saving also reproduces them
    restore_params(reg, back);
    CHECK(checkpoint_bytes(reg.items()) == bytes1);

    CHECK(namespace_hash(reg, "student/") == namespace_hash(back.items, "student/"));
    CHECK(back.find("student/lin.W") != nullptr);
    CHECK(back.find("student/nope") == nullptr);
    std::filesystem::remove(tmp);
}

TEST_CASE("param registry accounting") {
    RandomStream rng(7);
    ParamRegistry reg;
    Linear a(4, 6, rng), b(6, 2, rng);
    a.register_params(reg, "encoder/a");
    b.register_params(reg, "student/b");
    CHECK(reg.total_params() == 4 * 6 + 6 + 6 * 2 + 2);
    CHECK(reg.count_with_prefix("encoder/") == 4 * 6 + 6);
    CHECK(reg.count_with_prefix("student/") == 6 * 2 + 2);
    CHECK_THROWS(reg.add("encoder/a.W", a.W));

    reg.set_requires_grad("encoder/", false);
    CHECK_FALSE(a.W.requires_grad());
    CHECK(b.W.requires_grad());
}
