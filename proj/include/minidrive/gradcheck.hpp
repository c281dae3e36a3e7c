#pragma once

// Central-difference gradient battery: every differentiable op plus every
// composed loss, randomized across seeds. Inputs for kinked functions
// (relu/abs/huber/hinges) are generated away from their kinks so the
// finite-difference stencil stays on one branch.

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "minidrive/losses.hpp"
#include "minidrive/rng.hpp"
#include "minidrive/tensor.hpp"
#include "minidrive/world.hpp"

namespace minidrive {

struct GradBatteryItem {
    std::string name;
    double rel_err = 0.0;  // worst over all trials
};

struct GradBatteryResult {
    int trials = 0;
    int checks = 0;  // individual grad_check invocations
    double max_rel_err = 0.0;
    std::string worst_name;
    std::vector<GradBatteryItem> items;
};

namespace gradcheck_detail {

struct Case {
    std::string name;
    int arity;
    double lo, hi;
    bool positive_only;
    std::function<Tensor(const std::vector<Tensor>&)> f;
};

inline Tensor rand_in(RandomStream& rng, const std::vector<int>& shape, double lo, double hi,
                      bool positive_only) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data()) {
        double mag = rng.uniform(lo, hi);
        double sign = (!positive_only && rng.uniform(0.0, 1.0) < 0.5) ? -1.0 : 1.0;
        v = sign * mag;
    }
    return t;
}

inline std::vector<Case> op_cases() {
    auto M = [](Tensor t) { return mean(t); };
    std::vector<Case> cs = {
        {"add", 2, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(add(in[0], in[1])); }},
        {"sub", 2, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(sub(in[0], in[1])); }},
        {"mul", 2, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(mul(in[0], in[1])); }},
        {"scale", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(scale(in[0], -1.7)); }},
        {"add_scalar", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(add_scalar(in[0], 0.3)); }},
        {"neg", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(neg(in[0])); }},
        {"relu", 1, 0.2, 2.0, false, [=](const std::vector<Tensor>& in) { return M(relu(in[0])); }},
        {"abs", 1, 0.2, 2.0, false, [=](const std::vector<Tensor>& in) { return M(abs_op(in[0])); }},
        {"huber", 1, 0.2, 0.8, false, [=](const std::vector<Tensor>& in) { return M(huber(in[0], 1.0)); }},
        {"gelu", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(gelu(in[0])); }},
        {"tanh", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(tanh_op(in[0])); }},
        {"exp", 1, 0.1, 1.5, false, [=](const std::vector<Tensor>& in) { return M(exp_op(in[0])); }},
        {"log", 1, 0.5, 2.0, true, [=](const std::vector<Tensor>& in) { return M(log_op(in[0])); }},
        {"sqrt", 1, 0.5, 2.0, true, [=](const std::vector<Tensor>& in) { return M(sqrt_op(in[0])); }},
        {"clamp", 1, 0.2, 0.8, false, [=](const std::vector<Tensor>& in) { return M(clamp(in[0], -1.0, 1.0)); }},
        {"sum", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return sum(in[0]); }},
        {"mean", 1, 0.1, 2.0, false, [](const std::vector<Tensor>& in) { return mean(in[0]); }},
        {"mean_rows", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(mean_rows(in[0])); }},
        {"matmul", 2, 0.1, 1.0, false,
         [=](const std::vector<Tensor>& in) { return M(matmul(in[0], transpose(in[1]))); }},
        {"transpose", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(transpose(in[0])); }},
        {"add_rowvec", 1, 0.1, 1.0, false,
         [=](const std::vector<Tensor>& in) {
             return M(add_rowvec(in[0], Tensor::from({4}, {0.1, -0.2, 0.3, 0.4}, true)));
         }},
        {"reshape", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(reshape(in[0], {4, 3})); }},
        {"slice_rows", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(slice_rows(in[0], 1, 2)); }},
        {"slice_cols", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(slice_cols(in[0], 1, 2)); }},
        {"gather_rows", 1, 0.1, 2.0, false,
         [=](const std::vector<Tensor>& in) { return M(gather_rows(in[0], {2, 0, 2})); }},
        {"concat_rows", 2, 0.1, 2.0, false,
         [=](const std::vector<Tensor>& in) { return M(concat_rows({in[0], in[1]})); }},
        {"concat_cols", 2, 0.1, 2.0, false,
         [=](const std::vector<Tensor>& in) { return M(concat_cols({in[0], in[1]})); }},
        {"split_merge_heads", 1, 0.1, 2.0, false,
         [=](const std::vector<Tensor>& in) { return M(merge_heads(split_heads(in[0], 2))); }},
        {"slab_stack", 1, 0.1, 2.0, false,
         [=](const std::vector<Tensor>& in) {
             Tensor h = split_heads(in[0], 2);
             return M(stack_slabs({slab(h, 1), slab(h, 0)}));
         }},
        {"cumsum_rows", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(cumsum_rows(in[0])); }},
        {"softmax", 1, 0.1, 2.0, false, [=](const std::vector<Tensor>& in) { return M(mul(softmax(in[0]), in[0])); }},
        {"softmax_masked", 1, 0.1, 2.0, false,
         [=](const std::vector<Tensor>& in) {
             Mask m = {1, 0, 1, 1};
             return M(mul(softmax_masked(in[0], &m), in[0]));
         }},
        {"layernorm", 1, 0.1, 2.0, false,
         [=](const std::vector<Tensor>& in) {
             Tensor g = Tensor::from({4}, {1.1, 0.9, 1.3, 0.7}, true);
             Tensor b = Tensor::from({4}, {0.1, -0.1, 0.2, 0.0}, true);
             return M(mul(layernorm(in[0], g, b, 1e-5), in[0]));
         }},
        {"attention", 2, 0.1, 1.0, false,
         [=](const std::vector<Tensor>& in) {
             Tensor q = split_heads(in[0], 2);
             Tensor kv = split_heads(in[1], 2);
             return M(attention(q, kv, kv, nullptr));
         }},
    };
    return cs;
}

// Student/teacher tokens with |diff| in a band that avoids both the L1 kink
// at zero and the Huber transition at delta = 1.
inline std::pair<Tensor, Tensor> mimic_pair(RandomStream& rng, int rows, int cols) {
    Tensor t = rand_in(rng, {rows, cols}, 0.2, 1.5, false);
    Tensor s = Tensor::zeros({rows, cols});
    for (std::size_t i = 0; i < t.numel(); ++i) {
        double off = rng.uniform(0.3, 0.7) * (rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0);
        s.data()[i] = t.data()[i] + off;
    }
    return {t, s};
}

inline Tensor rand_traj(RandomStream& rng) {
    Tensor p = Tensor::zeros({kHorizon, 2});
    for (int k = 0; k < kHorizon; ++k) {
        p.at(k, 0) = 2.0 * (k + 1) + rng.uniform(-0.3, 0.3);
        p.at(k, 1) = rng.uniform(-0.8, 0.8);
    }
    return p;
}

}  // namespace gradcheck_detail

inline GradBatteryResult run_grad_battery(int trials = 20, double eps = 1e-6) {
    using namespace gradcheck_detail;
    if (trials < 1) throw std::invalid_argument("run_grad_battery: trials must be >= 1");
    GradBatteryResult res;
    res.trials = trials;

    auto record = [&](const std::string& name, double err) {
        auto it = std::find_if(res.items.begin(), res.items.end(),
                               [&](const GradBatteryItem& x) { return x.name == name; });
        if (it == res.items.end())
            res.items.push_back({name, err});
        else
            it->rel_err = std::max(it->rel_err, err);
        res.checks += 1;
        if (err > res.max_rel_err) {
            res.max_rel_err = err;
            res.worst_name = name;
        }
    };

    std::vector<Case> ops = op_cases();
    for (int t = 0; t < trials; ++t) {
        for (const Case& oc : ops) {
            RandomStream rng(derive_seed(900, static_cast<std::uint64_t>(t * 101 + 7)));
            std::vector<Tensor> inputs;
            for (int a = 0; a < oc.arity; ++a)
                inputs.push_back(rand_in(rng, {3, 4}, oc.lo, oc.hi, oc.positive_only));
            record(oc.name, grad_check(oc.f, inputs, eps));
        }

        RandomStream rng(derive_seed(901, static_cast<std::uint64_t>(t)));
        LossWeights w;

        auto [tt, ss] = mimic_pair(rng, 2, 8);
        for (MimicMetric m :
             {MimicMetric::L1, MimicMetric::L2, MimicMetric::KL, MimicMetric::Huber}) {
            record(std::string("loss/mimic_") + mimic_metric_name(m),
                   grad_check([m](const std::vector<Tensor>& in) { return mimic_loss(in[0], in[1], m, 1.0); },
                              {ss, tt}, eps));
        }

        // one agent inside the hinge, one safely outside
        std::vector<AgentFutureRel> futs(2);
        for (int k = 0; k < kHorizon; ++k) {
            futs[0].pos.push_back({2.0 * (k + 1) + rng.uniform(-0.2, 0.2), 1.0});
            futs[1].pos.push_back({2.0 * (k + 1), 30.0 + rng.uniform(0.0, 2.0)});
        }
        futs[0].half_extent = 0.4;
        futs[1].half_extent = 0.4;
        record("loss/collision",
               grad_check([&](const std::vector<Tensor>& in) { return collision_loss(in[0], futs, w.d_safe); },
                          {rand_traj(rng)}, eps));

        double ego_y = rng.uniform(-0.5, 0.5);
        record("loss/boundary",
               grad_check(
                   [&](const std::vector<Tensor>& in) {
                       return boundary_loss(in[0], ego_y, 0.1, 0.0, 2.5, w.margin_bd);
                   },
                   {rand_traj(rng)}, eps));

        Tensor gt = rand_traj(rng);
        Tensor pred = Tensor::zeros({kHorizon, 2});
        for (std::size_t i = 0; i < gt.numel(); ++i)
            pred.data()[i] = gt.data()[i] + rng.uniform(0.3, 0.7);
        record("loss/reg",
               grad_check([&](const std::vector<Tensor>& in) { return reg_loss(in[0], gt); }, {pred}, eps));

        Tensor mu = rand_in(rng, {1, 8}, 0.2, 1.5, false);
        Tensor lv = rand_in(rng, {1, 8}, 0.1, 1.0, false);
        record("loss/kl_vae",
               grad_check([](const std::vector<Tensor>& in) { return kl_vae_loss(in[0], in[1]); },
                          {mu, lv}, eps));

        record("loss/total",
               grad_check(
                   [&](const std::vector<Tensor>& in) {
                       LossTerms terms{collision_loss(in[0], futs, w.d_safe),
                                       boundary_loss(in[0], ego_y, 0.1, 0.0, 2.5, w.margin_bd),
                                       reg_loss(in[0], gt),
                                       kl_vae_loss(in[1], in[2]),
                                       mimic_loss(in[3], tt, w.metric, w.huber_delta)};
                       return total_loss(terms, w, true, true).first;
                   },
                   {pred, mu, lv, ss}, eps));
    }
    std::sort(res.items.begin(), res.items.end(),
              [](const GradBatteryItem& a, const GradBatteryItem& b) { return a.name < b.name; });
    return res;
}

}  // namespace minidrive
