#pragma once

// Teacher stand-in for the LLM + generative planner: a deep transformer
// reasoner emitting the planning token T_p, and a conditional VAE decoding
// (z, T_p) into an ego-frame trajectory.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "minidrive/encoder.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/student.hpp"
#include "minidrive/tensor.hpp"
#include "minidrive/traj.hpp"

namespace minidrive {

inline constexpr int kLt = 10;          // teacher reasoner depth
inline constexpr int kCp = 256;         // planning token width
inline constexpr int kTeacherHeads = 8;
inline constexpr int kDz = 16;          // VAE latent dim
inline constexpr double kLogvarClamp = 10.0;

// per-step displacement bounds of the VAE decoder; norm < kVMax * kPredDt
// by construction, so decoded trajectories always satisfy the feasibility
// invariants regardless of parameter values
inline constexpr double kDxHalf = 1.4;  // dx in (0, 2.8)
inline constexpr double kDyAmp = 1.0;   // dy in (-1, 1)

struct TeacherReasoner {
    int layers_n = kLt, width = kCp, heads = kTeacherHeads;
    Linear in_proj;     // kCc -> width
    Tensor plan_slot;   // 1 x width, learnable
    std::vector<EncoderLayer> layers;
    LayerNorm final_ln;

    TeacherReasoner() = default;
    TeacherReasoner(int L, int w, int h, RandomStream& rng)
        : layers_n(L), width(w), heads(h), in_proj(kCc, w, rng),
          plan_slot(Tensor::randn({1, w}, rng, 0.02, true)), final_ln(w) {
        for (int i = 0; i < L; ++i) layers.emplace_back(w, h, rng);
        std::size_t mine = param_count();
        std::size_t student = student_reasoner_param_count();
        if (L == kLt && w == kCp && mine < 10 * student)
            throw std::runtime_error("teacher: parameter count below 10x default student");
    }
    explicit TeacherReasoner(RandomStream& rng) : TeacherReasoner(kLt, kCp, kTeacherHeads, rng) {}

    void register_params(ParamRegistry& reg, const std::string& prefix = "reasoner/") const {
        in_proj.register_params(reg, prefix + "in_proj");
        reg.add(prefix + "plan_slot", plan_slot);
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].register_params(reg, prefix + "layer" + std::to_string(i));
        final_ln.register_params(reg, prefix + "final_ln");
    }

    std::size_t param_count() const {
        ParamRegistry reg;
        register_params(reg);
        return reg.total_params();
    }
};

inline Tensor teacher_forward(const TokenSeq& seq, const TeacherReasoner& p) {
    TokenSeq compact = compact_seq(seq);
    Tensor x = concat_rows({p.in_proj(compact.tokens), p.plan_slot});
    Mask mask = compact.mask;
    mask.push_back(1);
    for (const EncoderLayer& layer : p.layers) x = layer(x, &mask);
    x = p.final_ln(x);
    return slice_rows(x, compact.tokens.rows(), 1);  // the plan-slot row, 1 x width
}

struct VaePlanner {
    MLP posterior;  // [traj 12 | T_p] -> 2*kDz
    MLP decoder;    // [z | T_p] -> 12 raw, squashed to bounded displacements

    VaePlanner() = default;
    VaePlanner(int cp, RandomStream& rng)
        : posterior({2 * kHorizon + cp, 128, 2 * kDz}, rng), decoder({kDz + cp, 128, 2 * kHorizon}, rng) {}

    void register_params(ParamRegistry& reg, const std::string& prefix = "planner/") const {
        posterior.register_params(reg, prefix + "posterior");
        decoder.register_params(reg, prefix + "decoder");
    }
};

// posterior parameters for a trajectory under conditioning token; logvar
// clamped to +-kLogvarClamp
inline std::pair<Tensor, Tensor> vae_encode(const Tensor& traj_flat, const Tensor& cond,
                                            const VaePlanner& p) {
    Tensor h = p.posterior(concat_cols({traj_flat, cond}));
    Tensor mu = slice_cols(h, 0, kDz);
    Tensor logvar = clamp(slice_cols(h, kDz, kDz), -kLogvarClamp, kLogvarClamp);
    return {mu, logvar};
}

// differentiable decode: kHorizon x 2 ego-frame waypoints via bounded
// per-step displacements accumulated with a prefix sum
inline Tensor vae_decode_tensor(const Tensor& z, const Tensor& cond, const VaePlanner& p) {
    Tensor raw = reshape(p.decoder(concat_cols({z, cond})), {kHorizon, 2});
    Tensor dx = add_scalar(scale(tanh_op(slice_cols(raw, 0, 1)), kDxHalf), kDxHalf);
    Tensor dy = scale(tanh_op(slice_cols(raw, 1, 1)), kDyAmp);
    return cumsum_rows(concat_cols({dx, dy}));
}

inline Trajectory vae_decode(const std::vector<double>& z, const Tensor& cond,
                             const VaePlanner& p) {
    NoGradGuard ng;
    Tensor wps = vae_decode_tensor(Tensor::from({1, kDz}, z), cond, p);
    Trajectory out;
    for (int k = 0; k < kHorizon; ++k)
        out.wp[static_cast<std::size_t>(k)] = {wps.at(k, 0), wps.at(k, 1)};
    return out;
}

// z = mu + sigma * eps with externally drawn eps (reparameterization)
inline Tensor sample_z(const Tensor& mu, const Tensor& logvar, RandomStream& rng) {
    Tensor eps = Tensor::randn({mu.rows(), mu.cols()}, rng);
    return add(mu, mul(exp_op(scale(logvar, 0.5)), eps));
}

enum class PlanMode { Mean, Sample };

inline Trajectory plan(const TokenSeq& seq, const TeacherReasoner& reasoner, const VaePlanner& pl,
                       PlanMode mode = PlanMode::Mean, std::uint64_t seed = 0) {
    NoGradGuard ng;
    Tensor tp = teacher_forward(seq, reasoner);
    std::vector<double> z(kDz, 0.0);
    if (mode == PlanMode::Sample) {
        RandomStream rs(derive_seed(seed, 0x7a5e));
        for (double& v : z) v = rs.normal();
    }
    return vae_decode(z, tp, pl);
}

}  // namespace minidrive
