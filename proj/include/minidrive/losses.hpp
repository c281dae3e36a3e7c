#pragma once

// Training objectives: the mimic loss family over planning tokens, the GT
// supervision terms (collision / boundary / regression / VAE KL), and their
// weighted composition.

#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "minidrive/geometry.hpp"
#include "minidrive/tensor.hpp"

namespace minidrive {

enum class MimicMetric { L1, L2, KL, Huber };

inline const char* mimic_metric_name(MimicMetric m) {
    switch (m) {
        case MimicMetric::L1: return "l1";
        case MimicMetric::L2: return "l2";
        case MimicMetric::KL: return "kl";
        default: return "huber";
    }
}

inline MimicMetric mimic_metric_from_name(const std::string& s) {
    if (s == "l1") return MimicMetric::L1;
    if (s == "l2") return MimicMetric::L2;
    if (s == "kl") return MimicMetric::KL;
    if (s == "huber") return MimicMetric::Huber;
    throw std::invalid_argument("unknown mimic metric: " + s);
}

struct LossWeights {
    double lambda_bd = 3.0, lambda_reg = 3.0, lambda_vae = 3.0;
    MimicMetric metric = MimicMetric::L2;
    double huber_delta = 1.0;
    double d_safe = 2.0;     // m
    double margin_bd = 0.3;  // m
};

inline Tensor mimic_loss(const Tensor& student, const Tensor& teacher, MimicMetric metric,
                         double delta = 1.0) {
    if (student.shape() != teacher.shape())
        throw std::invalid_argument("mimic_loss: shape mismatch");
    switch (metric) {
        case MimicMetric::L1: return mean(abs_op(sub(student, teacher)));
        case MimicMetric::L2: {
            Tensor d = sub(student, teacher);
            return mean(mul(d, d));
        }
        case MimicMetric::Huber: return mean(huber(sub(student, teacher), delta));
        case MimicMetric::KL: {
            Tensor ps = softmax(student);
            Tensor pt = softmax(teacher);
            Tensor kl = sum(mul(pt, sub(log_op(pt), log_op(ps))));
            return scale(kl, 1.0 / static_cast<double>(student.rows()));
        }
    }
    throw std::logic_error("mimic_loss: unreachable");
}

inline Tensor reg_loss(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) throw std::invalid_argument("reg_loss: horizon mismatch");
    return mean(abs_op(sub(pred, gt)));
}

// scripted future of one agent, expressed in the frame of the predicted
// trajectory; half_extent is the disc approximation of the agent body
struct AgentFutureRel {
    std::vector<Vec2> pos;  // one per horizon step
    double half_extent = 0.0;
};

inline Tensor collision_loss(const Tensor& pred, const std::vector<AgentFutureRel>& futures,
                             double d_safe) {
    const int h = pred.rows();
    Tensor total = Tensor::scalar(0.0);
    Tensor ones = Tensor::from({2, 1}, {1.0, 1.0});
    for (const AgentFutureRel& f : futures) {
        if (static_cast<int>(f.pos.size()) != h)
            throw std::invalid_argument("collision_loss: future horizon mismatch");
        std::vector<double> raw;
        raw.reserve(static_cast<std::size_t>(h) * 2);
        for (const Vec2& p : f.pos) {
            raw.push_back(p.x);
            raw.push_back(p.y);
        }
        Tensor d = sub(pred, Tensor::from({h, 2}, std::move(raw)));
        Tensor dist = sqrt_op(add_scalar(matmul(mul(d, d), ones), 1e-18));
        total = add(total, sum(relu(add_scalar(neg(dist), d_safe + f.half_extent))));
    }
    return scale(total, 1.0 / static_cast<double>(h));
}

inline Tensor boundary_loss(const Tensor& pred, double ego_y, double ego_heading,
                            double center_y, double halfwidth, double margin) {
    const int h = pred.rows();
    Tensor lat = Tensor::from({2, 1}, {std::sin(ego_heading), std::cos(ego_heading)});
    Tensor wy = add_scalar(matmul(pred, lat), ego_y - center_y);
    Tensor pen = relu(add_scalar(abs_op(wy), margin - halfwidth));
    return scale(sum(pen), 1.0 / static_cast<double>(h));
}

inline Tensor kl_vae_loss(const Tensor& mu, const Tensor& logvar) {
    if (mu.shape() != logvar.shape()) throw std::invalid_argument("kl_vae_loss: shape mismatch");
    Tensor s = sub(add_scalar(add(mul(mu, mu), exp_op(logvar)), -1.0), logvar);
    return scale(sum(s), 0.5 / static_cast<double>(mu.rows()));
}

struct LossBreakdown {
    double col = 0, bd = 0, reg = 0, vae = 0, mimic = 0, gt = 0, total = 0;
    bool has_gt = false, has_mimic = false;
};

struct LossTerms {
    Tensor col, bd, reg, vae, mimic;  // scalar tensors
};

inline std::pair<Tensor, LossBreakdown> total_loss(const LossTerms& t, const LossWeights& w,
                                                   bool enable_mimic, bool enable_gt) {
    if (!enable_mimic && !enable_gt)
        throw std::invalid_argument("total_loss: no supervision enabled");
    LossBreakdown br;
    Tensor total = Tensor::scalar(0.0);
    if (enable_gt) {
        Tensor gt = add(add(t.col, scale(t.bd, w.lambda_bd)),
                        add(scale(t.reg, w.lambda_reg), scale(t.vae, w.lambda_vae)));
        total = add(total, gt);
        br.has_gt = true;
        br.col = t.col.value();
        br.bd = t.bd.value();
        br.reg = t.reg.value();
        br.vae = t.vae.value();
        br.gt = gt.value();
    }
    if (enable_mimic) {
        total = add(total, t.mimic);
        br.has_mimic = true;
        br.mimic = t.mimic.value();
    }
    br.total = total.value();
    return {total, br};
}

}  // namespace minidrive
