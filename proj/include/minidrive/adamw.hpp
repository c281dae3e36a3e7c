#pragma once

// AdamW with decoupled weight decay:
//   m <- b1 m + (1-b1) g          v <- b2 v + (1-b2) g^2
//   theta -= lr (m_hat / (sqrt(v_hat) + eps) + wd * theta)
// Bias correction uses the shared step counter; parameters update in
// registration order.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "minidrive/tensor.hpp"

namespace minidrive {

struct AdamWConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void add_param(const Tensor& t) {
        if (!t.requires_grad())
            throw std::invalid_argument("adamw: parameter does not require grad");
        slots_.push_back({t, std::vector<double>(t.numel(), 0.0), std::vector<double>(t.numel(), 0.0)});
    }

    void add_params(const std::vector<Tensor>& ts) {
        for (const Tensor& t : ts) add_param(t);
    }

    std::size_t num_params() const {
        std::size_t n = 0;
        for (const auto& s : slots_) n += s.param.numel();
        return n;
    }

    void zero_grads() {
        for (auto& s : slots_) s.param.zero_grad();
    }

    std::uint64_t step_count() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }

    // Applies one update. Every registered parameter must have a grad buffer
    // (zeroed counts); a missing buffer means backward never reached it,
    // which is a wiring bug we refuse to paper over.
    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& s : slots_) {
            const std::vector<double>* g = s.param.grad();
            if (!g) throw std::runtime_error("adamw: parameter has no grad buffer; call zero_grads before backward");
            auto& th = s.param.data();
            for (std::size_t i = 0; i < th.size(); ++i) {
                double gi = (*g)[i];
                if (!std::isfinite(gi)) throw std::runtime_error("adamw: non-finite gradient");
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * gi;
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * gi * gi;
                double mhat = s.m[i] / bc1;
                double vhat = s.v[i] / bc2;
                th[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * th[i]);
            }
        }
    }

private:
    struct Slot {
        Tensor param;
        std::vector<double> m, v;
    };

    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    std::uint64_t t_ = 0;
};

}  // namespace minidrive
