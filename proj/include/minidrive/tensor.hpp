#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// Design notes:
//  - Tensor is a cheap handle onto a shared TensorImpl; copies alias the same
//    storage. Written tensors are treated as immutable except for parameter
//    updates, which require exclusive access.
//  - Every op runs in float64 with a fixed reduction order, so forward passes
//    are bitwise reproducible within one build. Matrix products are delegated
//    to Eigen (fixed blocking, single-threaded), everything else is a plain
//    loop.
//  - Non-finite values in a forward output are a hard error: each op scans
//    its result and throws.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "minidrive/rng.hpp"

namespace minidrive {

using Shape = std::vector<int>;
using Mask = std::vector<std::uint8_t>;  // 1 = valid slot, 0 = masked

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw std::invalid_argument("tensor: negative dimension");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

class Tensor;

// Record of the op that produced a tensor. Backward walks these in reverse
// topological order; each node may fire exactly once per graph.
struct Node {
    const char* op = "";
    std::vector<Tensor> parents;
    std::function<void(const Tensor& out)> backprop;
    bool fired = false;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::unique_ptr<std::vector<double>> grad;  // lazily allocated, shape-matched
    std::shared_ptr<Node> node;                 // null for leaves
};

// Thread-local autograd switch. Ops record no graph while disabled.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data.assign(shape_numel(t.impl_->shape), 0.0);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor scalar(double value) { return full({1}, value); }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("tensor: value count does not match shape " + shape_str(shape));
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor randn(Shape shape, RandomStream& rng, double stddev = 1.0,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (double& x : t.data()) x = rng.normal(0.0, stddev);
        return t;
    }

    // Xavier-uniform for a [fan_in x fan_out] weight matrix.
    static Tensor xavier(int fan_in, int fan_out, RandomStream& rng, bool requires_grad = true) {
        double bound = std::sqrt(6.0 / (fan_in + fan_out));
        Tensor t = zeros({fan_in, fan_out}, requires_grad);
        for (double& x : t.data()) x = rng.uniform(-bound, bound);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<std::size_t>(i)]; }
    std::size_t numel() const { return impl_->data.size(); }

    int rows() const { check_rank(2); return impl_->shape[0]; }
    int cols() const { check_rank(2); return impl_->shape[1]; }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }

    double value() const {
        if (numel() != 1) throw std::invalid_argument("tensor: value() needs a scalar, got " + shape_str(shape()));
        return impl_->data[0];
    }

    double at(int r, int c) const { check_rank(2); return impl_->data[idx2(r, c)]; }
    double& at(int r, int c) { check_rank(2); return impl_->data[idx2(r, c)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) const { impl_->requires_grad = v; }

    // True if backward should propagate into or through this tensor.
    bool tracked() const { return impl_->requires_grad || impl_->node != nullptr; }

    const std::vector<double>* grad() const {
        return impl_->grad ? impl_->grad.get() : nullptr;
    }

    std::vector<double>& grad_buffer() const {
        if (!impl_->grad)
            impl_->grad = std::make_unique<std::vector<double>>(impl_->data.size(), 0.0);
        return *impl_->grad;
    }

    void zero_grad() const { grad_buffer().assign(numel(), 0.0); }
    void clear_grad() const { impl_->grad.reset(); }

    std::shared_ptr<Node>& node() const { return impl_->node; }
    TensorImpl* impl() const { return impl_.get(); }

    // Detached view of the same values: no node, no grad requirement.
    Tensor detach() const {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

private:
    void check_rank(int r) const {
        if (rank() != r)
            throw std::invalid_argument("tensor: expected rank " + std::to_string(r) + ", got " + shape_str(shape()));
    }
    std::size_t idx2(int r, int c) const {
        return static_cast<std::size_t>(r) * impl_->shape[1] + static_cast<std::size_t>(c);
    }

    std::shared_ptr<TensorImpl> impl_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    for (double x : t.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &x, sizeof bits);
        if (((bits >> 52) & 0x7ffULL) == 0x7ffULL)
            throw std::runtime_error(std::string("non-finite value in forward output of ") + op);
    }
}

// Attach the backward record to `out` if autograd is active and any parent
// participates in the graph.
inline void attach(Tensor& out, const char* op, std::vector<Tensor> parents,
                   std::function<void(const Tensor&)> backprop) {
    check_finite(out, op);
    if (!grad_mode()) return;
    bool tracked = false;
    for (const Tensor& p : parents)
        if (p.tracked()) { tracked = true; break; }
    if (!tracked) return;
    auto node = std::make_shared<Node>();
    node->op = op;
    node->parents = std::move(parents);
    node->backprop = std::move(backprop);
    out.node() = node;
    out.set_requires_grad(true);
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using CMapM = Eigen::Map<const EMat>;

inline CMapM cmap(const Tensor& t) { return CMapM(t.data().data(), t.rows(), t.cols()); }
inline CMapM cmap_grad(const Tensor& t) {
    return CMapM(t.grad()->data(), t.rows(), t.cols());
}
inline MapM map_grad_buf(const Tensor& t) {
    return MapM(t.grad_buffer().data(), t.rows(), t.cols());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    detail::attach(out, "add", {a, b}, [a, b](const Tensor& o) {
        const std::vector<double>& g = *o.grad();
        if (a.tracked()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.tracked()) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    detail::attach(out, "sub", {a, b}, [a, b](const Tensor& o) {
        const std::vector<double>& g = *o.grad();
        if (a.tracked()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.tracked()) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::attach(out, "mul", {a, b}, [a, b](const Tensor& o) {
        const std::vector<double>& g = *o.grad();
        if (a.tracked()) {
            auto& ga = a.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.tracked()) {
            auto& gb = b.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
        }
    });
    return out;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    detail::attach(out, "scale", {a}, [a, s](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + s;
    detail::attach(out, "add_scalar", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    // subgradient 0 at the kink
    detail::attach(out, "relu", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (a.data()[i] > 0.0) ga[i] += g[i];
    });
    return out;
}

inline Tensor abs_op(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::fabs(a.data()[i]);
    detail::attach(out, "abs", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = a.data()[i];
            if (x > 0.0) ga[i] += g[i];
            else if (x < 0.0) ga[i] -= g[i];
        }
    });
    return out;
}

// Elementwise Huber penalty: 0.5 x^2 inside |x| <= delta, delta (|x| - delta/2) outside.
inline Tensor huber(const Tensor& a, double delta) {
    detail::require(delta > 0.0, "huber: delta must be positive");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        double x = a.data()[i];
        double ax = std::fabs(x);
        out.data()[i] = ax <= delta ? 0.5 * x * x : delta * (ax - 0.5 * delta);
    }
    detail::attach(out, "huber", {a}, [a, delta](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = a.data()[i];
            double d = std::fabs(x) <= delta ? x : (x > 0.0 ? delta : -delta);
            ga[i] += g[i] * d;
        }
    });
    return out;
}

inline Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        double x = a.data()[i];
        out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    detail::attach(out, "gelu", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = a.data()[i];
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            ga[i] += g[i] * (cdf + x * pdf);
        }
    });
    return out;
}

inline Tensor tanh_op(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::tanh(a.data()[i]);
    detail::attach(out, "tanh", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double y = o.data()[i];
            ga[i] += g[i] * (1.0 - y * y);
        }
    });
    return out;
}

inline Tensor exp_op(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::exp(a.data()[i]);
    detail::attach(out, "exp", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * o.data()[i];
    });
    return out;
}

inline Tensor log_op(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::log(a.data()[i]);
    detail::attach(out, "log", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a.data()[i];
    });
    return out;
}

inline Tensor sqrt_op(const Tensor& a) {
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::sqrt(a.data()[i]);
    detail::attach(out, "sqrt", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / o.data()[i];
    });
    return out;
}

// Gradient passes through strictly inside [lo, hi], zero outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    detail::require(lo <= hi, "clamp: lo > hi");
    Tensor out = Tensor::zeros(a.shape());
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = std::min(hi, std::max(lo, a.data()[i]));
    detail::attach(out, "clamp", {a}, [a, lo, hi](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            double x = a.data()[i];
            if (x >= lo && x <= hi) ga[i] += g[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.data()) acc += x;  // fixed left-to-right order
    Tensor out = Tensor::from({1}, {acc});
    detail::attach(out, "sum", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        double g = (*o.grad())[0];
        auto& ga = a.grad_buffer();
        for (double& v : ga) v += g;
    });
    return out;
}

inline Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// column-wise mean over rows: [n x c] -> [1 x c]
inline Tensor mean_rows(const Tensor& a) {
    detail::require(a.rank() == 2, "mean_rows: rank-2 required");
    const int n = a.rows(), c = a.cols();
    Tensor out = Tensor::zeros({1, c});
    for (int r = 0; r < n; ++r)
        for (int j = 0; j < c; ++j)
            out.data()[static_cast<std::size_t>(j)] +=
                a.data()[static_cast<std::size_t>(r) * c + j];
    for (int j = 0; j < c; ++j) out.data()[static_cast<std::size_t>(j)] /= n;
    detail::attach(out, "mean_rows", {a}, [a, n, c](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (int r = 0; r < n; ++r)
            for (int j = 0; j < c; ++j)
                ga[static_cast<std::size_t>(r) * c + j] += g[static_cast<std::size_t>(j)] / n;
    });
    return out;
}

// ---------------------------------------------------------------------------
// matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 operands required");
    detail::require(a.cols() == b.rows(),
                    "matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out = Tensor::zeros({a.rows(), b.cols()});
    {
        detail::MapM o(out.data().data(), out.rows(), out.cols());
        o.noalias() = detail::cmap(a) * detail::cmap(b);
    }
    detail::attach(out, "matmul", {a, b}, [a, b](const Tensor& o) {
        detail::CMapM go = detail::cmap_grad(o);
        if (a.tracked()) detail::map_grad_buf(a).noalias() += go * detail::cmap(b).transpose();
        if (b.tracked()) detail::map_grad_buf(b).noalias() += detail::cmap(a).transpose() * go;
    });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    detail::require(a.rank() == 2, "transpose: rank-2 required");
    Tensor out = Tensor::zeros({a.cols(), a.rows()});
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c)
            out.at(c, r) = a.at(r, c);
    detail::attach(out, "transpose", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        detail::map_grad_buf(a).noalias() += detail::cmap_grad(o).transpose();
    });
    return out;
}

// x[m x n] + b[n] broadcast over rows.
inline Tensor add_rowvec(const Tensor& x, const Tensor& b) {
    detail::require(x.rank() == 2 && b.rank() == 1 && x.cols() == b.dim(0),
                    "add_rowvec: bias length must match columns");
    Tensor out = Tensor::zeros(x.shape());
    for (int r = 0; r < x.rows(); ++r)
        for (int c = 0; c < x.cols(); ++c)
            out.at(r, c) = x.at(r, c) + b.data()[static_cast<std::size_t>(c)];
    detail::attach(out, "add_rowvec", {x, b}, [x, b](const Tensor& o) {
        const std::vector<double>& g = *o.grad();
        const int rows = o.rows(), cols = o.cols();
        if (x.tracked()) {
            auto& gx = x.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (b.tracked()) {
            auto& gb = b.grad_buffer();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r) * cols + c];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape shape) {
    detail::require(shape_numel(shape) == a.numel(), "reshape: element count mismatch");
    Tensor out = Tensor::from(std::move(shape), a.data());
    detail::attach(out, "reshape", {a}, [a](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

inline Tensor slice_rows(const Tensor& a, int r0, int nr) {
    detail::require(a.rank() == 2 && r0 >= 0 && nr >= 1 && r0 + nr <= a.rows(), "slice_rows: out of range");
    const int cols = a.cols();
    Tensor out = Tensor::zeros({nr, cols});
    std::copy(a.data().begin() + static_cast<std::size_t>(r0) * cols,
              a.data().begin() + static_cast<std::size_t>(r0 + nr) * cols, out.data().begin());
    detail::attach(out, "slice_rows", {a}, [a, r0, cols](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        std::size_t base = static_cast<std::size_t>(r0) * cols;
        for (std::size_t i = 0; i < g.size(); ++i) ga[base + i] += g[i];
    });
    return out;
}

inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    detail::require(a.rank() == 2 && !idx.empty(), "gather_rows: bad arguments");
    const int cols = a.cols();
    for (int r : idx) detail::require(r >= 0 && r < a.rows(), "gather_rows: index out of range");
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()), cols});
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy(a.data().begin() + static_cast<std::size_t>(idx[i]) * cols,
                  a.data().begin() + static_cast<std::size_t>(idx[i] + 1) * cols,
                  out.data().begin() + i * static_cast<std::size_t>(cols));
    detail::attach(out, "gather_rows", {a}, [a, idx, cols](const Tensor& o) {
        if (!a.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& ga = a.grad_buffer();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (int c = 0; c < cols; ++c)
                ga[static_cast<std::size_t>(idx[i]) * cols + c] += g[i * static_cast<std::size_t>(cols) + c];
    });
    return out;
}

inline Tensor slice_cols(const Tensor& a, int c0, int nc) {
    detail::require(a.rank() == 2 && c0 >= 0 && nc >= 1 && c0 + nc <= a.cols(), "slice_cols: out of range");
    Tensor out = Tensor::zeros({a.rows(), nc});
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < nc; ++c)
            out.at(r, c) = a.at(r, c0 + c);
    detail::attach(out, "slice_cols", {a}, [a, c0, nc](const Tensor& o) {
        if (!a.tracked()) return;
        auto& ga = a.grad_buffer();
        const int cols = a.cols(), rows = o.rows();
        const std::vector<double>& g = *o.grad();
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < nc; ++c)
                ga[static_cast<std::size_t>(r) * cols + c0 + c] += g[static_cast<std::size_t>(r) * nc + c];
    });
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "concat_rows: empty input");
    const int cols = parts[0].cols();
    int rows = 0;
    for (const Tensor& p : parts) {
        detail::require(p.rank() == 2 && p.cols() == cols, "concat_rows: column mismatch");
        rows += p.rows();
    }
    Tensor out = Tensor::zeros({rows, cols});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.numel();
    }
    detail::attach(out, "concat_rows", {parts}, [parts](const Tensor& o) {
        const std::vector<double>& g = *o.grad();
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            if (p.tracked()) {
                auto& gp = p.grad_buffer();
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
            }
            off += p.numel();
        }
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "concat_cols: empty input");
    const int rows = parts[0].rows();
    int cols = 0;
    for (const Tensor& p : parts) {
        detail::require(p.rank() == 2 && p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
    }
    Tensor out = Tensor::zeros({rows, cols});
    int c0 = 0;
    for (const Tensor& p : parts) {
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < p.cols(); ++c)
                out.at(r, c0 + c) = p.at(r, c);
        c0 += p.cols();
    }
    detail::attach(out, "concat_cols", {parts}, [parts, rows, cols](const Tensor& o) {
        const std::vector<double>& g = *o.grad();
        int c0 = 0;
        for (const Tensor& p : parts) {
            if (p.tracked()) {
                auto& gp = p.grad_buffer();
                for (int r = 0; r < rows; ++r)
                    for (int c = 0; c < p.cols(); ++c)
                        gp[static_cast<std::size_t>(r) * p.cols() + c] += g[static_cast<std::size_t>(r) * cols + c0 + c];
            }
            c0 += p.cols();
        }
    });
    return out;
}

// [n x (h*dh)] -> [h x n x dh]
inline Tensor split_heads(const Tensor& x, int heads) {
    detail::require(x.rank() == 2 && heads >= 1 && x.cols() % heads == 0,
                    "split_heads: columns must divide evenly into heads");
    const int n = x.rows(), dh = x.cols() / heads;
    Tensor out = Tensor::zeros({heads, n, dh});
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dh; ++j)
                out.data()[(static_cast<std::size_t>(h) * n + i) * dh + j] =
                    x.data()[static_cast<std::size_t>(i) * x.cols() + h * dh + j];
    detail::attach(out, "split_heads", {x}, [x, heads, n, dh](const Tensor& o) {
        if (!x.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& gx = x.grad_buffer();
        const int cols = heads * dh;
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dh; ++j)
                    gx[static_cast<std::size_t>(i) * cols + h * dh + j] +=
                        g[(static_cast<std::size_t>(h) * n + i) * dh + j];
    });
    return out;
}

// [h x n x dh] -> [n x (h*dh)]
inline Tensor merge_heads(const Tensor& x) {
    detail::require(x.rank() == 3, "merge_heads: rank-3 required");
    const int heads = x.dim(0), n = x.dim(1), dh = x.dim(2);
    Tensor out = Tensor::zeros({n, heads * dh});
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dh; ++j)
                out.data()[static_cast<std::size_t>(i) * heads * dh + h * dh + j] =
                    x.data()[(static_cast<std::size_t>(h) * n + i) * dh + j];
    detail::attach(out, "merge_heads", {x}, [x, heads, n, dh](const Tensor& o) {
        if (!x.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& gx = x.grad_buffer();
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < dh; ++j)
                    gx[(static_cast<std::size_t>(h) * n + i) * dh + j] +=
                        g[static_cast<std::size_t>(i) * heads * dh + h * dh + j];
    });
    return out;
}

// Rank-3 slab [h x n x d] -> [n x d] at head index i.
inline Tensor slab(const Tensor& x, int i) {
    detail::require(x.rank() == 3 && i >= 0 && i < x.dim(0), "slab: index out of range");
    const int n = x.dim(1), d = x.dim(2);
    Tensor out = Tensor::zeros({n, d});
    const std::size_t base = static_cast<std::size_t>(i) * n * d;
    std::copy(x.data().begin() + base, x.data().begin() + base + static_cast<std::size_t>(n) * d,
              out.data().begin());
    detail::attach(out, "slab", {x}, [x, base](const Tensor& o) {
        if (!x.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& gx = x.grad_buffer();
        for (std::size_t k = 0; k < g.size(); ++k) gx[base + k] += g[k];
    });
    return out;
}

// [n x d] slabs -> [h x n x d]
inline Tensor stack_slabs(const std::vector<Tensor>& parts) {
    detail::require(!parts.empty(), "stack_slabs: empty input");
    const int n = parts[0].rows(), d = parts[0].cols();
    for (const Tensor& p : parts)
        detail::require(p.rank() == 2 && p.rows() == n && p.cols() == d, "stack_slabs: shape mismatch");
    Tensor out = Tensor::zeros({static_cast<int>(parts.size()), n, d});
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + off);
        off += p.numel();
    }
    detail::attach(out, "stack_slabs", {parts}, [parts](const Tensor& o) {
        const std::vector<double>& g = *o.grad();
        std::size_t off = 0;
        for (const Tensor& p : parts) {
            if (p.tracked()) {
                auto& gp = p.grad_buffer();
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
            }
            off += p.numel();
        }
    });
    return out;
}

// Cumulative sum down the rows: out[i] = sum of x[0..i].
inline Tensor cumsum_rows(const Tensor& x) {
    detail::require(x.rank() == 2, "cumsum_rows: rank-2 required");
    const int rows = x.rows(), cols = x.cols();
    Tensor out = Tensor::zeros(x.shape());
    for (int c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (int r = 0; r < rows; ++r) {
            acc += x.at(r, c);
            out.at(r, c) = acc;
        }
    }
    detail::attach(out, "cumsum_rows", {x}, [x, rows, cols](const Tensor& o) {
        if (!x.tracked()) return;
        const std::vector<double>& g = *o.grad();
        auto& gx = x.grad_buffer();
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int r = rows - 1; r >= 0; --r) {
                acc += g[static_cast<std::size_t>(r) * cols + c];
                gx[static_cast<std::size_t>(r) * cols + c] += acc;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization / attention primitives

// Row softmax with max-subtraction. `mask`, when given, marks valid columns;
// masked columns output exactly 0 and receive no gradient. A row with no
// valid column is a contract violation.
inline Tensor softmax_masked(const Tensor& x, const Mask* mask) {
    detail::require(x.rank() == 2, "softmax: rank-2 required");
    const int rows = x.rows(), cols = x.cols();
    if (mask) {
        detail::require(static_cast<int>(mask->size()) == cols, "softmax: mask length mismatch");
        bool any = false;
        for (std::uint8_t m : *mask) any = any || m;
        if (!any) throw std::runtime_error("softmax: all positions masked");
    }
    Tensor out = Tensor::zeros(x.shape());
    for (int r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < cols; ++c)
            if (!mask || (*mask)[static_cast<std::size_t>(c)])
                mx = std::max(mx, x.at(r, c));
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            if (!mask || (*mask)[static_cast<std::size_t>(c)]) {
                double e = std::exp(x.at(r, c) - mx);
                out.at(r, c) = e;
                z += e;
            }
        }
        for (int c = 0; c < cols; ++c) out.at(r, c) /= z;
    }
    detail::attach(out, "softmax", {x}, [x, mask_copy = mask ? *mask : Mask{}](const Tensor& o) {
        if (!x.tracked()) return;
        const bool has_mask = !mask_copy.empty();
        const int rows = o.rows(), cols = o.cols();
        const std::vector<double>& g = *o.grad();
        auto& gx = x.grad_buffer();
        for (int r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int c = 0; c < cols; ++c) {
                if (has_mask && !mask_copy[static_cast<std::size_t>(c)]) continue;
                std::size_t i = static_cast<std::size_t>(r) * cols + c;
                dot += g[i] * o.data()[i];
            }
            for (int c = 0; c < cols; ++c) {
                if (has_mask && !mask_copy[static_cast<std::size_t>(c)]) continue;
                std::size_t i = static_cast<std::size_t>(r) * cols + c;
                gx[i] += o.data()[i] * (g[i] - dot);
            }
        }
    });
    return out;
}

inline Tensor softmax(const Tensor& x) {
    if (x.rank() == 1) return reshape(softmax_masked(reshape(x, {1, x.dim(0)}), nullptr), x.shape());
    return softmax_masked(x, nullptr);
}

// Per-row normalization to zero mean / unit variance, then affine.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    detail::require(x.rank() == 2, "layernorm: rank-2 required");
    const int rows = x.rows(), cols = x.cols();
    detail::require(gain.rank() == 1 && gain.dim(0) == cols, "layernorm: gain length mismatch");
    detail::require(bias.rank() == 1 && bias.dim(0) == cols, "layernorm: bias length mismatch");
    detail::require(eps > 0.0, "layernorm: eps must be positive");
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> mu(static_cast<std::size_t>(rows)), istd(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r) {
        double m = 0.0;
        for (int c = 0; c < cols; ++c) m += x.at(r, c);
        m /= cols;
        double v = 0.0;
        for (int c = 0; c < cols; ++c) {
            double d = x.at(r, c) - m;
            v += d * d;
        }
        v /= cols;
        mu[static_cast<std::size_t>(r)] = m;
        istd[static_cast<std::size_t>(r)] = 1.0 / std::sqrt(v + eps);
        for (int c = 0; c < cols; ++c)
            out.at(r, c) = (x.at(r, c) - m) * istd[static_cast<std::size_t>(r)] * gain.data()[static_cast<std::size_t>(c)] +
                           bias.data()[static_cast<std::size_t>(c)];
    }
    detail::attach(out, "layernorm", {x, gain, bias},
                   [x, gain, bias, mu, istd, rows, cols](const Tensor& o) {
        const std::vector<double>& g = *o.grad();
        for (int r = 0; r < rows; ++r) {
            const double m = mu[static_cast<std::size_t>(r)];
            const double is = istd[static_cast<std::size_t>(r)];
            // accumulate row sums for the normalization jacobian
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int c = 0; c < cols; ++c) {
                std::size_t i = static_cast<std::size_t>(r) * cols + c;
                double xhat = (x.data()[i] - m) * is;
                double dxhat = g[i] * gain.data()[static_cast<std::size_t>(c)];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            if (x.tracked()) {
                auto& gx = x.grad_buffer();
                for (int c = 0; c < cols; ++c) {
                    std::size_t i = static_cast<std::size_t>(r) * cols + c;
                    double xhat = (x.data()[i] - m) * is;
                    double dxhat = g[i] * gain.data()[static_cast<std::size_t>(c)];
                    gx[i] += is * (dxhat - sum_dxhat / cols - xhat * sum_dxhat_xhat / cols);
                }
            }
        }
        if (gain.tracked()) {
            auto& gg = gain.grad_buffer();
            for (int r = 0; r < rows; ++r) {
                const double m = mu[static_cast<std::size_t>(r)];
                const double is = istd[static_cast<std::size_t>(r)];
                for (int c = 0; c < cols; ++c) {
                    std::size_t i = static_cast<std::size_t>(r) * cols + c;
                    gg[static_cast<std::size_t>(c)] += g[i] * (x.data()[i] - m) * is;
                }
            }
        }
        if (bias.tracked()) {
            auto& gb = bias.grad_buffer();
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r) * cols + c];
        }
    });
    return out;
}

// Scaled dot-product attention over per-head slabs.
// q [h x nq x d], k/v [h x nk x d], mask over the nk key positions.
// Masked keys are excluded from the softmax entirely, so appending masked
// slots leaves the output bit-identical.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask) {
    detail::require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: rank-3 q/k/v required");
    const int heads = q.dim(0), d = q.dim(2), nk = k.dim(1);
    detail::require(k.dim(0) == heads && v.dim(0) == heads, "attention: head count mismatch");
    detail::require(k.dim(2) == d && v.dim(2) == d, "attention: channel mismatch");
    detail::require(v.dim(1) == nk, "attention: key/value length mismatch");
    if (mask) {
        detail::require(static_cast<int>(mask->size()) == nk, "attention: mask length mismatch");
        bool any = false;
        for (std::uint8_t m : *mask) any = any || m;
        if (!any) throw std::runtime_error("attention: all key positions masked");
    }
    const double sc = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slab(q, h), kh = slab(k, h), vh = slab(v, h);
        Tensor scores = scale(matmul(qh, transpose(kh)), sc);
        Tensor attn = softmax_masked(scores, mask);
        outs.push_back(matmul(attn, vh));
    }
    return stack_slabs(outs);
}

// ---------------------------------------------------------------------------
// backward

// Populates grads of every reachable tracked tensor with d(loss)/d(tensor).
// Grad accumulation across separate graphs (per-sample accumulation within a
// batch) sums naturally; re-running backward on the same graph is an error.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    if (!loss.tracked()) throw std::runtime_error("backward: loss is detached from the graph");
    if (loss.node() && loss.node()->fired) throw std::runtime_error("backward: graph already consumed; rebuild the forward pass");

    // iterative post-order DFS over parent links, deduped by impl pointer
    // (the set is membership-only, so traversal order stays deterministic)
    std::vector<Tensor> order;
    std::vector<std::pair<Tensor, std::size_t>> stack;
    std::unordered_set<const TensorImpl*> seen;
    stack.emplace_back(loss, 0);
    seen.insert(loss.impl());
    while (!stack.empty()) {
        auto& [t, next] = stack.back();
        if (t.node() && next < t.node()->parents.size()) {
            Tensor p = t.node()->parents[next++];
            if (p.node() && seen.insert(p.impl()).second)
                stack.emplace_back(p, 0);
        } else {
            order.push_back(t);
            stack.pop_back();
        }
    }

    loss.grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (!it->node()) continue;
        if (it->node()->fired) throw std::runtime_error("backward: node revisited; graph reuse is not supported");
        it->node()->backprop(*it);
        it->node()->fired = true;
    }
}

// ---------------------------------------------------------------------------
// gradient checking

// Central-difference check of a scalar function against autodiff.
// Returns max over input elements of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         std::vector<Tensor> inputs, double eps = 1e-5) {
    if (eps < 1e-7 || eps > 1e-4) throw std::invalid_argument("grad_check: eps outside [1e-7, 1e-4]");
    for (Tensor& t : inputs) {
        t.set_requires_grad(true);
        t.clear_grad();
    }
    Tensor loss = f(inputs);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
    backward(loss);

    double worst = 0.0;
    for (Tensor& t : inputs) {
        const std::vector<double>* g = t.grad();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            double g_ad = g ? (*g)[i] : 0.0;
            double saved = t.data()[i];
            double g_fd;
            {
                NoGradGuard ng;
                t.data()[i] = saved + eps;
                double up = f(inputs).value();
                t.data()[i] = saved - eps;
                double dn = f(inputs).value();
                t.data()[i] = saved;
                g_fd = (up - dn) / (2.0 * eps);
            }
            double rel = std::fabs(g_ad - g_fd) / std::max({1.0, std::fabs(g_ad), std::fabs(g_fd)});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace minidrive
