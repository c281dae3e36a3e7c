#pragma once

// Neural network building blocks on top of the autodiff tensors.
//
// Modules own their parameter tensors and expose them through a
// ParamRegistry: an ordered name -> tensor map. Registration order is fixed
// by construction order, which in turn fixes checkpoint layout and optimizer
// iteration order.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "minidrive/tensor.hpp"

namespace minidrive {

class ParamRegistry {
public:
    void add(const std::string& name, const Tensor& t) {
        for (const auto& [n, _] : items_)
            if (n == name) throw std::invalid_argument("param registered twice: " + name);
        items_.emplace_back(name, t);
    }

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

    Tensor get(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw std::out_of_range("no such param: " + name);
    }

    bool has(const std::string& name) const {
        for (const auto& [n, _] : items_)
            if (n == name) return true;
        return false;
    }

    std::vector<Tensor> with_prefix(const std::string& prefix) const {
        std::vector<Tensor> out;
        for (const auto& [n, t] : items_)
            if (n.rfind(prefix, 0) == 0) out.push_back(t);
        return out;
    }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [n, _] : items_)
            if (n.rfind(prefix, 0) == 0) out.push_back(n);
        return out;
    }

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& [_, t] : items_) n += t.numel();
        return n;
    }

    std::size_t count_with_prefix(const std::string& prefix) const {
        std::size_t n = 0;
        for (const auto& [name, t] : items_)
            if (name.rfind(prefix, 0) == 0) n += t.numel();
        return n;
    }

    void zero_grads() const {
        for (const auto& [_, t] : items_) t.zero_grad();
    }

    void set_requires_grad(const std::string& prefix, bool v) const {
        for (const auto& [n, t] : items_)
            if (n.rfind(prefix, 0) == 0) t.set_requires_grad(v);
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

struct Linear {
    Tensor W, b;

    Linear() = default;
    Linear(int in, int out, RandomStream& rng)
        : W(Tensor::xavier(in, out, rng)), b(Tensor::zeros({out}, true)) {}

    void register_params(ParamRegistry& reg, const std::string& prefix) const {
        reg.add(prefix + ".W", W);
        reg.add(prefix + ".b", b);
    }

    Tensor operator()(const Tensor& x) const { return add_rowvec(matmul(x, W), b); }
};

struct LayerNorm {
    Tensor gain, bias;
    double eps = 1e-5;

    LayerNorm() = default;
    explicit LayerNorm(int dim)
        : gain(Tensor::full({dim}, 1.0, true)), bias(Tensor::zeros({dim}, true)) {}

    void register_params(ParamRegistry& reg, const std::string& prefix) const {
        reg.add(prefix + ".gain", gain);
        reg.add(prefix + ".bias", bias);
    }

    Tensor operator()(const Tensor& x) const { return layernorm(x, gain, bias, eps); }
};

struct MultiHeadAttention {
    int heads = 1;
    Linear wq, wk, wv, wo;

    MultiHeadAttention() = default;
    MultiHeadAttention(int dim, int heads_, RandomStream& rng)
        : heads(heads_), wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng) {
        if (dim % heads_ != 0) throw std::invalid_argument("attention: dim must divide by heads");
    }

    void register_params(ParamRegistry& reg, const std::string& prefix) const {
        wq.register_params(reg, prefix + ".q");
        wk.register_params(reg, prefix + ".k");
        wv.register_params(reg, prefix + ".v");
        wo.register_params(reg, prefix + ".o");
    }

    // q_in [nq x C] attends over kv_in [nk x C]; mask (optional) marks valid
    // key rows.
    Tensor operator()(const Tensor& q_in, const Tensor& kv_in, const Mask* mask = nullptr) const {
        Tensor q = split_heads(wq(q_in), heads);
        Tensor k = split_heads(wk(kv_in), heads);
        Tensor v = split_heads(wv(kv_in), heads);
        return wo(merge_heads(attention(q, k, v, mask)));
    }
};

struct FeedForward {
    Linear fc1, fc2;

    FeedForward() = default;
    FeedForward(int dim, int hidden, RandomStream& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

    void register_params(ParamRegistry& reg, const std::string& prefix) const {
        fc1.register_params(reg, prefix + ".fc1");
        fc2.register_params(reg, prefix + ".fc2");
    }

    Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }
};

// Pre-LN self-attention block: x += attn(LN(x)); x += ffn(LN(x)).
struct EncoderLayer {
    LayerNorm ln1, ln2;
    MultiHeadAttention attn;
    FeedForward ffn;

    EncoderLayer() = default;
    EncoderLayer(int dim, int heads, RandomStream& rng)
        : ln1(dim), ln2(dim), attn(dim, heads, rng), ffn(dim, 4 * dim, rng) {}

    void register_params(ParamRegistry& reg, const std::string& prefix) const {
        ln1.register_params(reg, prefix + ".ln1");
        ln2.register_params(reg, prefix + ".ln2");
        attn.register_params(reg, prefix + ".attn");
        ffn.register_params(reg, prefix + ".ffn");
    }

    Tensor operator()(const Tensor& x, const Mask* mask = nullptr) const {
        Tensor h = add(x, attn(ln1(x), ln1(x), mask));
        return add(h, ffn(ln2(h)));
    }
};

// Pre-LN decoder block: self-attention over the queries, cross-attention
// into a context sequence, then the feed-forward.
struct DecoderLayer {
    LayerNorm ln1, ln2, ln3;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;

    DecoderLayer() = default;
    DecoderLayer(int dim, int heads, RandomStream& rng)
        : ln1(dim), ln2(dim), ln3(dim),
          self_attn(dim, heads, rng), cross_attn(dim, heads, rng), ffn(dim, 4 * dim, rng) {}

    void register_params(ParamRegistry& reg, const std::string& prefix) const {
        ln1.register_params(reg, prefix + ".ln1");
        ln2.register_params(reg, prefix + ".ln2");
        ln3.register_params(reg, prefix + ".ln3");
        self_attn.register_params(reg, prefix + ".self");
        cross_attn.register_params(reg, prefix + ".cross");
        ffn.register_params(reg, prefix + ".ffn");
    }

    Tensor operator()(const Tensor& x, const Tensor& context, const Mask* context_mask) const {
        Tensor h = add(x, self_attn(ln1(x), ln1(x), nullptr));
        h = add(h, cross_attn(ln2(h), context, context_mask));
        return add(h, ffn(ln3(h)));
    }
};

// Small fully connected stack with GELU between layers (used by the heads).
struct MLP {
    std::vector<Linear> layers;

    MLP() = default;
    MLP(const std::vector<int>& dims, RandomStream& rng) {
        if (dims.size() < 2) throw std::invalid_argument("mlp: need at least in/out dims");
        for (std::size_t i = 0; i + 1 < dims.size(); ++i)
            layers.emplace_back(dims[i], dims[i + 1], rng);
    }

    void register_params(ParamRegistry& reg, const std::string& prefix) const {
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].register_params(reg, prefix + ".l" + std::to_string(i));
    }

    Tensor operator()(Tensor x) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            x = layers[i](x);
            if (i + 1 < layers.size()) x = gelu(x);
        }
        return x;
    }
};

}  // namespace minidrive
