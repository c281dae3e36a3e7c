#pragma once

// Lightweight distillation module: input projection to a narrow hidden
// width, a single learnable planning query refined by K decoder layers of
// cross-attention over the compressed tokens, and an output projection back
// to the teacher's planning-token space.

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "minidrive/encoder.hpp"
#include "minidrive/nn.hpp"
#include "minidrive/tensor.hpp"

namespace minidrive {

inline constexpr int kStudentK = 6;
inline constexpr int kCh = 64;
inline constexpr int kStudentHeads = 4;

struct StudentParams {
    int depth = kStudentK, width = kCh, heads = kStudentHeads, out_width = 256;
    Linear in_proj;  // kCc -> width
    LayerNorm in_ln;
    Tensor q_plan;   // 1 x width
    std::vector<DecoderLayer> layers;
    LayerNorm final_ln;
    Linear out_proj;  // width -> out_width (teacher C_p)

    StudentParams() = default;
    StudentParams(int K, int w, int h, int cp, RandomStream& rng)
        : depth(K), width(w), heads(h), out_width(cp), in_proj(kCc, w, rng), in_ln(w),
          q_plan(Tensor::randn({1, w}, rng, 0.02, true)), final_ln(w), out_proj(w, cp, rng) {
        if (K < 0 || K > 12) throw std::invalid_argument("student: depth outside [0, 12]");
        for (int i = 0; i < K; ++i) layers.emplace_back(w, h, rng);
    }
    explicit StudentParams(RandomStream& rng)
        : StudentParams(kStudentK, kCh, kStudentHeads, 256, rng) {}

    void register_params(ParamRegistry& reg, const std::string& prefix = "student/") const {
        in_proj.register_params(reg, prefix + "in_proj");
        in_ln.register_params(reg, prefix + "in_ln");
        reg.add(prefix + "q_plan", q_plan);
        for (std::size_t i = 0; i < layers.size(); ++i)
            layers[i].register_params(reg, prefix + "layer" + std::to_string(i));
        final_ln.register_params(reg, prefix + "final_ln");
        out_proj.register_params(reg, prefix + "out_proj");
    }
};

inline std::pair<Tensor, Mask> input_project(const TokenSeq& seq, const StudentParams& p) {
    return {p.in_ln(p.in_proj(seq.tokens)), seq.mask};
}

inline Tensor student_forward(const TokenSeq& seq, const StudentParams& p) {
    auto [compressed, mask] = input_project(compact_seq(seq), p);
    Tensor x = p.q_plan;
    for (const DecoderLayer& layer : p.layers) x = layer(x, compressed, &mask);
    return p.out_proj(p.final_ln(x));  // 1 x out_width
}

inline std::size_t count_params(const StudentParams& p) {
    ParamRegistry reg;
    p.register_params(reg);
    return reg.total_params();
}

// closed-form count for the default student, used by the teacher's ratio check
inline std::size_t student_reasoner_param_count(int K = kStudentK, int w = kCh, int cc = kCc,
                                                int cp = 256) {
    auto u = [](int n) { return static_cast<std::size_t>(n); };
    std::size_t lin_in = u(cc) * u(w) + u(w);
    std::size_t ln = 2u * u(w);
    std::size_t attn = 4u * (u(w) * u(w) + u(w));
    std::size_t ffn = u(w) * u(4 * w) + u(4 * w) + u(4 * w) * u(w) + u(w);
    std::size_t layer = 2u * attn + ffn + 3u * ln;
    std::size_t lin_out = u(w) * u(cp) + u(cp);
    return lin_in + ln + u(w) + u(K) * layer + ln + lin_out;
}

}  // namespace minidrive
