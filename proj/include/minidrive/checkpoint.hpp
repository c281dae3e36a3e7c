#pragma once

// Checkpoint container: fixed magic, UTF-8 JSON manifest, then one
// little-endian float32 blob per tensor, concatenated in manifest order.
//
//   bytes 0..7   "MDCKPT1\n"
//   bytes 8..11  u32 LE manifest byte length
//   manifest     JSON array of {"name","shape","dtype":"f32","offset"}
//   blobs        float32 LE payloads, offsets relative to blob section start
//
// Values are stored at float32; loading widens back to float64. Saving a
// loaded checkpoint reproduces the original bytes exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "minidrive/nn.hpp"
#include "minidrive/tensor.hpp"

namespace minidrive {

inline constexpr char kCkptMagic[8] = {'M', 'D', 'C', 'K', 'P', 'T', '1', '\n'};

namespace detail {

inline void append_f32_le(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float read_f32_le(const unsigned char* p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail

inline std::string checkpoint_bytes(const std::vector<std::pair<std::string, Tensor>>& items) {
    nlohmann::json manifest = nlohmann::json::array();
    std::string blobs;
    for (const auto& [name, t] : items) {
        manifest.push_back({{"name", name},
                            {"shape", t.shape()},
                            {"dtype", "f32"},
                            {"offset", blobs.size()}});
        for (double x : t.data()) detail::append_f32_le(blobs, static_cast<float>(x));
    }
    std::string mtxt = manifest.dump();
    if (mtxt.size() > 0xffffffffULL) throw std::runtime_error("checkpoint: manifest too large");
    std::string out(kCkptMagic, 8);
    std::uint32_t mlen = static_cast<std::uint32_t>(mtxt.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((mlen >> (8 * i)) & 0xff));
    out += mtxt;
    out += blobs;
    return out;
}

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& items) {
    std::string bytes = checkpoint_bytes(items);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("checkpoint: cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("checkpoint: write failed: " + path);
}

inline void save_checkpoint(const std::string& path, const ParamRegistry& reg) {
    save_checkpoint(path, reg.items());
}

// Loaded tensors preserve manifest order; the map form is for lookups.
struct LoadedCheckpoint {
    std::vector<std::pair<std::string, Tensor>> items;

    const Tensor* find(const std::string& name) const {
        for (const auto& [n, t] : items)
            if (n == name) return &t;
        return nullptr;
    }

    bool has_prefix(const std::string& prefix) const {
        for (const auto& [n, _] : items)
            if (n.rfind(prefix, 0) == 0) return true;
        return false;
    }
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCkptMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    std::uint32_t mlen = 0;
    for (int i = 0; i < 4; ++i)
        mlen |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    if (bytes.size() < 12 + static_cast<std::size_t>(mlen))
        throw std::runtime_error("checkpoint: truncated manifest in " + path);
    nlohmann::json manifest = nlohmann::json::parse(bytes.substr(12, mlen));
    const std::size_t blob0 = 12 + mlen;

    LoadedCheckpoint out;
    for (const auto& e : manifest) {
        std::string name = e.at("name").get<std::string>();
        Shape shape = e.at("shape").get<Shape>();
        if (e.at("dtype").get<std::string>() != "f32")
            throw std::runtime_error("checkpoint: unsupported dtype for " + name);
        std::size_t off = e.at("offset").get<std::size_t>();
        std::size_t n = shape_numel(shape);
        if (blob0 + off + 4 * n > bytes.size())
            throw std::runtime_error("checkpoint: truncated blob for " + name);
        Tensor t = Tensor::zeros(shape);
        const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data()) + blob0 + off;
        for (std::size_t i = 0; i < n; ++i)
            t.data()[i] = static_cast<double>(detail::read_f32_le(p + 4 * i));
        out.items.emplace_back(std::move(name), std::move(t));
    }
    return out;
}

// Copies checkpoint values into registered parameters by name. Every selected
// checkpoint entry must land in a matching registered tensor.
inline void restore_params(const ParamRegistry& reg, const LoadedCheckpoint& ckpt,
                           const std::string& prefix = "") {
    std::size_t applied = 0;
    for (const auto& [name, src] : ckpt.items) {
        if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
        if (!reg.has(name)) throw std::runtime_error("checkpoint: unexpected tensor " + name);
        Tensor dst = reg.get(name);
        if (dst.shape() != src.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + name + ": " +
                                     shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
        dst.data() = src.data();
        ++applied;
    }
    std::size_t expected = reg.names_with_prefix(prefix).size();
    if (applied != expected)
        throw std::runtime_error("checkpoint: restored " + std::to_string(applied) + " of " +
                                 std::to_string(expected) + " tensors under '" + prefix + "'");
}

// FNV-1a 64 over names, shapes, and float32 payloads of a namespace, in
// registration order. Used for freeze-integrity checks.
inline std::uint64_t namespace_hash(const std::vector<std::pair<std::string, Tensor>>& items,
                                    const std::string& prefix) {
    std::uint64_t h = 1469598103934665603ULL;
    auto eat = [&h](const void* data, std::size_t n) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto& [name, t] : items) {
        if (!prefix.empty() && name.rfind(prefix, 0) != 0) continue;
        eat(name.data(), name.size());
        for (int d : t.shape()) {
            std::uint32_t u = static_cast<std::uint32_t>(d);
            eat(&u, 4);
        }
        for (double x : t.data()) {
            float v = static_cast<float>(x);
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            eat(&bits, 4);
        }
    }
    return h;
}

inline std::uint64_t namespace_hash(const ParamRegistry& reg, const std::string& prefix) {
    return namespace_hash(reg.items(), prefix);
}

}  // namespace minidrive
