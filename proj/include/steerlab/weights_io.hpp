#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>

#include "steerlab/error.hpp"
#include "steerlab/model.hpp"
#include "steerlab/util.hpp"

// TLM1 weight container, all integers and floats little-endian:
//
//   offset  size  field
//   0       4     magic "TLM1"
//   4       4     u32 format version (1)
//   8       24    u32 n_layers, d_model, n_heads, d_ff, vocab_size, max_seq
//   32      8     u64 seed
//   40      8     u64 parameter count
//   48      ...   f32 blocks in Weights::for_each_block order
namespace steerlab::tinylm {

inline constexpr std::array<char, 4> weights_magic = {'T', 'L', 'M', '1'};
inline constexpr std::uint32_t weights_format_version = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
    }
}

template <typename U>
U get_le(std::string_view in, std::size_t& pos) {
    if (pos + sizeof(U) > in.size()) {
        fail(ErrorCode::FormatError, "weight file truncated");
    }
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    }
    pos += sizeof(U);
    return v;
}

} // namespace detail

inline std::string serialize_weights(const Weights<float>& w) {
    const auto& c = w.config;
    std::string out(weights_magic.begin(), weights_magic.end());
    detail::put_le<std::uint32_t>(out, weights_format_version);
    for (const int v : {c.n_layers, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.max_seq}) {
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
    }
    detail::put_le<std::uint64_t>(out, c.seed);
    detail::put_le<std::uint64_t>(out, w.parameter_count());
    w.for_each_block([&](const std::string&, std::span<const float> s) {
        for (const float f : s) {
            detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
        }
    });
    return out;
}

inline Weights<float> deserialize_weights(std::string_view in) {
    if (in.size() < 48 || std::memcmp(in.data(), weights_magic.data(), 4) != 0) {
        fail(ErrorCode::FormatError, "not a TLM1 weight file");
    }
    std::size_t pos = 4;
    const auto version = detail::get_le<std::uint32_t>(in, pos);
    require(version == weights_format_version, ErrorCode::FormatError,
            "unsupported weight format version " + std::to_string(version));
    ModelConfig c;
    c.n_layers = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
    c.d_model = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
    c.n_heads = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
    c.d_ff = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
    c.vocab_size = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
    c.max_seq = static_cast<int>(detail::get_le<std::uint32_t>(in, pos));
    c.seed = detail::get_le<std::uint64_t>(in, pos);
    const auto count = detail::get_le<std::uint64_t>(in, pos);
    try {
        c.validate();
    } catch (const Error& e) {
        fail(ErrorCode::FormatError, std::string("bad header: ") + e.what());
    }
    auto w = Weights<float>::zeros(c);
    require(count == w.parameter_count(), ErrorCode::FormatError, "parameter count does not match header");
    require(in.size() == pos + count * 4, ErrorCode::FormatError, "weight payload has wrong length");
    w.for_each_block([&](const std::string& name, std::span<float> s) {
        for (auto& f : s) {
            f = std::bit_cast<float>(detail::get_le<std::uint32_t>(in, pos));
            if (!std::isfinite(f)) {
                fail(ErrorCode::FormatError, "non-finite value in block " + name);
            }
        }
    });
    return w;
}

inline void save_weights(const std::string& path, const Weights<float>& w) {
    write_file(path, serialize_weights(w));
}

inline Weights<float> load_weights(const std::string& path) {
    return deserialize_weights(read_file(path));
}

} // namespace steerlab::tinylm
