#pragma once

// Binary tensor container. Layout:
//   magic "ACE1" | u32 version | u32 tensor count
//   per tensor: u32 name length | name bytes | u32 rows | u32 cols |
//               rows*cols little-endian float64 values
// Round trips are bit exact. A JSON sidecar carries run metadata.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ace/common.hpp"
#include "ace/tensor.hpp"

namespace ace {

struct NamedTensor {
    std::string name;
    Tensor value;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw ParseError("checkpoint: truncated header field");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw ParseError("checkpoint: truncated payload");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write("ACE1", 4);
    detail::put_u32(os, kCheckpointVersion);
    detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        detail::put_u32(os, static_cast<std::uint32_t>(nt.name.size()));
        os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(nt.value.rows()));
        detail::put_u32(os, static_cast<std::uint32_t>(nt.value.cols()));
        for (std::size_t k = 0; k < nt.value.size(); ++k) detail::put_f64(os, nt.value[k]);
    }
    if (!os) throw IoError("write failed: " + path);
}

inline std::vector<NamedTensor> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for read: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "ACE1", 4) != 0)
        throw ParseError("checkpoint: bad magic in " + path);
    const std::uint32_t version = detail::get_u32(is);
    if (version != kCheckpointVersion)
        throw ParseError("checkpoint: unsupported version " + std::to_string(version));
    const std::uint32_t count = detail::get_u32(is);
    std::vector<NamedTensor> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = detail::get_u32(is);
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw ParseError("checkpoint: truncated name");
        const std::uint32_t rows = detail::get_u32(is);
        const std::uint32_t cols = detail::get_u32(is);
        Tensor v(rows, cols);
        for (std::size_t k = 0; k < v.size(); ++k) v[k] = detail::get_f64(is);
        out.push_back(NamedTensor{std::move(name), std::move(v)});
    }
    return out;
}

inline std::vector<NamedTensor> params_to_tensors(const ParamSet& ps) {
    std::vector<NamedTensor> out;
    out.reserve(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i)
        out.push_back(NamedTensor{ps[i].name, ps[i].value});
    return out;
}

// Fills an already-constructed ParamSet. Every parameter must be present with
// matching shape; extra tensors in the file are rejected.
inline void tensors_to_params(const std::vector<NamedTensor>& tensors, ParamSet& ps) {
    if (tensors.size() != ps.size())
        throw ParseError("checkpoint: expected " + std::to_string(ps.size()) + " tensors, found " +
                         std::to_string(tensors.size()));
    for (const auto& nt : tensors) {
        Param* p = ps.find(nt.name);
        if (!p) throw ParseError("checkpoint: unexpected tensor " + nt.name);
        if (p->value.rows() != nt.value.rows() || p->value.cols() != nt.value.cols())
            throw ParseError("checkpoint: shape mismatch for " + nt.name);
        p->value = nt.value;
    }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path);
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + path);
}

inline nlohmann::json read_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open for read: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("bad JSON in ") + path + ": " + e.what());
    }
    return j;
}

}  // namespace ace
