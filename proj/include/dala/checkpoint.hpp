#pragma once

// DALA tensor container.
//
//   "DALA" 0x01
//   repeated until EOF:
//     u16  name length (LE)
//     name bytes (UTF-8)
//     u8   rank
//     u32  dims[rank] (LE)
//     f32  values[prod(dims)] (LE)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dala/error.hpp"
#include "dala/fsutil.hpp"

namespace dala {

struct NamedArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'A', 'L', 'A'};
inline constexpr std::uint8_t kCheckpointVersion = 0x01;

namespace detail {

inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, std::string path) : bytes_(bytes), path_(std::move(path)) {}
    bool done() const { return pos_ == bytes_.size(); }
    const unsigned char* take(std::size_t n) {
        if (bytes_.size() - pos_ < n) throw FormatError(path_ + ": truncated checkpoint at byte " + std::to_string(pos_));
        const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
        pos_ += n;
        return p;
    }
    std::uint8_t u8() { return *take(1); }
    std::uint16_t u16() {
        const auto* p = take(2);
        return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    }
    std::uint32_t u32() {
        const auto* p = take(4);
        return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    }

private:
    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedArray>& arrays) {
    std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
    out.push_back(static_cast<char>(kCheckpointVersion));
    for (const auto& a : arrays) {
        if (a.name.size() > 0xffff) throw FormatError("tensor name too long: " + a.name.substr(0, 32) + "...");
        if (a.dims.size() > 0xff) throw FormatError("tensor rank too large: " + a.name);
        std::size_t count = 1;
        for (auto d : a.dims) count *= d;
        if (count != a.values.size()) throw FormatError("tensor " + a.name + ": dims do not match value count");
        detail::put_u16(out, static_cast<std::uint16_t>(a.name.size()));
        out += a.name;
        out.push_back(static_cast<char>(a.dims.size()));
        for (auto d : a.dims) detail::put_u32(out, d);
        for (float f : a.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
    }
    return out;
}

inline std::vector<NamedArray> decode_checkpoint(const std::string& bytes, const std::string& path = "<memory>") {
    detail::ByteReader in(bytes, path);
    const auto* magic = in.take(4);
    if (std::memcmp(magic, kCheckpointMagic.data(), 4) != 0) throw FormatError(path + ": bad magic, not a DALA file");
    const auto version = in.u8();
    if (version != kCheckpointVersion)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    std::vector<NamedArray> arrays;
    while (!in.done()) {
        NamedArray a;
        const auto len = in.u16();
        const auto* name = in.take(len);
        a.name.assign(reinterpret_cast<const char*>(name), len);
        const auto rank = in.u8();
        std::size_t count = 1;
        for (std::uint8_t i = 0; i < rank; ++i) {
            a.dims.push_back(in.u32());
            count *= a.dims.back();
        }
        if (count > (bytes.size() / 4) + 1) throw FormatError(path + ": tensor " + a.name + " larger than file");
        a.values.resize(count);
        for (auto& f : a.values) f = std::bit_cast<float>(in.u32());
        arrays.push_back(std::move(a));
    }
    return arrays;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const std::vector<NamedArray>& arrays) {
    write_file_atomic(path, encode_checkpoint(arrays));
}

inline std::vector<NamedArray> read_checkpoint_file(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

}  // namespace dala
