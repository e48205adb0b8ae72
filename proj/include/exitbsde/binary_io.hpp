#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>

#include "exitbsde/error.hpp"

namespace exitbsde::binary {

inline std::uint64_t to_little(std::uint64_t v) noexcept {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::uint64_t r = 0;
        for (int k = 0; k < 8; ++k) r |= ((v >> (8 * k)) & 0xffU) << (8 * (7 - k));
        return r;
    }
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    v = to_little(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int k = 0; k < 4; ++k) b[k] = static_cast<unsigned char>((v >> (8 * k)) & 0xffU);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void put_f64s(std::ostream& os, std::span<const double> v) {
    for (double x : v) put_f64(os, x);
}

inline std::uint64_t get_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    require(static_cast<bool>(is), ErrorCode::IoError, "truncated binary file");
    return to_little(v);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    require(static_cast<bool>(is), ErrorCode::IoError, "truncated binary file");
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(b[k]) << (8 * k);
    return v;
}

inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

inline void get_f64s(std::istream& is, std::span<double> out) {
    for (double& x : out) x = get_f64(is);
}

}  // namespace exitbsde::binary
