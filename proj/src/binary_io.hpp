#pragma once

#include "thetaguard/errors.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <fmt/format.h>

namespace thetaguard::detail {

inline void write_f64_file(const std::filesystem::path& file, std::span<const double> values) {
    std::string bytes;
    bytes.reserve(values.size() * 8);
    for (double v : values) {
        auto bits = std::bit_cast<std::uint64_t>(v);
        for (int i = 0; i < 8; ++i) {
            bytes.push_back(static_cast<char>(bits & 0xFFu));
            bits >>= 8;
        }
    }
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataError(fmt::format("cannot write {}", file.string()));
    }
}

inline std::vector<double> read_f64_file(const std::filesystem::path& file, std::size_t expected_count) {
    std::ifstream in(file, std::ios::binary | std::ios::ate);
    if (!in) {
        throw DataError(fmt::format("cannot open {}", file.string()));
    }
    const auto size = static_cast<std::size_t>(in.tellg());
    if (size != expected_count * 8) {
        throw DataError(fmt::format("{}: expected {} float64 values, found {} bytes", file.string(),
                                    expected_count, size));
    }
    std::string bytes(size, '\0');
    in.seekg(0);
    in.read(bytes.data(), static_cast<std::streamsize>(size));
    std::vector<double> values(expected_count);
    for (std::size_t k = 0; k < expected_count; ++k) {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) {
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[k * 8 + i])) << (8 * i);
        }
        values[k] = std::bit_cast<double>(bits);
    }
    return values;
}

} // namespace thetaguard::detail
