#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>

namespace bloodnet {

// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
    std::array<char, 64> buf{};
    const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), ptr);
}

template <typename V>
void append_le(std::string& out, V value) {
    static_assert(std::is_trivially_copyable_v<V>);
    std::array<char, sizeof(V)> bytes;
    std::memcpy(bytes.data(), &value, sizeof(V));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), bytes.size());
}

template <typename V>
V read_le(const char* src) {
    static_assert(std::is_trivially_copyable_v<V>);
    std::array<char, sizeof(V)> bytes;
    std::memcpy(bytes.data(), src, sizeof(V));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    V v;
    std::memcpy(&v, bytes.data(), sizeof(V));
    return v;
}

// Both throw DataError on I/O failure.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace bloodnet
