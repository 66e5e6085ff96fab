#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace acvtt {

/// Writes doubles as little-endian IEEE-754 binary64 regardless of host order.
void write_f64_le(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64_le(const std::filesystem::path& path, std::size_t expected_count);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// 64-bit FNV-1a over bytes, rendered as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string fnv1a_hex_file(const std::filesystem::path& path);

}  // namespace acvtt
