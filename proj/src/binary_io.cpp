#include "acvtt/binary_io.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "acvtt/errors.hpp"

namespace acvtt {
namespace {

std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::uint64_t out = 0;
        for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
        return out;
    }
}

}  // namespace

void write_f64_le(const std::filesystem::path& path, std::span<const double> values) {
    std::vector<std::uint64_t> words(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) words[i] = to_little(std::bit_cast<std::uint64_t>(values[i]));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(words.data()), static_cast<std::streamsize>(words.size() * 8));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<double> read_f64_le(const std::filesystem::path& path, std::size_t expected_count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::vector<std::uint64_t> words(expected_count);
    in.read(reinterpret_cast<char*>(words.data()), static_cast<std::streamsize>(expected_count * 8));
    if (in.gcount() != static_cast<std::streamsize>(expected_count * 8)) {
        throw IoError("'" + path.string() + "' is shorter than its header declares");
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw IoError("'" + path.string() + "' is longer than its header declares");
    }
    std::vector<double> values(expected_count);
    for (std::size_t i = 0; i < expected_count; ++i) values[i] = std::bit_cast<double>(to_little(words[i]));
    return values;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string fnv1a_hex_file(const std::filesystem::path& path) { return fnv1a_hex(read_text(path)); }

}  // namespace acvtt
