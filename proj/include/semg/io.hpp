#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace semg::io {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws Error(CorruptCheckpoint) on characters outside the alphabet or a
/// length that is not a multiple of four.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// FNV-1a 64-bit, rendered as 16 lowercase hex digits.
std::string fnv1a_hex(std::span<const std::uint8_t> bytes);
std::string file_fnv1a_hex(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Shortest decimal text that round-trips to the same double.
std::string format_double(double value);

/// RFC-4180 field quoting: quotes only when the field contains a comma,
/// quote or line break.
std::string csv_field(std::string_view field);

}  // namespace semg::io
