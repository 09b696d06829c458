#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace obs {

using Bytes = std::vector<std::byte>;

std::span<const std::byte> as_bytes(std::string_view text);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::span<const std::byte> data);
std::string sha256_hex(std::string_view text);

std::string base64_encode(std::span<const std::byte> data);
Bytes base64_decode(std::string_view text);

/// FNV-1a, 64 bit. Stable across platforms and runs.
std::uint64_t fnv1a64(std::span<const std::byte> data);

Bytes read_file_bytes(const std::filesystem::path& path);
std::string read_file_text(const std::filesystem::path& path);

/// Writes to a sibling temp file then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Splits on '\n', dropping a trailing '\r' from each line.
std::vector<std::string> split_lines(std::string_view text);

std::string trim(std::string_view text);

}  // namespace obs
