#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

namespace mudaf {

// Lower-case hex SHA-256 digests.
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
// Writes via a temporary sibling and renames into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace mudaf
