#pragma once

#include <filesystem>
#include <string>

namespace rsvqa {

/// Whole-file helpers. Writers go through a temp file + rename so a crash
/// never leaves a half-written artifact behind.
std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace rsvqa
