#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace dreg {

/// Writes to a sibling temporary file, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace dreg
