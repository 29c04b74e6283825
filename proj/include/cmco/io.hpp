#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cmco::io {

using json = nlohmann::json;

// Raw little-endian float32 arrays, the on-disk numeric format.
void write_f32(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f32(const std::filesystem::path& path, std::size_t expected_count);

// Round-trip through float32, matching what a save/load cycle produces.
double to_f32(double v);

json read_json(const std::filesystem::path& path);
// Pretty-printed with a trailing newline; key order is stable.
void write_json(const std::filesystem::path& path, const json& value);
void write_text(const std::filesystem::path& path, const std::string& text);

// FNV-1a over the file bytes, as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);

// Shortest decimal that round-trips the double.
std::string format_double(double v);

void ensure_directory(const std::filesystem::path& dir);
void require_file(const std::filesystem::path& path);

// Checks manifest["format"] and manifest["format_version"].
void check_format(const json& manifest, const std::string& format, int version,
                  const std::filesystem::path& where);

}  // namespace cmco::io
