#include "cmco/io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cmco/error.hpp"

namespace cmco::io {

namespace fs = std::filesystem;

void write_f32(const fs::path& path, std::span<const double> values) {
  std::vector<unsigned char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(values[i]));
    for (int k = 0; k < 4; ++k) bytes[4 * i + k] = static_cast<unsigned char>(bits >> (8 * k));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("failed writing " + path.string());
}

std::vector<double> read_f32(const fs::path& path, std::size_t expected_count) {
  require_file(path);
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() != expected_count * 4) {
    throw ConfigError(path.string() + " holds " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(expected_count * 4));
  }
  std::vector<double> values(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(bytes[4 * i + k]) << (8 * k);
    values[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  return values;
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

json read_json(const fs::path& path) {
  require_file(path);
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& value) { write_text(path, value.dump(2) + "\n"); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
  if (!out) throw ConfigError("failed writing " + path.string());
}

std::string file_checksum(const fs::path& path) {
  require_file(path);
  std::ifstream in(path, std::ios::binary);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  for (int i = 0; i < 16; ++i) hex[i] = "0123456789abcdef"[(h >> (60 - 4 * i)) & 0xf];
  hex[16] = '\0';
  return hex;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ConfigError("cannot create directory " + dir.string() +
                      (ec ? ": " + ec.message() : std::string()));
  }
}

void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("missing file " + path.string());
}

void check_format(const json& manifest, const std::string& format, int version,
                  const fs::path& where) {
  if (manifest.value("format", std::string()) != format) {
    throw ConfigError(where.string() + " is not a " + format + " manifest");
  }
  if (manifest.value("format_version", -1) != version) {
    throw ConfigError(where.string() + " has unsupported format_version " +
                      manifest.value("format_version", json(-1)).dump());
  }
}

}  // namespace cmco::io
