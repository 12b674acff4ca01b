#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "tcpl/common.hpp"

namespace tcpl {

inline constexpr int kSchemaVersion = 1;

using ordered_json = nlohmann::ordered_json;

// Numbers in report JSON are decimal strings with 9 significant digits so
// that serialization round-trips byte-exactly.
inline std::string format_sig9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::string(buf);
}

inline void write_json_file(const std::filesystem::path& path,
                            const ordered_json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw io_error("write failed: " + path.string());
}

// write-then-rename, so readers never observe a half-written file
inline void write_json_file_atomic(const std::filesystem::path& path,
                                   const ordered_json& j) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  write_json_file(tmp, j);
  std::filesystem::rename(tmp, path);
}

inline ordered_json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot read " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error("invalid JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace tcpl
