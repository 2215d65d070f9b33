#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "noseprint/errors.hpp"

namespace noseprint {

struct ManifestRow {
  std::string path;  // relative to the manifest's directory unless absolute
  std::string identity;
  std::string origin_path;
  std::string error;  // non-empty when the row could not be produced
};

/// Image list in CSV form: `path,identity,origin_path` with an optional
/// trailing `error` column, LF line endings.
struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRow> rows;

  std::filesystem::path resolve(const ManifestRow& row) const {
    std::filesystem::path p(row.path);
    return p.is_absolute() ? p : base_dir / p;
  }
  bool has_errors() const {
    for (const auto& r : rows)
      if (!r.error.empty()) return true;
    return false;
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline void check_csv_field(const std::string& v) {
  if (v.find_first_of(",\n\r") != std::string::npos) {
    throw ArgumentError("CSV field may not contain commas or newlines: '" + v + "'");
  }
}

}  // namespace detail

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  std::size_t offset = 0;
  if (!std::getline(in, line)) throw FormatError("manifest is empty: " + path.string(), 0);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[0] != "path" || header[1] != "identity" ||
      (header.size() >= 3 && header[2] != "origin_path") || (header.size() == 4 && header[3] != "error") ||
      header.size() > 4) {
    throw FormatError("manifest header must be path,identity,origin_path[,error]: " + path.string(), 0);
  }
  offset += line.size() + 1;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      offset += 1;
      continue;
    }
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) {
      throw FormatError("manifest row has " + std::to_string(f.size()) + " fields, expected " +
                            std::to_string(header.size()),
                        offset);
    }
    ManifestRow row{f[0], f[1], f.size() > 2 ? f[2] : f[0], f.size() > 3 ? f[3] : ""};
    m.rows.push_back(std::move(row));
    offset += line.size() + 1;
  }
  return m;
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ostringstream out;
  const bool errors = m.has_errors();
  out << (errors ? "path,identity,origin_path,error\n" : "path,identity,origin_path\n");
  for (const auto& r : m.rows) {
    for (const auto* f : {&r.path, &r.identity, &r.origin_path, &r.error}) detail::check_csv_field(*f);
    out << r.path << ',' << r.identity << ',' << r.origin_path;
    if (errors) out << ',' << r.error;
    out << '\n';
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot write manifest " + path.string());
  file << out.str();
  if (!file) throw IoError("write failed: " + path.string());
}

}  // namespace noseprint
