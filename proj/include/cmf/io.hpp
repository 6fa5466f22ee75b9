#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cmf/util.hpp"

namespace cmf {

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string fmt_num(int64_t v) { return std::to_string(v); }

inline void write_text_file(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open '", path, "' for writing");
  out << text;
  if (!out) fail("failed writing '", path, "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open '", path, "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string csv_join(const std::vector<std::string>& fields) {
  std::string line;
  for (size_t i = 0; i < fields.size(); ++i) {
    if (i) line += ',';
    line += fields[i];
  }
  return line;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  std::string text = csv_join(header) + "\n";
  for (const auto& row : rows) {
    if (row.size() != header.size())
      fail("csv row has ", row.size(), " fields, header has ", header.size());
    text += csv_join(row) + "\n";
  }
  write_text_file(path, text);
}

}  // namespace cmf
