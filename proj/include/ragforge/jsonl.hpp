#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "json.hpp"
#include "ragforge/error.hpp"

namespace ragforge {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// Calls fn(object, line_number) for every non-blank line. Line numbers are 1-based.
inline void for_each_jsonl(const std::filesystem::path& path,
                           const std::function<void(json&&, std::size_t)>& fn) {
  std::ifstream in(path);
  if (!in) throw NotFound("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw FormatError(std::string("malformed JSON: ") + e.what(), lineno);
    }
    if (!obj.is_object()) throw FormatError("expected a JSON object", lineno);
    fn(std::move(obj), lineno);
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << content;
}

// Dumps with a fixed float format so files are byte-stable across runs.
inline std::string dump_line(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

}  // namespace ragforge
