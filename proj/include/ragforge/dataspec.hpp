#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <unordered_set>
#include <vector>

#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"

namespace ragforge {

enum class Split { train, dev, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "test";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "dev") return Split::dev;
  if (s == "test") return Split::test;
  throw ValidationError("split", "must be one of train, dev, test (got '" + std::string(s) + "')");
}

/// One evaluation example in the unified dataset format.
struct Item {
  std::string id;
  std::string question;
  std::vector<std::string> golden_answers;
  std::optional<std::vector<std::string>> choices;
  json metadata = json::object();

  friend bool operator==(const Item&, const Item&) = default;
};

struct Dataset {
  std::string name;
  Split split = Split::test;
  std::vector<Item> items;

  std::size_t size() const noexcept { return items.size(); }
  bool empty() const noexcept { return items.empty(); }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

namespace detail {

inline std::vector<std::string> string_list(const json& j, const char* field, std::size_t line) {
  if (!j.is_array()) throw FormatError(std::string("field '") + field + "' must be a list", line);
  std::vector<std::string> out;
  out.reserve(j.size());
  for (const auto& v : j) {
    if (!v.is_string()) throw FormatError(std::string("field '") + field + "' must hold strings", line);
    out.push_back(v.get<std::string>());
  }
  return out;
}

inline bool parse_choice_index(const std::string& s, std::size_t n_choices) {
  if (s.empty() || s.size() > 9) return false;
  for (char c : s)
    if (c < '0' || c > '9') return false;
  return std::stoul(s) < n_choices;
}

}  // namespace detail

/// Parses one JSONL object into an Item. Unknown fields are folded into metadata.
inline Item item_from_json(json obj, std::size_t line = 0) {
  Item item;
  for (const char* field : {"id", "question", "golden_answers"})
    if (!obj.contains(field)) throw FormatError(std::string("missing field '") + field + "'", line);
  if (!obj["id"].is_string() || obj["id"].get<std::string>().empty())
    throw FormatError("field 'id' must be a non-empty string", line);
  if (!obj["question"].is_string()) throw FormatError("field 'question' must be a string", line);
  item.id = obj["id"].get<std::string>();
  item.question = obj["question"].get<std::string>();
  item.golden_answers = detail::string_list(obj["golden_answers"], "golden_answers", line);
  if (item.golden_answers.empty()) throw FormatError("field 'golden_answers' must not be empty", line);

  if (obj.contains("choices") && !obj["choices"].is_null()) {
    item.choices = detail::string_list(obj["choices"], "choices", line);
    for (const auto& g : item.golden_answers)
      if (!detail::parse_choice_index(g, item.choices->size()))
        throw FormatError("golden answer '" + g + "' is not a valid index into choices", line);
  }
  if (obj.contains("metadata") && !obj["metadata"].is_null()) {
    if (!obj["metadata"].is_object()) throw FormatError("field 'metadata' must be an object", line);
    item.metadata = obj["metadata"];
  }
  for (auto& [key, value] : obj.items()) {
    if (key == "id" || key == "question" || key == "golden_answers" || key == "choices" || key == "metadata")
      continue;
    if (!item.metadata.contains(key)) item.metadata[key] = value;
  }
  return item;
}

inline json item_to_json(const Item& item) {
  json j{{"id", item.id}, {"question", item.question}, {"golden_answers", item.golden_answers},
         {"metadata", item.metadata}};
  if (item.choices) j["choices"] = *item.choices;
  return j;
}

/// Loads a split file. Empty files yield an empty Dataset.
inline Dataset load_dataset(const std::filesystem::path& path, Split split) {
  Dataset ds;
  ds.split = split;
  ds.name = path.stem().string();
  if (ds.name == to_string(split) && path.has_parent_path() && !path.parent_path().filename().empty())
    ds.name = path.parent_path().filename().string();

  std::unordered_set<std::string> seen;
  for_each_jsonl(path, [&](json&& obj, std::size_t line) {
    Item item = item_from_json(std::move(obj), line);
    if (!seen.insert(item.id).second) throw FormatError("duplicate id '" + item.id + "'", line);
    ds.items.push_back(std::move(item));
  });
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  std::string out;
  for (const auto& item : ds.items) out += dump_line(item_to_json(item)) + "\n";
  write_file(path, out);
}

struct SelectMode {
  enum Kind { sequential, random } kind = sequential;
  std::uint64_t seed = 0;

  static SelectMode Sequential() { return {sequential, 0}; }
  static SelectMode Random(std::uint64_t seed) { return {random, seed}; }
};

/// Takes n items, either the prefix or a seeded sample that keeps file order.
inline Dataset select(const Dataset& ds, SelectMode mode, std::size_t n) {
  if (n > ds.size())
    throw ValidationError("n", "requested " + std::to_string(n) + " items from a dataset of " +
                                   std::to_string(ds.size()));
  Dataset out{ds.name, ds.split, {}};
  out.items.reserve(n);
  if (mode.kind == SelectMode::sequential) {
    out.items.assign(ds.items.begin(), ds.items.begin() + static_cast<std::ptrdiff_t>(n));
    return out;
  }
  // Selection sampling: each item is kept with probability needed/remaining.
  std::mt19937_64 rng(mode.seed);
  std::size_t needed = n;
  for (std::size_t i = 0; i < ds.size() && needed > 0; ++i) {
    const std::size_t remaining = ds.size() - i;
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    if (u * static_cast<double>(remaining) < static_cast<double>(needed)) {
      out.items.push_back(ds.items[i]);
      --needed;
    }
  }
  return out;
}

inline Dataset filter_by_metadata(const Dataset& ds, const std::string& key,
                                  const std::function<bool(const json&)>& predicate) {
  Dataset out{ds.name, ds.split, {}};
  for (const auto& item : ds.items) {
    auto it = item.metadata.find(key);
    if (it != item.metadata.end() && predicate(*it)) out.items.push_back(item);
  }
  return out;
}

}  // namespace ragforge
