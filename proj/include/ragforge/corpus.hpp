#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/parallel.hpp"
#include "ragforge/text.hpp"

namespace ragforge {

struct Document {
  std::string id;
  std::string title;
  std::string text;
};

enum class ChunkUnit { sentences, words };

inline ChunkUnit parse_chunk_unit(std::string_view s) {
  if (s == "sentences") return ChunkUnit::sentences;
  if (s == "words") return ChunkUnit::words;
  throw ValidationError("unit", "must be 'sentences' or 'words' (got '" + std::string(s) + "')");
}

inline std::string_view to_string(ChunkUnit u) { return u == ChunkUnit::sentences ? "sentences" : "words"; }

/// Sliding-window chunking policy: windows of `size` units advancing by `stride`.
struct ChunkPolicy {
  ChunkUnit unit = ChunkUnit::sentences;
  std::size_t size = 6;
  std::size_t stride = 3;

  void validate() const {
    if (size < 1) throw ValidationError("chunk.size", "must be >= 1");
    if (stride < 1) throw ValidationError("chunk.stride", "must be >= 1");
    if (stride > size) throw ValidationError("chunk.stride", "must not exceed size");
  }
};

/// Span is [first unit, last unit + 1) in the source document.
struct Passage {
  std::string id;
  std::string title;
  std::string contents;
  std::size_t word_count = 0;
  std::pair<std::size_t, std::size_t> span{0, 0};
};

// Tokens that end in a period but do not end a sentence.
inline constexpr std::array<std::string_view, 20> kAbbreviations = {
    "Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "Sr.", "Jr.", "St.", "Mt.", "vs.",
    "e.g.", "i.e.", "U.S.", "U.K.", "Inc.", "Ltd.", "Co.", "No.", "Gen.", "Gov."};

/// Byte ranges [begin, end) of each sentence, whitespace excluded.
inline std::vector<std::pair<std::size_t, std::size_t>> sentence_spans(std::string_view text) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n && text::is_space(text[i])) ++i;
  std::size_t start = i;
  while (i < n) {
    const char c = text[i];
    if (c == '.' || c == '!' || c == '?') {
      std::size_t end = i + 1;
      while (end < n && (text[end] == '.' || text[end] == '!' || text[end] == '?')) ++end;
      while (end < n && (text[end] == '"' || text[end] == '\'' || text[end] == ')' || text[end] == ']'))
        ++end;
      if (end == n || text::is_space(text[end])) {
        std::size_t word_begin = i;
        while (word_begin > start && !text::is_space(text[word_begin - 1])) --word_begin;
        const std::string_view word = text.substr(word_begin, i + 1 - word_begin);
        const bool abbreviation =
            c == '.' && std::find(kAbbreviations.begin(), kAbbreviations.end(), word) != kAbbreviations.end();
        if (!abbreviation) {
          spans.emplace_back(start, end);
          i = end;
          while (i < n && text::is_space(text[i])) ++i;
          start = i;
          continue;
        }
      }
      i = end;
      continue;
    }
    ++i;
  }
  if (start < n) {
    std::size_t end = n;
    while (end > start && text::is_space(text[end - 1])) --end;
    if (end > start) spans.emplace_back(start, end);
  }
  return spans;
}

inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  for (auto [b, e] : sentence_spans(text)) out.emplace_back(text.substr(b, e - b));
  return out;
}

/// Window start offsets over `total` units; the tail window appears only when
/// the last full window leaves units uncovered.
inline std::vector<std::pair<std::size_t, std::size_t>> window_spans(std::size_t total, std::size_t size,
                                                                     std::size_t stride) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (total == 0) return out;
  if (total <= size) {
    out.emplace_back(0, total);
    return out;
  }
  std::size_t start = 0;
  for (; start + size <= total; start += stride) out.emplace_back(start, start + size);
  if (out.back().second < total) out.emplace_back(start, total);
  return out;
}

inline std::vector<Passage> chunk_document(const Document& doc, const ChunkPolicy& policy) {
  policy.validate();
  const std::vector<std::string> units =
      policy.unit == ChunkUnit::sentences ? split_sentences(doc.text) : text::split_whitespace(doc.text);
  std::vector<Passage> out;
  std::size_t ordinal = 0;
  for (auto [b, e] : window_spans(units.size(), policy.size, policy.stride)) {
    Passage p;
    p.id = doc.id + "_" + std::to_string(ordinal++);
    p.title = doc.title;
    for (std::size_t u = b; u < e; ++u) {
      if (u > b) p.contents += ' ';
      p.contents += units[u];
    }
    p.word_count = text::word_count(p.contents);
    p.span = {b, e};
    out.push_back(std::move(p));
  }
  return out;
}

/// Chunks documents in parallel; output is in document order, then window order.
inline std::vector<Passage> chunk_documents(const std::vector<Document>& docs, const ChunkPolicy& policy,
                                            std::size_t workers = 1) {
  policy.validate();
  std::vector<std::vector<Passage>> per_doc(docs.size());
  parallel_for(docs.size(), workers, [&](std::size_t i) { per_doc[i] = chunk_document(docs[i], policy); });
  std::vector<Passage> out;
  for (auto& ps : per_doc)
    for (auto& p : ps) out.push_back(std::move(p));
  return out;
}

inline std::vector<Document> load_documents(const std::filesystem::path& path) {
  std::vector<Document> docs;
  std::unordered_map<std::string, std::size_t> seen;
  for_each_jsonl(path, [&](json&& obj, std::size_t line) {
    if (!obj.contains("id") || !obj["id"].is_string()) throw FormatError("missing string field 'id'", line);
    const char* text_field = obj.contains("text") ? "text" : "contents";
    if (!obj.contains(text_field) || !obj[text_field].is_string())
      throw FormatError("missing string field 'text'", line);
    Document d{obj["id"].get<std::string>(), obj.value("title", std::string{}), obj[text_field].get<std::string>()};
    if (!seen.emplace(d.id, line).second) throw FormatError("duplicate document id '" + d.id + "'", line);
    docs.push_back(std::move(d));
  });
  return docs;
}

/// Immutable passage collection addressable by id.
class PassageStore {
 public:
  PassageStore() = default;

  explicit PassageStore(std::vector<Passage> passages) {
    for (auto& p : passages) add(std::move(p), 0);
  }

  const Passage* find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &passages_[it->second];
  }

  const std::vector<Passage>& passages() const noexcept { return passages_; }
  std::size_t size() const noexcept { return passages_.size(); }
  bool empty() const noexcept { return passages_.empty(); }

  // Content fingerprint used to key retrieval caches.
  std::string fingerprint() const {
    std::uint64_t h = text::fnv1a("corpus");
    for (const auto& p : passages_) {
      h = text::fnv1a(p.id, h);
      h = text::fnv1a(p.contents, h);
    }
    return text::hex64(h);
  }

  friend PassageStore load_corpus(const std::filesystem::path& path);

 private:
  void add(Passage p, std::size_t line) {
    if (!index_.emplace(p.id, passages_.size()).second)
      throw FormatError("duplicate passage id '" + p.id + "'", line);
    passages_.push_back(std::move(p));
  }

  std::vector<Passage> passages_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Streams a corpus JSONL file with fields id, title, contents.
inline PassageStore load_corpus(const std::filesystem::path& path) {
  PassageStore store;
  for_each_jsonl(path, [&](json&& obj, std::size_t line) {
    if (!obj.contains("id") || !obj["id"].is_string()) throw FormatError("missing string field 'id'", line);
    if (!obj.contains("contents") || !obj["contents"].is_string())
      throw FormatError("missing string field 'contents'", line);
    Passage p;
    p.id = obj["id"].get<std::string>();
    p.title = obj.value("title", std::string{});
    p.contents = obj["contents"].get<std::string>();
    p.word_count = text::word_count(p.contents);
    store.add(std::move(p), line);
  });
  return store;
}

inline void save_corpus(const std::vector<Passage>& passages, const std::filesystem::path& path) {
  std::string out;
  for (const auto& p : passages)
    out += dump_line(json{{"id", p.id}, {"title", p.title}, {"contents", p.contents}}) + "\n";
  write_file(path, out);
}

struct CorpusStats {
  std::size_t passage_count = 0;
  double average_words = 0.0;
  bool average_defined = false;
};

inline CorpusStats corpus_stats(const PassageStore& store) {
  CorpusStats s;
  s.passage_count = store.size();
  if (store.empty()) return s;
  double total = 0.0;
  for (const auto& p : store.passages()) total += static_cast<double>(p.word_count);
  s.average_words = total / static_cast<double>(store.size());
  s.average_defined = true;
  return s;
}

}  // namespace ragforge
