#include "freqtune/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <utility>

#include "freqtune/error.hpp"

namespace freqtune {

bool is_valid_utf8(std::string_view text) {
  std::size_t i = 0;
  const auto n = text.size();
  while (i < n) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t extra;
    std::uint32_t cp;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xE0) == 0xC0) {
      extra = 1;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      extra = 2;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    for (std::size_t k = 1; k <= extra; ++k) {
      if (i + k >= n) return false;
      const auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc & 0xC0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3F);
    }
    // Overlong encodings, surrogates and out-of-range code points.
    if ((extra == 1 && cp < 0x80) || (extra == 2 && cp < 0x800) || (extra == 3 && cp < 0x10000) ||
        cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))
      return false;
    i += extra + 1;
  }
  return true;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80 && std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
    }
  }
  flush();
  return out;
}

// Vocabulary -------------------------------------------------------------------

Vocabulary::Vocabulary() {
  for (auto tok : kSpecialTokens) add(tok);
}

TokenId Vocabulary::add(std::string_view token) {
  if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
  return std::nullopt;
}

TokenId Vocabulary::id_or_unk(std::string_view token) const {
  const auto id = find(token);
  // Content text never maps onto a special id.
  if (!id || is_special(*id)) return special::kUnk;
  return *id;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id < 0 || id >= size())
    throw UsageError("vocabulary: id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids{special::kCls};
  for (const auto& tok : tokenize(text)) ids.push_back(id_or_unk(tok));
  ids.push_back(special::kSep);
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  for (TokenId id : ids)
    if (is_content(id)) out.push_back(token(id));
  return out;
}

// Counting ---------------------------------------------------------------------

CorpusScan scan_corpus(std::istream& corpus) {
  CorpusScan scan;
  std::string line;
  std::size_t line_no = 0;
  std::uint64_t total = 0;
  while (std::getline(corpus, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!is_valid_utf8(line)) {
      ++scan.lines_skipped;
      scan.warnings.push_back("line " + std::to_string(line_no) + ": invalid UTF-8, skipped");
      continue;
    }
    ++scan.lines_read;
    for (auto& tok : tokenize(line)) {
      ++scan.counts[tok];
      ++total;
    }
  }
  if (total == 0) throw UsageError("empty corpus");
  return scan;
}

namespace {

// Descending count, ties lexicographic.
std::vector<std::pair<std::string, std::uint64_t>> by_descending_count(const TokenCounts& counts) {
  std::vector<std::pair<std::string, std::uint64_t>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return items;
}

bool is_special_token(std::string_view tok) {
  return std::find(kSpecialTokens.begin(), kSpecialTokens.end(), tok) != kSpecialTokens.end();
}

}  // namespace

VocabularyBuild build_vocabulary(const TokenCounts& counts, std::uint64_t min_count,
                                 std::size_t max_vocab) {
  if (counts.empty()) throw UsageError("empty corpus");
  VocabularyBuild build;
  for (const auto& [tok, count] : by_descending_count(counts)) {
    if (count < min_count || is_special_token(tok)) continue;
    if (max_vocab != 0 && build.counts.size() >= max_vocab) break;
    build.vocab.add(tok);
    build.counts.emplace(tok, count);
  }
  if (build.counts.empty())
    throw UsageError("empty vocabulary: no token reaches min_count " + std::to_string(min_count));
  return build;
}

VocabularyBuild build_vocabulary(std::istream& corpus, std::uint64_t min_count,
                                 std::size_t max_vocab) {
  CorpusScan scan = scan_corpus(corpus);
  VocabularyBuild build = build_vocabulary(scan.counts, min_count, max_vocab);
  build.scan = std::move(scan);
  return build;
}

// Labels -----------------------------------------------------------------------

std::map<std::string, int, std::less<>> assign_frequency_labels(const TokenCounts& counts,
                                                                double rate, LabelRateMode mode) {
  if (!(rate > 0.0 && rate < 1.0))
    throw UsageError("frequency label rate must lie in (0, 1), got " + std::to_string(rate));
  if (counts.empty()) throw UsageError("frequency labels: empty count table");

  // Ascending count; std::map iteration already gives lexicographic order, so
  // a stable sort yields the tie-break.
  std::vector<std::pair<std::string, std::uint64_t>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second < b.second; });

  std::size_t low = 0;
  if (mode == LabelRateMode::kTypes) {
    // The relative nudge keeps products such as 0.3 * 10 = 3.0000000000000004
    // from rounding up to the next integer.
    const double exact = rate * static_cast<double>(items.size());
    low = static_cast<std::size_t>(std::ceil(exact * (1.0 - 1e-12)));
  } else {
    long double total = 0;
    for (const auto& it : items) total += static_cast<long double>(it.second);
    const long double target = static_cast<long double>(rate) * total * (1.0L - 1e-12L);
    long double covered = 0;
    while (low < items.size() && covered < target) covered += items[low++].second;
  }
  low = std::min(low, items.size());

  std::map<std::string, int, std::less<>> labels;
  for (std::size_t i = 0; i < items.size(); ++i) labels.emplace(items[i].first, i < low ? 1 : 0);
  return labels;
}

FrequencyTable FrequencyTable::build(const Vocabulary& vocab, const TokenCounts& counts,
                                     double rate, LabelRateMode mode) {
  TokenCounts content;
  for (TokenId id = special::kCount; id < vocab.size(); ++id) {
    const auto& tok = vocab.token(id);
    auto it = counts.find(tok);
    content.emplace(tok, it == counts.end() ? 0 : it->second);
  }
  FrequencyTable table = from_labels(vocab, assign_frequency_labels(content, rate, mode), content);
  table.rate_ = rate;
  return table;
}

FrequencyTable FrequencyTable::from_labels(const Vocabulary& vocab,
                                           const std::map<std::string, int, std::less<>>& labels,
                                           const TokenCounts& counts) {
  FrequencyTable table;
  const auto n = static_cast<std::size_t>(vocab.size());
  table.labels_.assign(n, 0);
  table.counts_.assign(n, 0);
  std::size_t low = 0;
  for (TokenId id = special::kCount; id < vocab.size(); ++id) {
    const auto& tok = vocab.token(id);
    auto it = labels.find(tok);
    if (it == labels.end()) throw FormatError("label file has no entry for token '" + tok + "'");
    if (it->second != 0 && it->second != 1)
      throw FormatError("label for token '" + tok + "' must be 0 or 1");
    table.labels_[static_cast<std::size_t>(id)] = it->second;
    low += static_cast<std::size_t>(it->second);
    if (auto c = counts.find(tok); c != counts.end()) table.counts_[static_cast<std::size_t>(id)] = c->second;
  }
  if (vocab.content_size() > 0)
    table.rate_ = static_cast<double>(low) / static_cast<double>(vocab.content_size());
  return table;
}

// TSV I/O ----------------------------------------------------------------------

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find('\t', start);
    fields.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return fields;
}

template <typename Fn>
void for_each_record(std::istream& in, std::string_view what, std::size_t fields, Fn&& fn) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto parts = split_tabs(line);
    if (parts.size() != fields)
      throw FormatError(std::string(what) + " line " + std::to_string(line_no) + ": expected " +
                        std::to_string(fields) + " tab-separated fields");
    fn(parts, line_no);
  }
}

std::uint64_t parse_u64(const std::string& s, std::string_view what, std::size_t line_no) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || s[0] == '-')
    throw FormatError(std::string(what) + " line " + std::to_string(line_no) +
                      ": not a non-negative integer: '" + s + "'");
  return v;
}

template <typename Reader>
auto load_file(const std::filesystem::path& path, Reader&& reader) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  return reader(in);
}

}  // namespace

void write_vocabulary(std::ostream& out, const Vocabulary& vocab) {
  for (TokenId id = 0; id < vocab.size(); ++id) out << id << '\t' << vocab.token(id) << '\n';
}

Vocabulary read_vocabulary(std::istream& in) {
  Vocabulary vocab;
  for_each_record(in, "vocabulary", 2, [&](const auto& f, std::size_t line_no) {
    const auto id = static_cast<TokenId>(parse_u64(f[0], "vocabulary", line_no));
    if (id < special::kCount) {
      if (f[1] != kSpecialTokens[static_cast<std::size_t>(id)])
        throw FormatError("vocabulary line " + std::to_string(line_no) +
                          ": special id " + f[0] + " must be " +
                          std::string(kSpecialTokens[static_cast<std::size_t>(id)]));
      return;
    }
    if (id != vocab.size() || vocab.find(f[1]))
      throw FormatError("vocabulary line " + std::to_string(line_no) +
                        ": ids must be consecutive and tokens unique");
    vocab.add(f[1]);
  });
  return vocab;
}

void write_counts(std::ostream& out, const TokenCounts& counts) {
  for (const auto& [tok, count] : by_descending_count(counts)) out << tok << '\t' << count << '\n';
}

TokenCounts read_counts(std::istream& in) {
  TokenCounts counts;
  for_each_record(in, "count file", 2, [&](const auto& f, std::size_t line_no) {
    if (!counts.emplace(f[0], parse_u64(f[1], "count file", line_no)).second)
      throw FormatError("count file line " + std::to_string(line_no) + ": duplicate token '" +
                        f[0] + "'");
  });
  return counts;
}

void write_labels(std::ostream& out, const TokenCounts& counts,
                  const std::map<std::string, int, std::less<>>& labels) {
  for (const auto& [tok, count] : by_descending_count(counts)) {
    auto it = labels.find(tok);
    if (it == labels.end()) throw UsageError("write_labels: no label for token '" + tok + "'");
    out << tok << '\t' << it->second << '\n';
  }
}

std::map<std::string, int, std::less<>> read_labels(std::istream& in) {
  std::map<std::string, int, std::less<>> labels;
  for_each_record(in, "label file", 2, [&](const auto& f, std::size_t line_no) {
    const auto v = parse_u64(f[1], "label file", line_no);
    if (v > 1)
      throw FormatError("label file line " + std::to_string(line_no) + ": label must be 0 or 1");
    labels[f[0]] = static_cast<int>(v);
  });
  return labels;
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  return load_file(path, [](std::istream& in) { return read_vocabulary(in); });
}
TokenCounts load_counts(const std::filesystem::path& path) {
  return load_file(path, [](std::istream& in) { return read_counts(in); });
}
std::map<std::string, int, std::less<>> load_labels(const std::filesystem::path& path) {
  return load_file(path, [](std::istream& in) { return read_labels(in); });
}

std::vector<std::vector<TokenId>> encode_corpus(std::istream& corpus, const Vocabulary& vocab) {
  std::vector<std::vector<TokenId>> out;
  std::string line;
  while (std::getline(corpus, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!is_valid_utf8(line) || tokenize(line).empty()) continue;
    out.push_back(vocab.encode(line));
  }
  return out;
}

}  // namespace freqtune
