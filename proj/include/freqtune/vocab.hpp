#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "freqtune/tensor.hpp"

namespace freqtune {

using TokenId = Index;

namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kCount = 5;
}  // namespace special

inline constexpr std::array<std::string_view, special::kCount> kSpecialTokens{
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

inline bool is_special(TokenId id) { return id >= 0 && id < special::kCount; }

/// True for positions that carry sentence content (everything but PAD/CLS/SEP;
/// UNK and MASK count as content).
inline bool is_content(TokenId id) {
  return id != special::kPad && id != special::kCls && id != special::kSep;
}

bool is_valid_utf8(std::string_view text);

/// Lowercases ASCII letters and splits on whitespace; every ASCII punctuation
/// character becomes a token of its own.
std::vector<std::string> tokenize(std::string_view text);

/// Token <-> id map. Ids 0-4 are the reserved special tokens.
class Vocabulary {
 public:
  Vocabulary();

  /// Returns the id of `token`, inserting it if new.
  TokenId add(std::string_view token);
  std::optional<TokenId> find(std::string_view token) const;
  TokenId id_or_unk(std::string_view token) const;
  const std::string& token(TokenId id) const;

  Index size() const { return static_cast<Index>(tokens_.size()); }
  Index content_size() const { return size() - special::kCount; }

  /// [CLS] tokens... [SEP], unknown tokens mapped to [UNK].
  std::vector<TokenId> encode(std::string_view text) const;
  /// Token strings of `ids` with CLS/SEP/PAD dropped.
  std::vector<std::string> decode(std::span<const TokenId> ids) const;

  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

/// Exact per-token counts, ordered by token for determinism.
using TokenCounts = std::map<std::string, std::uint64_t, std::less<>>;

struct CorpusScan {
  TokenCounts counts;
  std::size_t lines_read = 0;
  std::size_t lines_skipped = 0;
  std::vector<std::string> warnings;
};

/// Counts normalised tokens, one sentence per line. Lines that are not valid
/// UTF-8 are skipped with a warning. Throws UsageError("empty corpus") when
/// no token was seen.
CorpusScan scan_corpus(std::istream& corpus);

struct VocabularyBuild {
  Vocabulary vocab;
  TokenCounts counts;  ///< counts of the tokens kept in `vocab`
  CorpusScan scan;
};

/// Keeps tokens with count >= min_count, capped at `max_vocab` content tokens
/// by descending count (ties lexicographic). Ids follow the same order.
/// max_vocab == 0 means no cap.
VocabularyBuild build_vocabulary(std::istream& corpus, std::uint64_t min_count = 1,
                                 std::size_t max_vocab = 0);
VocabularyBuild build_vocabulary(const TokenCounts& counts, std::uint64_t min_count = 1,
                                 std::size_t max_vocab = 0);

/// How the label rate is measured.
enum class LabelRateMode {
  kTypes,      ///< fraction of vocabulary types (default)
  kTokenMass,  ///< fraction of corpus token occurrences
};

inline constexpr double kDefaultLabelRate = 0.5;

/// Frequency labels: 1 marks low-frequency tokens. Tokens are sorted by
/// ascending count with lexicographic tie-break; in type mode the first
/// ceil(rate * V) get label 1. In token-mass mode the shortest such prefix
/// covering at least rate * (total count) gets label 1. Special tokens must
/// not appear in `counts`.
std::map<std::string, int, std::less<>> assign_frequency_labels(
    const TokenCounts& counts, double rate, LabelRateMode mode = LabelRateMode::kTypes);

/// Per-id counts and labels aligned with a Vocabulary.
class FrequencyTable {
 public:
  FrequencyTable() = default;

  static FrequencyTable build(const Vocabulary& vocab, const TokenCounts& counts, double rate,
                              LabelRateMode mode = LabelRateMode::kTypes);
  /// From an externally supplied label map (e.g. a label file). Vocabulary
  /// tokens missing from `labels` are an error.
  static FrequencyTable from_labels(const Vocabulary& vocab,
                                    const std::map<std::string, int, std::less<>>& labels,
                                    const TokenCounts& counts = {});

  /// 0 = high frequency, 1 = low frequency. Specials are always 0.
  int label(TokenId id) const { return labels_.at(static_cast<std::size_t>(id)); }
  std::uint64_t count(TokenId id) const { return counts_.at(static_cast<std::size_t>(id)); }
  Index size() const { return static_cast<Index>(labels_.size()); }
  double rate() const { return rate_; }
  const std::vector<int>& labels() const { return labels_; }

 private:
  std::vector<std::uint64_t> counts_;
  std::vector<int> labels_;
  double rate_ = kDefaultLabelRate;
};

// TSV artifacts ---------------------------------------------------------------

/// `id<TAB>token`, one per line, specials included.
void write_vocabulary(std::ostream& out, const Vocabulary& vocab);
Vocabulary read_vocabulary(std::istream& in);

/// `token<TAB>count`, descending count, ties lexicographic.
void write_counts(std::ostream& out, const TokenCounts& counts);
TokenCounts read_counts(std::istream& in);

/// `token<TAB>label`, in count-file order.
void write_labels(std::ostream& out, const TokenCounts& counts,
                  const std::map<std::string, int, std::less<>>& labels);
std::map<std::string, int, std::less<>> read_labels(std::istream& in);

Vocabulary load_vocabulary(const std::filesystem::path& path);
TokenCounts load_counts(const std::filesystem::path& path);
std::map<std::string, int, std::less<>> load_labels(const std::filesystem::path& path);

/// Encodes every non-empty line of a corpus stream.
std::vector<std::vector<TokenId>> encode_corpus(std::istream& corpus, const Vocabulary& vocab);

}  // namespace freqtune
