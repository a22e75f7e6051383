#pragma once

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "freqtune/encoder.hpp"
#include "freqtune/vocab.hpp"

namespace freqtune {

/// 1-based ranks; tied values share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson correlation of the average ranks. Throws UsageError for lengths
/// that differ or are below 2, NumericError when either input is constant.
double spearman(std::span<const double> x, std::span<const double> y);

struct StsPair {
  std::string sentence_a;
  std::string sentence_b;
  double score = 0.0;  ///< in [0, 5]
};

/// `sentence_a<TAB>sentence_b<TAB>score` per line; blank lines skipped.
/// Errors name `source` and the line number.
std::vector<StsPair> read_sts_pairs(std::istream& in, const std::string& source = "pairs");

/// Eval-mode pooled embeddings, one row per sentence. Each sentence is encoded
/// on its own, so a row does not depend on its neighbours.
RealMatrix embed_sentences(const EncoderParams& params, const Vocabulary& vocab,
                           std::span<const std::string> sentences);

struct StsReport {
  double spearman = 0.0;
  std::vector<double> cosines;  ///< in pair order
  std::vector<double> gold;
};

StsReport evaluate_sts(std::span<const StsPair> pairs, const EncoderParams& params, const Vocabulary& vocab);

/// `spearman\t<value>` then `index\tgold\tcosine` rows.
void write_sts_report(std::ostream& out, const StsReport& report);

}  // namespace freqtune
