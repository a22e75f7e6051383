#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "freqtune/encoder.hpp"
#include "freqtune/vocab.hpp"

namespace freqtune {

/// Mean cosine over all unordered pairs of rows, or over `max_pairs` seeded
/// random pairs when there are more. Throws for fewer than 2 rows or a
/// zero-norm row.
double mean_pairwise_cosine(const RealMatrix& points, Index max_pairs, std::uint64_t seed);
/// Mean cosine between rows of `a` and rows of `b`, sampled the same way.
double mean_cross_cosine(const RealMatrix& a, const RealMatrix& b, Index max_pairs, std::uint64_t seed);

/// Contextual embeddings of content tokens (specials excluded).
struct TokenSample {
  RealMatrix embeddings;
  std::vector<TokenId> ids;
  std::vector<int> labels;
  Index sentences = 0;
};

/// Encodes (eval mode, one sentence at a time) a seeded sample of
/// `sample_sentences` sentences and keeps at most `max_per_type` occurrences
/// of each token type.
TokenSample collect_token_embeddings(const EncoderParams& params, std::span<const std::vector<TokenId>> corpus,
                                     const FrequencyTable& labels, Index sample_sentences, Index max_per_type,
                                     std::uint64_t seed);

struct ProbeOptions {
  Index hidden = 0;  ///< 0 = input width
  Index epochs = 100;
  double learning_rate = 1e-2;
  double held_out_fraction = 0.3;
  std::uint64_t seed = 11;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double held_out_accuracy = 0.0;
  Index train_size = 0;
  Index held_out_size = 0;
};

/// Trains a fresh discriminator-shaped classifier (full-batch Adam) on frozen
/// rows of `x`. Rows are split by `groups` (token type), so held-out types are
/// never seen in training, and each side is subsampled to balanced classes.
ProbeResult train_probe(const RealMatrix& x, std::span<const int> labels, std::span<const TokenId> groups,
                        const ProbeOptions& options);

struct DiagnosticsOptions {
  Index sample_sentences = 500;
  Index max_per_type = 8;
  Index max_pairs = 20000;
  std::uint64_t seed = 7;
  ProbeOptions probe;
  Index probe_repeats = 5;  ///< independent type splits, accuracies averaged
};

struct DiagnosticsReport {
  double mean_pairwise_cosine = 0.0;
  double mean_norm_high = 0.0;  ///< label 0
  double mean_norm_low = 0.0;   ///< label 1
  double within_high_cosine = 0.0;
  double within_low_cosine = 0.0;
  double cross_band_cosine = 0.0;
  double probe_accuracy = 0.0;  ///< held-out, mean over repeats
  double probe_train_accuracy = 0.0;
  Index sentences = 0;
  Index tokens = 0;
  Index high_tokens = 0;
  Index low_tokens = 0;
  Index probe_train_size = 0;     ///< summed over repeats
  Index probe_held_out_size = 0;  ///< summed over repeats

  /// Mean within-band cosine minus cross-band cosine.
  double cross_band_gap() const { return 0.5 * (within_high_cosine + within_low_cosine) - cross_band_cosine; }
};

DiagnosticsReport anisotropy_report(const TokenSample& sample, const DiagnosticsOptions& options);
DiagnosticsReport anisotropy_report(const EncoderParams& params, std::span<const std::vector<TokenId>> corpus,
                                    const FrequencyTable& labels, const DiagnosticsOptions& options);

/// `key<TAB>value` lines for every report field.
void write_diagnostics(std::ostream& out, const DiagnosticsReport& report);

/// Coordinates of the centred rows on the top `components` principal
/// directions, found by orthogonal (block power) iteration. Column signs are
/// fixed so the largest-magnitude coordinate is positive.
RealMatrix principal_projection(const RealMatrix& points, Index components = 2, Index iterations = 500,
                                std::uint64_t seed = 0);

struct ExportRow {
  std::string id;
  std::string label;  ///< "0", "1" or "NA"
};

/// TSV with header `id label dim_0 .. dim_{D-1}` (plus `proj_0 proj_1` when
/// `projection` is set), one row per embedding.
void export_embeddings(std::ostream& out, const RealMatrix& points, std::span<const ExportRow> rows,
                       bool projection, std::uint64_t seed = 0);

}  // namespace freqtune
