#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "freqtune/vocab.hpp"

namespace freqtune {

enum class AugmentStrategy { kTokenCutoff, kFeatureCutoff, kTokenShuffle, kDropout };

std::string_view to_string(AugmentStrategy s);
AugmentStrategy parse_augment_strategy(std::string_view name);

struct AugmentSpec {
  AugmentStrategy strategy = AugmentStrategy::kDropout;
  double rate = 0.0;  ///< in [0, 1)
  std::uint64_t seed = 0;

  void validate() const;
};

/// One contrastive view. Feature cutoff leaves `ids` untouched and lists the
/// embedding dimensions to zero at encode time; dropout leaves everything to
/// the encoder's own randomness.
struct AugmentedView {
  std::vector<TokenId> ids;
  std::vector<Index> feature_cutoff;
  bool too_short = false;  ///< destructive strategy skipped, sentence returned unchanged
};

AugmentedView augment(std::span<const TokenId> ids, const AugmentSpec& spec, Index embedding_dim);

/// First `k` entries of a seeded partial Fisher-Yates shuffle of [0, n).
std::vector<Index> sample_without_replacement(Index n, Index k, std::uint64_t seed);

/// How the masking rate is interpreted.
enum class MaskingMode {
  kPerLowFrequencyToken,  ///< every low-frequency position masked independently with probability eps
  kWholeSentence,  ///< round(eps * content length) low-frequency positions, chosen uniformly
};

/// How a chosen position is removed from the incomplete sentence.
enum class MaskingRealization { kReplaceWithMask, kDelete };

struct MaskingOptions {
  MaskingMode mode = MaskingMode::kPerLowFrequencyToken;
  MaskingRealization realization = MaskingRealization::kReplaceWithMask;
};

inline constexpr double kDefaultMaskingRate = 0.2;

struct IncompleteSentence {
  std::vector<TokenId> original;
  std::vector<TokenId> masked;
  std::vector<Index> mask_positions;  ///< indices into `original`
  int info_label = 1;                 ///< the original sentence carries 0
  bool no_low_frequency = false;      ///< sentence has no label-1 token

  /// Whether the pair contributes an incomplete-sentence term: something was
  /// actually removed.
  bool usable() const { return !no_low_frequency && !mask_positions.empty(); }
};

/// Masks low-frequency content tokens (label 1) of `ids`. Never touches
/// label-0 tokens or special tokens. Deterministic in `seed`.
IncompleteSentence make_incomplete(std::span<const TokenId> ids, const FrequencyTable& labels,
                                   double rate, std::uint64_t seed, const MaskingOptions& options = {});

}  // namespace freqtune
