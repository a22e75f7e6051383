#include "freqtune/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "freqtune/error.hpp"
#include "freqtune/random.hpp"

namespace freqtune {

std::string_view to_string(AugmentStrategy s) {
  switch (s) {
    case AugmentStrategy::kTokenCutoff: return "token_cutoff";
    case AugmentStrategy::kFeatureCutoff: return "feature_cutoff";
    case AugmentStrategy::kTokenShuffle: return "token_shuffle";
    case AugmentStrategy::kDropout: return "dropout";
  }
  return "unknown";
}

AugmentStrategy parse_augment_strategy(std::string_view name) {
  for (auto s : {AugmentStrategy::kTokenCutoff, AugmentStrategy::kFeatureCutoff,
                 AugmentStrategy::kTokenShuffle, AugmentStrategy::kDropout})
    if (to_string(s) == name) return s;
  throw UsageError("unknown augmentation strategy '" + std::string(name) + "'");
}

void AugmentSpec::validate() const {
  if (!(rate >= 0.0 && rate < 1.0))
    throw UsageError("augmentation rate must be in [0, 1), got " + std::to_string(rate));
}

std::vector<Index> sample_without_replacement(Index n, Index k, std::uint64_t seed) {
  std::vector<Index> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), Index{0});
  Rng rng(seed);
  k = std::min(k, n);
  for (Index i = 0; i < k; ++i) {
    const auto j = i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  pool.resize(static_cast<std::size_t>(k));
  return pool;
}

namespace {

std::vector<Index> content_positions(std::span<const TokenId> ids) {
  std::vector<Index> pos;
  for (std::size_t t = 0; t < ids.size(); ++t)
    if (is_content(ids[t])) pos.push_back(static_cast<Index>(t));
  return pos;
}

}  // namespace

AugmentedView augment(std::span<const TokenId> ids, const AugmentSpec& spec, Index embedding_dim) {
  spec.validate();
  AugmentedView view;
  view.ids.assign(ids.begin(), ids.end());
  const auto content = content_positions(ids);
  const auto n = static_cast<Index>(content.size());

  switch (spec.strategy) {
    case AugmentStrategy::kDropout:
      break;
    case AugmentStrategy::kFeatureCutoff: {
      const auto k = static_cast<Index>(std::floor(spec.rate * static_cast<double>(embedding_dim)));
      view.feature_cutoff = sample_without_replacement(embedding_dim, k, spec.seed);
      std::sort(view.feature_cutoff.begin(), view.feature_cutoff.end());
      break;
    }
    case AugmentStrategy::kTokenCutoff: {
      if (n < 2) {
        view.too_short = true;
        break;
      }
      const auto k = static_cast<Index>(std::floor(spec.rate * static_cast<double>(n)));
      if (k == 0) break;
      std::vector<bool> drop(ids.size(), false);
      for (Index c : sample_without_replacement(n, k, spec.seed))
        drop[static_cast<std::size_t>(content[static_cast<std::size_t>(c)])] = true;
      view.ids.clear();
      for (std::size_t t = 0; t < ids.size(); ++t)
        if (!drop[t]) view.ids.push_back(ids[t]);
      break;
    }
    case AugmentStrategy::kTokenShuffle: {
      if (n < 2) {
        view.too_short = true;
        break;
      }
      std::vector<TokenId> tokens;
      for (Index p : content) tokens.push_back(ids[static_cast<std::size_t>(p)]);
      Rng rng(spec.seed);
      rng.shuffle(std::span<TokenId>(tokens));
      for (std::size_t i = 0; i < content.size(); ++i)
        view.ids[static_cast<std::size_t>(content[i])] = tokens[i];
      break;
    }
  }
  return view;
}

IncompleteSentence make_incomplete(std::span<const TokenId> ids, const FrequencyTable& labels,
                                   double rate, std::uint64_t seed, const MaskingOptions& options) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw UsageError("masking rate must be in [0, 1), got " + std::to_string(rate));
  IncompleteSentence out;
  out.original.assign(ids.begin(), ids.end());

  std::vector<Index> low;
  Index content = 0;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (!is_content(ids[t])) continue;
    ++content;
    if (!is_special(ids[t]) && labels.label(ids[t]) == 1) low.push_back(static_cast<Index>(t));
  }
  out.no_low_frequency = low.empty();

  Rng rng(seed);
  if (options.mode == MaskingMode::kPerLowFrequencyToken) {
    for (Index p : low)
      if (rng.bernoulli(rate)) out.mask_positions.push_back(p);
  } else {
    const auto k = std::min<Index>(static_cast<Index>(std::lround(rate * static_cast<double>(content))),
                                   static_cast<Index>(low.size()));
    for (Index c : sample_without_replacement(static_cast<Index>(low.size()), k, seed))
      out.mask_positions.push_back(low[static_cast<std::size_t>(c)]);
    std::sort(out.mask_positions.begin(), out.mask_positions.end());
  }

  if (options.realization == MaskingRealization::kReplaceWithMask) {
    out.masked = out.original;
    for (Index p : out.mask_positions) out.masked[static_cast<std::size_t>(p)] = special::kMask;
  } else {
    std::vector<bool> drop(ids.size(), false);
    for (Index p : out.mask_positions) drop[static_cast<std::size_t>(p)] = true;
    // Deleting every content token would leave nothing to pool.
    if (static_cast<Index>(out.mask_positions.size()) == content) drop[static_cast<std::size_t>(out.mask_positions.back())] = false;
    for (std::size_t t = 0; t < ids.size(); ++t)
      if (!drop[t]) out.masked.push_back(ids[t]);
    if (static_cast<Index>(out.mask_positions.size()) == content) out.mask_positions.pop_back();
  }
  return out;
}

}  // namespace freqtune
