#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "freqtune/augment.hpp"
#include "freqtune/error.hpp"
#include "freqtune/random.hpp"

namespace freqtune::test {
namespace {

// ids 5..9 are high frequency (h0..h4), 10..14 low frequency (l0..l4).
struct Fixture {
  Vocabulary vocab;
  FrequencyTable table;
  Fixture() {
    std::map<std::string, int, std::less<>> labels;
    for (int i = 0; i < 5; ++i) labels["h" + std::to_string(i)] = 0, vocab.add("h" + std::to_string(i));
    for (int i = 0; i < 5; ++i) labels["l" + std::to_string(i)] = 1, vocab.add("l" + std::to_string(i));
    table = FrequencyTable::from_labels(vocab, labels);
  }
};

std::vector<TokenId> wrap(std::vector<TokenId> content) {
  content.insert(content.begin(), special::kCls);
  content.push_back(special::kSep);
  return content;
}

TEST(Sampler, MatchesPartialFisherYatesOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Index n = 1 + static_cast<Index>(seed % 13), k = static_cast<Index>(seed % 7);
    std::vector<Index> pool(static_cast<std::size_t>(n));
    std::iota(pool.begin(), pool.end(), Index{0});
    Rng rng(seed);
    const Index kk = std::min(k, n);
    for (Index i = 0; i < kk; ++i)
      std::swap(pool[static_cast<std::size_t>(i)],
                pool[static_cast<std::size_t>(i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - i))))]);
    pool.resize(static_cast<std::size_t>(kk));
    const auto got = sample_without_replacement(n, k, seed);
    EXPECT_EQ(got, pool);
    EXPECT_EQ(std::set<Index>(got.begin(), got.end()).size(), got.size());
  }
}

TEST(Augment, TokenCutoffRemovesFloorRateContent) {
  const auto ids = wrap({5, 6, 7, 8, 9, 10, 11});
  const auto view = augment(ids, {AugmentStrategy::kTokenCutoff, 0.3, 9}, 16);
  EXPECT_EQ(view.ids.size(), ids.size() - 2);  // floor(0.3 * 7) = 2
  EXPECT_EQ(view.ids.front(), special::kCls);
  EXPECT_EQ(view.ids.back(), special::kSep);
  // Survivors keep their relative order.
  EXPECT_TRUE(std::includes(ids.begin(), ids.end(), view.ids.begin(), view.ids.end()));
}

TEST(Augment, ShufflePermutesContentOnly) {
  const auto ids = wrap({5, 6, 7, 8, 9, 10});
  const auto view = augment(ids, {AugmentStrategy::kTokenShuffle, 0.0, 4}, 16);
  ASSERT_EQ(view.ids.size(), ids.size());
  EXPECT_EQ(view.ids.front(), special::kCls);
  EXPECT_EQ(view.ids.back(), special::kSep);
  EXPECT_TRUE(std::is_permutation(ids.begin(), ids.end(), view.ids.begin()));
  EXPECT_EQ(augment(ids, {AugmentStrategy::kTokenShuffle, 0.0, 4}, 16).ids, view.ids);
}

TEST(Augment, FeatureCutoffListsSortedDistinctDims) {
  const auto ids = wrap({5, 6});
  const auto view = augment(ids, {AugmentStrategy::kFeatureCutoff, 0.2, 3}, 64);
  EXPECT_EQ(view.ids, ids);
  ASSERT_EQ(view.feature_cutoff.size(), 12u);  // floor(0.2 * 64)
  EXPECT_TRUE(std::is_sorted(view.feature_cutoff.begin(), view.feature_cutoff.end()));
  EXPECT_EQ(std::set<Index>(view.feature_cutoff.begin(), view.feature_cutoff.end()).size(), 12u);
}

TEST(Augment, ShortSentencesPassThrough) {
  const auto ids = wrap({5});
  for (auto s : {AugmentStrategy::kTokenCutoff, AugmentStrategy::kTokenShuffle}) {
    const auto view = augment(ids, {s, 0.5, 1}, 8);
    EXPECT_TRUE(view.too_short);
    EXPECT_EQ(view.ids, ids);
  }
  EXPECT_THROW(augment(ids, {AugmentStrategy::kTokenCutoff, 1.0, 1}, 8), UsageError);
}

TEST(Masking, OnlyLowFrequencyTokensAreMasked) {
  Fixture f;
  const auto ids = wrap({5, 10, special::kUnk, 11, 6, 12, 13, 14});
  for (std::uint64_t seed = 0; seed < 500; ++seed) {
    const auto inc = make_incomplete(ids, f.table, 0.5, seed);
    ASSERT_EQ(inc.masked.size(), ids.size());
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (inc.masked[t] == ids[t]) continue;
      EXPECT_EQ(inc.masked[t], special::kMask);
      EXPECT_EQ(f.table.label(ids[t]), 1);
      EXPECT_FALSE(is_special(ids[t]));
    }
    EXPECT_EQ(inc.info_label, 1);
  }
}

TEST(Masking, MeanMaskedCountIsRateTimesLowTokens) {
  Fixture f;
  const auto ids = wrap({5, 10, 11, 6, 12, 13, 14, 7});  // five low-frequency tokens
  double total = 0.0;
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) total += static_cast<double>(make_incomplete(ids, f.table, 0.2, static_cast<std::uint64_t>(d)).mask_positions.size());
  const double mean = total / draws;
  EXPECT_GE(mean, 0.95);
  EXPECT_LE(mean, 1.05);
}

TEST(Masking, NoLowFrequencyTokensMeansNoIncompleteTerm) {
  Fixture f;
  const auto inc = make_incomplete(wrap({5, 6, 7}), f.table, 0.9, 1);
  EXPECT_TRUE(inc.no_low_frequency);
  EXPECT_FALSE(inc.usable());
  EXPECT_EQ(inc.masked, inc.original);
}

TEST(Masking, DeleteRealizationAndWholeSentenceMode) {
  Fixture f;
  const auto ids = wrap({5, 10, 11, 12, 6});
  MaskingOptions del{MaskingMode::kPerLowFrequencyToken, MaskingRealization::kDelete};
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto inc = make_incomplete(ids, f.table, 0.5, seed, del);
    EXPECT_EQ(inc.masked.size() + inc.mask_positions.size(), ids.size());
  }
  MaskingOptions whole{MaskingMode::kWholeSentence, MaskingRealization::kReplaceWithMask};
  const auto inc = make_incomplete(ids, f.table, 0.4, 3, whole);
  EXPECT_EQ(inc.mask_positions.size(), 2u);  // round(0.4 * 5 content tokens)
}

}  // namespace
}  // namespace freqtune::test
