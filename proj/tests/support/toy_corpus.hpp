#pragma once

// Template corpus with a Zipf-like token count profile, for training tests.

#include <cstdint>
#include <string>
#include <vector>

#include "freqtune/tensor.hpp"

namespace freqtune::test {

struct ToyCorpusOptions {
  Index sentences = 2000;
  std::uint64_t seed = 2024;
  double zipf_exponent = 1.1;
  Index nouns = 200;
  Index verbs = 100;
  Index adjectives = 100;
  Index places = 60;
  Index adverbs = 40;
};

std::vector<std::string> make_toy_corpus(const ToyCorpusOptions& options = {});

/// Lines joined with newlines.
std::string join_lines(const std::vector<std::string>& lines);

}  // namespace freqtune::test
