#include "freqtune/eval.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>

#include "freqtune/config.hpp"
#include "freqtune/error.hpp"

namespace freqtune {

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of positions i+1 .. j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size())
    throw UsageError("spearman: sequences of length " + std::to_string(x.size()) + " and " +
                     std::to_string(y.size()));
  if (x.size() < 2) throw UsageError("spearman: need at least 2 values");
  for (double v : x)
    if (!std::isfinite(v)) throw NumericError("spearman: non-finite value");
  for (double v : y)
    if (!std::isfinite(v)) throw NumericError("spearman: non-finite value");

  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("spearman: constant sequence, correlation undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<StsPair> read_sts_pairs(std::istream& in, const std::string& source) {
  std::vector<StsPair> pairs;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto where = source + ":" + std::to_string(number) + ": ";
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos || line.find('\t', t2 + 1) != std::string::npos)
      throw UsageError(where + "expected 3 tab-separated fields");
    StsPair p{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), 0.0};
    const std::string score = line.substr(t2 + 1);
    try {
      std::size_t used = 0;
      p.score = std::stod(score, &used);
      if (used != score.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw UsageError(where + "score '" + score + "' is not a number");
    }
    if (!(p.score >= 0.0 && p.score <= 5.0)) throw UsageError(where + "score " + score + " outside [0, 5]");
    if (p.sentence_a.empty() || p.sentence_b.empty()) throw UsageError(where + "empty sentence");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

RealMatrix embed_sentences(const EncoderParams& params, const Vocabulary& vocab,
                           std::span<const std::string> sentences) {
  RealMatrix out(static_cast<Index>(sentences.size()), params.config.dim);
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    const std::vector<std::vector<TokenId>> one{vocab.encode(sentences[i])};
    const auto encoded = encode(one, params, EncodeOptions{});
    out.row(static_cast<Index>(i)) = sentence_embedding(encoded).value();
  }
  return out;
}

namespace {

double cosine(const RealMatrix& a, Index i, const RealMatrix& b, Index j) {
  const double na = a.row(i).norm(), nb = b.row(j).norm();
  if (na == 0.0 || nb == 0.0) throw NumericError("cosine of a zero-norm sentence embedding");
  // Exact for equal rows, so identical sentences tie instead of differing by an ulp.
  if (a.row(i) == b.row(j)) return 1.0;
  return std::clamp(a.row(i).dot(b.row(j)) / (na * nb), -1.0, 1.0);
}

}  // namespace

StsReport evaluate_sts(std::span<const StsPair> pairs, const EncoderParams& params, const Vocabulary& vocab) {
  std::vector<std::string> a, b;
  StsReport report;
  for (const auto& p : pairs) {
    a.push_back(p.sentence_a);
    b.push_back(p.sentence_b);
    report.gold.push_back(p.score);
  }
  const RealMatrix ea = embed_sentences(params, vocab, a);
  const RealMatrix eb = embed_sentences(params, vocab, b);
  for (Index i = 0; i < ea.rows(); ++i) report.cosines.push_back(cosine(ea, i, eb, i));
  report.spearman = spearman(report.cosines, report.gold);
  return report;
}

void write_sts_report(std::ostream& out, const StsReport& report) {
  out << "spearman\t" << format_real(report.spearman) << '\n';
  out << "index\tgold\tcosine\n";
  for (std::size_t i = 0; i < report.cosines.size(); ++i)
    out << i << '\t' << format_real(report.gold[i]) << '\t' << format_real(report.cosines[i]) << '\n';
}

}  // namespace freqtune
