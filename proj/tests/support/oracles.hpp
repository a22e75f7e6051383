#pragma once

// Loop-based reference implementations of the three losses. They read tensor
// values only and never go through the autograd ops.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "freqtune/objectives.hpp"

namespace freqtune::test {

inline std::vector<double> oracle_logits(const Discriminator<double>& d, const Eigen::RowVectorXd& x) {
  const auto& w1 = d.hidden_weight.value();
  const auto& b1 = d.hidden_bias.value();
  const auto& w2 = d.output_weight.value();
  const auto& b2 = d.output_bias.value();
  std::vector<double> h(static_cast<std::size_t>(w1.cols()));
  for (Index j = 0; j < w1.cols(); ++j) {
    double s = b1.data()[j];
    for (Index i = 0; i < x.size(); ++i) s += x(i) * w1(i, j);
    h[static_cast<std::size_t>(j)] = std::max(s, 0.0);
  }
  std::vector<double> out(2);
  for (Index c = 0; c < 2; ++c) {
    double s = b2.data()[c];
    for (Index j = 0; j < w2.rows(); ++j) s += h[static_cast<std::size_t>(j)] * w2(j, c);
    out[static_cast<std::size_t>(c)] = s;
  }
  return out;
}

inline double oracle_ce(const std::vector<double>& logits, Index label) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return m + std::log(z) - logits[static_cast<std::size_t>(label)];
}

inline double oracle_adversarial(std::span<const Tensor<double>> hidden, std::span<const std::vector<Index>> positions,
                                 std::span<const std::vector<Index>> labels, const Discriminator<double>& d) {
  double total = 0.0;
  int sentences = 0;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (positions[i].empty()) continue;
    double s = 0.0;
    for (std::size_t t = 0; t < positions[i].size(); ++t)
      s += oracle_ce(oracle_logits(d, hidden[i].value().row(positions[i][t])), labels[i][t]);
    total += s / static_cast<double>(positions[i].size());
    ++sentences;
  }
  return total / sentences;
}

inline double oracle_isf(const Tensor<double>& original, const Tensor<double>& incomplete,
                         std::span<const bool> use_incomplete, const Discriminator<double>& d) {
  double total = 0.0;
  const Index n = original.rows();
  for (Index i = 0; i < n; ++i) {
    total += oracle_ce(oracle_logits(d, original.value().row(i)), 0);
    if (use_incomplete[static_cast<std::size_t>(i)]) total += oracle_ce(oracle_logits(d, incomplete.value().row(i)), 1);
  }
  return total / static_cast<double>(n);
}

inline double oracle_cosine(const Eigen::RowVectorXd& a, const Eigen::RowVectorXd& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (Index k = 0; k < a.size(); ++k) {
    dot += a(k) * b(k);
    na += a(k) * a(k);
    nb += b(k) * b(k);
  }
  return dot / std::sqrt(na * nb);
}

inline double oracle_infonce(const Tensor<double>& a, const Tensor<double>& b, double tau, bool include_positive) {
  const Index n = a.rows();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const Eigen::RowVectorXd anchor = a.value().row(i);
    const double pos = oracle_cosine(anchor, b.value().row(i)) / tau;
    double denom = include_positive ? std::exp(pos) : 0.0;
    for (Index j = 0; j < n; ++j) {
      if (j == i) continue;
      denom += std::exp(oracle_cosine(anchor, a.value().row(j)) / tau);
      denom += std::exp(oracle_cosine(anchor, b.value().row(j)) / tau);
    }
    total += std::log(denom) - pos;
  }
  return total / static_cast<double>(n);
}

}  // namespace freqtune::test
