#pragma once

// Training objectives: frequency-adversarial tuning, incomplete-sentence
// filtering and the contrastive regulariser, plus the two-layer
// discriminators they use.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "freqtune/error.hpp"
#include "freqtune/ops.hpp"
#include "freqtune/random.hpp"
#include "freqtune/tensor.hpp"

namespace freqtune {

enum class Phase { kWarmup, kMain };

inline const char* to_string(Phase p) { return p == Phase::kWarmup ? "warmup" : "main"; }

/// affine(D -> hidden) -> ReLU -> affine(hidden -> 2).
template <typename Scalar>
struct Discriminator {
  static constexpr Index kClasses = 2;

  Tensor<Scalar> hidden_weight, hidden_bias;
  Tensor<Scalar> output_weight, output_bias;

  /// Weights ~ Normal(0, 1/fan_in), zero biases.
  static Discriminator initialize(Index input_dim, Index hidden_dim, std::uint64_t seed) {
    if (input_dim <= 0 || hidden_dim <= 0) throw UsageError("discriminator: widths must be positive");
    Rng rng(derive_seed({seed, 0x64697363}));
    auto init = [&rng](Index rows, Index cols) {
      Matrix<Scalar> m(rows, cols);
      const double s = 1.0 / std::sqrt(static_cast<double>(rows));
      for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(s * rng.normal());
      return Tensor<Scalar>::from_matrix(std::move(m), true);
    };
    Discriminator d;
    d.hidden_weight = init(input_dim, hidden_dim);
    d.hidden_bias = Tensor<Scalar>::zeros({hidden_dim}, true);
    d.output_weight = init(hidden_dim, kClasses);
    d.output_bias = Tensor<Scalar>::zeros({kClasses}, true);
    return d;
  }

  Index input_dim() const { return hidden_weight.rows(); }
  Index hidden_dim() const { return hidden_weight.cols(); }

  /// Logits, one row of 2 per input row.
  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    return add(matmul(relu(add(matmul(x, hidden_weight), hidden_bias)), output_weight), output_bias);
  }

  std::vector<std::pair<std::string, Tensor<Scalar>>> named_parameters(const std::string& prefix) const {
    return {{prefix + ".hidden.weight", hidden_weight},
            {prefix + ".hidden.bias", hidden_bias},
            {prefix + ".output.weight", output_weight},
            {prefix + ".output.bias", output_bias}};
  }
};

struct LossWeights {
  double alpha = 1.0;  ///< adversarial tuning
  double beta = 1.0;   ///< incomplete sentence filtering
  double tau = 0.1;    ///< contrastive temperature

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) throw UsageError("loss weights alpha, beta must be >= 0");
    if (!(tau > 0.0)) throw UsageError("temperature tau must be > 0");
  }
};

/// Whether the discriminator input passes through gradient reversal. The
/// plain path exists to check the reversal contract.
enum class GradientPath { kReversed, kPlain };

/// Mean over sentences of the per-sentence mean token cross-entropy of the
/// similarity discriminator against frequency labels.
///
/// `positions[i]` selects rows of `hidden[i]` (content tokens) and
/// `labels[i]` gives their frequency labels. Sentences without positions are
/// skipped; if none remain this throws.
template <typename Scalar>
Tensor<Scalar> adversarial_loss(std::span<const Tensor<Scalar>> hidden,
                                std::span<const std::vector<Index>> positions,
                                std::span<const std::vector<Index>> labels,
                                const Discriminator<Scalar>& discriminator,
                                GradientPath path = GradientPath::kReversed) {
  if (hidden.size() != positions.size() || hidden.size() != labels.size())
    throw ShapeError("adversarial_loss: " + std::to_string(hidden.size()) + " sentences, " +
                     std::to_string(positions.size()) + " position lists, " +
                     std::to_string(labels.size()) + " label lists");
  std::vector<Tensor<Scalar>> per_sentence;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (positions[i].size() != labels[i].size())
      throw ShapeError("adversarial_loss: sentence " + std::to_string(i) + " has " +
                       std::to_string(positions[i].size()) + " positions but " +
                       std::to_string(labels[i].size()) + " labels");
    if (positions[i].empty()) continue;
    Tensor<Scalar> tokens = embedding_lookup(hidden[i], std::span<const Index>(positions[i]));
    if (path == GradientPath::kReversed) tokens = grl(tokens);
    per_sentence.push_back(mean(cross_entropy_rows(discriminator(tokens), std::span<const Index>(labels[i]))));
  }
  if (per_sentence.empty()) throw UsageError("adversarial_loss: all positions are masked");
  return mean(concat(per_sentence, 0));
}

/// Mean over sentences of CE(G(h_hat_i), 1) + CE(G(h_i), 0). Pairs with
/// `use_incomplete[i] == false` contribute only the original-sentence term.
template <typename Scalar>
Tensor<Scalar> isf_loss(const Tensor<Scalar>& original, const Tensor<Scalar>& incomplete,
                        std::span<const bool> use_incomplete,
                        const Discriminator<Scalar>& discriminator) {
  if (original.rank() != 2 || original.shape() != incomplete.shape())
    throw ShapeError("isf_loss: original " + shape_string(original.shape()) + " and incomplete " +
                     shape_string(incomplete.shape()) + " batches differ");
  const Index n = original.rows();
  if (static_cast<Index>(use_incomplete.size()) != n)
    throw ShapeError("isf_loss: " + std::to_string(use_incomplete.size()) + " flags for " +
                     std::to_string(n) + " pairs");
  const std::vector<Index> zeros(static_cast<std::size_t>(n), 0);
  Tensor<Scalar> total = sum(cross_entropy_rows(discriminator(original), std::span<const Index>(zeros)));

  std::vector<Index> rows;
  for (Index i = 0; i < n; ++i)
    if (use_incomplete[static_cast<std::size_t>(i)]) rows.push_back(i);
  if (!rows.empty()) {
    const std::vector<Index> ones(rows.size(), 1);
    Tensor<Scalar> selected = embedding_lookup(incomplete, std::span<const Index>(rows));
    total = add(total, sum(cross_entropy_rows(discriminator(selected), std::span<const Index>(ones))));
  }
  return scale(total, Scalar{1} / static_cast<Scalar>(n));
}

struct ContrastiveOptions {
  /// Adds the positive pair to the denominator (standard InfoNCE). Off by
  /// default: the denominator holds only the 2B-2 views of other sentences.
  bool denominator_includes_positive = false;
};

/// Temperature-scaled cosine InfoNCE over two views (rows aligned by sentence).
/// For sentence i the positive is (a_i, b_i); negatives are both views of
/// every other sentence.
template <typename Scalar>
Tensor<Scalar> contrastive_loss(const Tensor<Scalar>& view_a, const Tensor<Scalar>& view_b,
                                Scalar tau, const ContrastiveOptions& options = {}) {
  if (view_a.rank() != 2 || view_a.shape() != view_b.shape())
    throw ShapeError("contrastive_loss: views " + shape_string(view_a.shape()) + " and " +
                     shape_string(view_b.shape()) + " differ");
  const Index b = view_a.rows();
  if (b < 2) throw UsageError("contrastive_loss: batch of " + std::to_string(b) + " has no negatives");
  if (!(tau > Scalar{0})) throw UsageError("contrastive_loss: tau must be > 0");

  const Tensor<Scalar> unit = normalize_rows(concat<Scalar>({view_a, view_b}, 0));
  const Tensor<Scalar> anchors = slice(unit, 0, 0, b);
  const Tensor<Scalar> logits = scale(matmul(anchors, transpose(unit)), Scalar{1} / tau);

  Mask keep = Mask::Constant(b, 2 * b, true);
  std::vector<Index> positive(static_cast<std::size_t>(b));
  for (Index i = 0; i < b; ++i) {
    positive[static_cast<std::size_t>(i)] = b + i;
    keep(i, i) = false;
    keep(i, b + i) = options.denominator_includes_positive;
  }
  return mean(subtract(logsumexp_rows(logits, &keep), pick(logits, std::span<const Index>(positive))));
}

/// Loss components of one step; absent components were not computed.
template <typename Scalar>
struct LossComponents {
  std::optional<Tensor<Scalar>> adversarial;
  std::optional<Tensor<Scalar>> filtering;
  Tensor<Scalar> contrastive;
};

/// Warm-up: contrastive only. Main: alpha * L_AT + beta * L_ISF + R. The
/// min-max over the similarity discriminator is carried by the gradient
/// reversal inside L_AT, so the result is minimised as a whole.
template <typename Scalar>
Tensor<Scalar> total_loss(const LossComponents<Scalar>& parts, const LossWeights& weights, Phase phase) {
  if (phase == Phase::kWarmup) return parts.contrastive;
  if (!parts.adversarial || !parts.filtering)
    throw UsageError("total_loss: main phase needs the adversarial and filtering components");
  return add(add(scale(*parts.adversarial, static_cast<Scalar>(weights.alpha)),
                 scale(*parts.filtering, static_cast<Scalar>(weights.beta))),
             parts.contrastive);
}

}  // namespace freqtune
