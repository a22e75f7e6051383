#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "freqtune/objectives.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

namespace freqtune::test {
namespace {

using Disc = Discriminator<double>;

const double kLn2 = std::numbers::ln2;

Disc identity_discriminator() {
  Disc d = Disc::initialize(2, 2, 0);
  d.hidden_weight.mutable_value() = Mat::Identity(2, 2);
  d.output_weight.mutable_value() = Mat::Identity(2, 2);
  return d;
}

Disc zero_output_discriminator(Index dim) {
  Disc d = Disc::initialize(dim, dim, 1);
  d.output_weight.mutable_value().setZero();
  return d;
}

TEST(Discriminator, OutputsTwoLogits) {
  Rng rng(1);
  const Disc d = Disc::initialize(8, 5, 2);
  EXPECT_EQ(d(random_tensor(rng, {4, 8})).shape(), (Shape{4, 2}));
  EXPECT_EQ(d.named_parameters("x").size(), 4u);
}

TEST(CrossEntropy, HandExamples) {
  EXPECT_NEAR(cross_entropy(T::from_values({2}, {0.0, 0.0}), 0).item(), kLn2, 1e-12);
  EXPECT_NEAR(cross_entropy(T::from_values({2}, {1.0, 0.0}), 0).item(), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-15);
}

TEST(AdversarialLoss, HandSetLogits) {
  const Disc d = identity_discriminator();
  const std::vector<T> hidden{T::from_values({2, 2}, {1.0, 0.0, 0.0, 1.0})};
  const std::vector<std::vector<Index>> positions{{0, 1}}, labels{{0, 1}};
  const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(adversarial_loss<double>(hidden, positions, labels, d).item(), expected, 1e-12);
  EXPECT_NEAR(expected, 0.3133, 5e-5);
}

TEST(AdversarialLoss, UniformLogitsGiveLn2AndEmptyIsAnError) {
  Rng rng(3);
  const Disc d = zero_output_discriminator(8);
  const std::vector<T> hidden{random_tensor(rng, {5, 8}), random_tensor(rng, {3, 8})};
  const std::vector<std::vector<Index>> positions{{1, 2, 3}, {1}}, labels{{0, 1, 1}, {0}};
  EXPECT_NEAR(adversarial_loss<double>(hidden, positions, labels, d).item(), kLn2, 1e-12);
  const std::vector<std::vector<Index>> none{{}, {}};
  EXPECT_THROW(adversarial_loss<double>(hidden, none, none, d), UsageError);
}

TEST(AdversarialLoss, MatchesPerTokenOracle) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Disc d = Disc::initialize(8, 6, static_cast<std::uint64_t>(trial));
    std::vector<T> hidden;
    std::vector<std::vector<Index>> positions, labels;
    for (int s = 0; s < 3; ++s) {
      hidden.push_back(random_tensor(rng, {6, 8}));
      std::vector<Index> p, l;
      for (Index t = 1; t < 5; ++t)
        if (rng.bernoulli(0.7)) p.push_back(t), l.push_back(static_cast<Index>(rng.below(2)));
      if (p.empty()) p.push_back(1), l.push_back(0);
      positions.push_back(p);
      labels.push_back(l);
    }
    EXPECT_NEAR(adversarial_loss<double>(hidden, positions, labels, d).item(),
                oracle_adversarial(hidden, positions, labels, d), 1e-10);
  }
}

TEST(IsfLoss, SymmetryAndSaturation) {
  Rng rng(5);
  const Disc uniform = zero_output_discriminator(8);
  const T h = random_tensor(rng, {3, 8}), hh = random_tensor(rng, {3, 8});
  const bool all[] = {true, true, true};
  EXPECT_NEAR(isf_loss<double>(h, hh, all, uniform).item(), 2.0 * kLn2, 1e-12);

  // Margin +20 on the correct class for every row.
  const Disc perfect = identity_discriminator();
  const T orig = T::from_values({3, 2}, {20, 0, 20, 0, 20, 0});
  const T inc = T::from_values({3, 2}, {0, 20, 0, 20, 0, 20});
  EXPECT_NEAR(isf_loss<double>(orig, inc, all, perfect).item(), 0.0, 1e-6);
  EXPECT_THROW(isf_loss<double>(h, random_tensor(rng, {2, 8}), all, uniform), ShapeError);
}

TEST(IsfLoss, MatchesPerPairOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Disc d = Disc::initialize(8, 8, static_cast<std::uint64_t>(100 + trial));
    const T h = random_tensor(rng, {3, 8}), hh = random_tensor(rng, {3, 8});
    const bool use[] = {rng.bernoulli(0.7), rng.bernoulli(0.7), rng.bernoulli(0.7)};
    EXPECT_NEAR(isf_loss<double>(h, hh, use, d).item(), oracle_isf(h, hh, use, d), 1e-10);
  }
}

TEST(ContrastiveLoss, EqualCosinesGiveLnK) {
  // B = 2, all four embeddings identical: every cosine is 1, K = 2B - 2 = 2.
  const T a = T::from_values({2, 3}, {1, 2, 3, 1, 2, 3});
  EXPECT_NEAR(contrastive_loss<double>(a, a, 1.0).item(), kLn2, 1e-12);
  ContrastiveOptions with_positive{true};
  EXPECT_NEAR(contrastive_loss<double>(a, a, 1.0, with_positive).item(), std::log(3.0), 1e-12);
}

TEST(ContrastiveLoss, Saturation) {
  // Positives aligned (cos 1), every negative opposite (cos -1), tau = 0.1.
  const T a = T::from_values({2, 2}, {1, 0, -1, 0});
  const T b = T::from_values({2, 2}, {2, 0, -3, 0});
  ContrastiveOptions with_positive{true};
  EXPECT_NEAR(contrastive_loss<double>(a, b, 0.1, with_positive).item(), 0.0, 1e-6);
  // Positive excluded from the denominator: log(K e^{-10}) - 10.
  EXPECT_NEAR(contrastive_loss<double>(a, b, 0.1).item(), std::log(2.0) - 20.0, 1e-12);
}

TEST(ContrastiveLoss, MatchesDoubleLoopOracle) {
  Rng rng(7);
  for (Index b = 2; b <= 8; ++b) {
    for (bool include : {false, true}) {
      const T x = random_tensor(rng, {b, 6}), y = random_tensor(rng, {b, 6});
      const double tau = 0.05 + rng.uniform();
      EXPECT_NEAR(contrastive_loss<double>(x, y, tau, {include}).item(), oracle_infonce(x, y, tau, include), 1e-8)
          << "B=" << b;
    }
  }
}

TEST(ContrastiveLoss, ScaleAndPermutationInvariant) {
  Rng rng(8);
  const T x = random_tensor(rng, {5, 8}), y = random_tensor(rng, {5, 8});
  const double base = contrastive_loss<double>(x, y, 0.1).item();
  const T xs = T::from_matrix(x.value() * 3.7, false), ys = T::from_matrix(y.value() * 3.7, false);
  EXPECT_NEAR(contrastive_loss<double>(xs, ys, 0.1).item(), base, 1e-12);

  const std::vector<Index> perm{3, 0, 4, 1, 2};
  const T xp = embedding_lookup(x, std::span<const Index>(perm)), yp = embedding_lookup(y, std::span<const Index>(perm));
  EXPECT_NEAR(contrastive_loss<double>(xp, yp, 0.1).item(), base, 1e-12);
  EXPECT_THROW(contrastive_loss<double>(random_tensor(rng, {1, 8}), random_tensor(rng, {1, 8}), 0.1), UsageError);
}

TEST(Losses, PermutationInvariantOverSentences) {
  Rng rng(9);
  const Disc d = Disc::initialize(8, 8, 3);
  std::vector<T> hidden;
  std::vector<std::vector<Index>> positions{{0, 1}, {2}, {0, 1, 2}}, labels{{0, 1}, {1}, {1, 0, 0}};
  for (int s = 0; s < 3; ++s) hidden.push_back(random_tensor(rng, {3, 8}));
  const double at = adversarial_loss<double>(hidden, positions, labels, d).item();
  std::vector<T> hp{hidden[2], hidden[0], hidden[1]};
  std::vector<std::vector<Index>> pp{positions[2], positions[0], positions[1]}, lp{labels[2], labels[0], labels[1]};
  EXPECT_NEAR(adversarial_loss<double>(hp, pp, lp, d).item(), at, 1e-12);

  const T h = random_tensor(rng, {3, 8}), hh = random_tensor(rng, {3, 8});
  const bool use[] = {true, false, true};
  const double isf = isf_loss<double>(h, hh, use, d).item();
  const std::vector<Index> perm{2, 0, 1};
  const bool use_p[] = {true, true, false};
  EXPECT_NEAR(isf_loss<double>(embedding_lookup(h, std::span<const Index>(perm)),
                               embedding_lookup(hh, std::span<const Index>(perm)), use_p, d)
                  .item(),
              isf, 1e-12);
}

TEST(TotalLoss, WeightsAndPhases) {
  Rng rng(10);
  LossComponents<double> parts{T::scalar(rng.uniform() * 3), T::scalar(rng.uniform() * 3), T::scalar(rng.uniform() * 3)};
  const double at = parts.adversarial->item(), isf = parts.filtering->item(), r = parts.contrastive.item();
  EXPECT_NEAR(total_loss(parts, {0.3, 0.7, 0.1}, Phase::kMain).item(), 0.3 * at + 0.7 * isf + r, 1e-12);
  EXPECT_EQ(total_loss(parts, {0.0, 0.0, 0.1}, Phase::kMain).item(), r);
  EXPECT_EQ(total_loss(parts, {}, Phase::kWarmup).item(), r);
  LossWeights defaults;
  EXPECT_EQ(defaults.alpha, 1.0);
  EXPECT_EQ(defaults.beta, 1.0);
  EXPECT_THROW((LossWeights{-1.0, 1.0, 0.1}).validate(), UsageError);
  EXPECT_THROW((LossWeights{1.0, 1.0, 0.0}).validate(), UsageError);
}

// Encoder-side gradient of L_AT is the exact negation of the plain CE
// gradient; the discriminator sees the same gradient either way.
TEST(AdversarialLoss, GradientReversalContract) {
  Rng rng(11);
  const Disc d = Disc::initialize(8, 8, 4);
  const std::vector<T> hidden{random_tensor(rng, {4, 8}), random_tensor(rng, {3, 8})};
  const std::vector<std::vector<Index>> positions{{0, 1, 3}, {1, 2}}, labels{{1, 0, 1}, {0, 1}};
  auto grads = [&](GradientPath path) {
    for (const auto& t : hidden) T(t).zero_grad();
    for (auto& [n, p] : d.named_parameters("d")) T(p).zero_grad();
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(adversarial_loss<double>(hidden, positions, labels, d, path));
    std::vector<Mat> out;
    for (const auto& t : hidden) out.push_back(t.grad());
    for (auto& [n, p] : d.named_parameters("d")) out.push_back(p.grad());
    return out;
  };
  const auto reversed = grads(GradientPath::kReversed);
  const auto plain = grads(GradientPath::kPlain);
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    EXPECT_GT(plain[i].norm(), 0.0);
    EXPECT_LT((reversed[i] + plain[i]).cwiseAbs().maxCoeff(), 1e-12);
  }
  for (std::size_t i = hidden.size(); i < plain.size(); ++i) EXPECT_EQ(reversed[i], plain[i]);
}

TEST(AdversarialLoss, DiscriminatorStepDecreasesLoss) {
  Rng rng(12);
  Disc d = Disc::initialize(8, 8, 5);
  const std::vector<T> hidden{random_tensor(rng, {5, 8}, -2, 2, false)};
  const std::vector<std::vector<Index>> positions{{0, 1, 2, 3, 4}}, labels{{0, 1, 1, 0, 1}};
  for (auto& [n, p] : d.named_parameters("d")) T(p).zero_grad();
  double before = 0.0;
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    const T loss = adversarial_loss<double>(hidden, positions, labels, d);
    before = loss.item();
    tape.backward(loss);
  }
  for (auto& [n, p] : d.named_parameters("d")) {
    T t = p;
    t.mutable_value() -= 1e-3 * t.grad();
  }
  EXPECT_LT(adversarial_loss<double>(hidden, positions, labels, d).item(), before);
}

class LossGradient : public ::testing::Test {
 protected:
  Rng rng{13};
  Disc d = Disc::initialize(8, 8, 6);
  std::vector<T> disc_params() {
    std::vector<T> out;
    for (auto& [n, p] : d.named_parameters("d")) out.push_back(p);
    return out;
  }
};

TEST_F(LossGradient, Adversarial) {
  const std::vector<T> hidden{random_tensor(rng, {4, 8}), random_tensor(rng, {4, 8}), random_tensor(rng, {4, 8})};
  const std::vector<std::vector<Index>> positions{{0, 2}, {1, 2, 3}, {3}}, labels{{1, 0}, {0, 0, 1}, {1}};
  auto inputs = disc_params();
  inputs.insert(inputs.end(), hidden.begin(), hidden.end());
  // Plain path: finite differences see the forward function, which grl leaves unchanged.
  const auto r = grad_check([&] { return adversarial_loss<double>(hidden, positions, labels, d, GradientPath::kPlain); }, inputs);
  EXPECT_LT(r.worst_relative_error, 1e-4) << r.worst_input;
  const auto rd = grad_check([&] { return adversarial_loss<double>(hidden, positions, labels, d); }, disc_params());
  EXPECT_LT(rd.worst_relative_error, 1e-4) << rd.worst_input;
}

TEST_F(LossGradient, Filtering) {
  const T h = random_tensor(rng, {3, 8}), hh = random_tensor(rng, {3, 8});
  const bool use[] = {true, false, true};
  auto inputs = disc_params();
  inputs.push_back(h);
  inputs.push_back(hh);
  const auto r = grad_check([&] { return isf_loss<double>(h, hh, use, d); }, inputs);
  EXPECT_LT(r.worst_relative_error, 1e-4) << r.worst_input;
}

TEST_F(LossGradient, Contrastive) {
  const T a = random_tensor(rng, {3, 8}), b = random_tensor(rng, {3, 8});
  for (bool include : {false, true}) {
    const auto r = grad_check([&] { return contrastive_loss<double>(a, b, 0.1, {include}); }, {a, b});
    EXPECT_LT(r.worst_relative_error, 1e-4) << r.worst_input;
  }
}

}  // namespace
}  // namespace freqtune::test
