#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "freqtune/ops.hpp"
#include "freqtune/tensor.hpp"
#include "support/gradcheck.hpp"

namespace freqtune::test {
namespace {

constexpr double kFdTolerance = 1e-4;

T row(std::vector<double> v, bool rg = false) {
  const auto n = static_cast<Index>(v.size());
  return T::from_values({n}, v, rg);
}

TEST(TensorCore, ShapeInvariant) {
  T t = T::zeros({2, 3, 4});
  EXPECT_EQ(t.numel(), 24);
  EXPECT_EQ(t.rows(), 6);
  EXPECT_EQ(t.cols(), 4);
  EXPECT_THROW(T::from_values({2, 2}, {1.0, 2.0, 3.0}), ShapeError);
}

TEST(TensorCore, ReluSignCases) {
  T y = relu(row({-1.0, 0.0, 2.0}));
  EXPECT_EQ(y.data(), (std::vector<double>{0.0, 0.0, 2.0}));
}

TEST(TensorCore, SoftmaxSymmetric) {
  T y = softmax(row({0.0, 0.0}));
  EXPECT_DOUBLE_EQ(y.value()(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(y.value()(0, 1), 0.5);
}

TEST(TensorCore, SoftmaxRowsSumToOne) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    T x = random_tensor(rng, {5, 7}, -30.0, 30.0, false);
    T y = softmax(x);
    for (Index r = 0; r < y.rows(); ++r) EXPECT_NEAR(y.value().row(r).sum(), 1.0, 1e-12);
  }
}

TEST(TensorCore, MaskedSoftmaxZeroesMaskedColumns) {
  Mask keep(1, 4);
  keep << true, false, true, false;
  T y = softmax(row({3.0, 100.0, -1.0, 7.0}), &keep);
  EXPECT_EQ(y.value()(0, 1), 0.0);
  EXPECT_EQ(y.value()(0, 3), 0.0);
  EXPECT_NEAR(y.value().sum(), 1.0, 1e-12);
  Mask none = Mask::Constant(1, 4, false);
  EXPECT_THROW(softmax(row({1.0, 2.0, 3.0, 4.0}), &none), NumericError);
}

TEST(TensorCore, MatmulMatchesNaiveTripleLoop) {
  Rng rng(2);
  T a = random_tensor(rng, {2, 3}, -2, 2, false);
  T b = random_tensor(rng, {3, 4}, -2, 2, false);
  T c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 4}));
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (Index k = 0; k < 3; ++k) acc += a.value()(i, k) * b.value()(k, j);
      EXPECT_NEAR(c.value()(i, j), acc, 1e-14);
    }
}

TEST(TensorCore, ShapeErrorsNameOpAndDims) {
  T a = T::zeros({2, 3});
  T b = T::zeros({4, 4});
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x4]"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(multiply(a, T::zeros({2})), ShapeError);
  EXPECT_THROW(slice(a, 1, 2, 5), ShapeError);
  EXPECT_THROW(concat<double>({a, b}, 0), ShapeError);
}

TEST(TensorCore, StrictModeRejectsNonFinite) {
  T x = row({1.0, std::numeric_limits<double>::quiet_NaN()});
  set_strict_numerics(true);
  EXPECT_THROW(relu(x), NumericError);
  set_strict_numerics(false);
  EXPECT_NO_THROW(relu(x));
  set_strict_numerics(true);
}

TEST(Backward, LinearSum) {
  T x = row({1.0, 2.0, 3.0}, true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.backward(sum(x));
  EXPECT_EQ(std::vector<double>(x.grad().data(), x.grad().data() + 3),
            (std::vector<double>{1.0, 1.0, 1.0}));
}

TEST(Backward, Quadratic) {
  T x = row({1.0, 2.0, 3.0}, true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  T loss = sum(multiply(x, x));
  tape.backward(loss);
  EXPECT_EQ(std::vector<double>(x.grad().data(), x.grad().data() + 3),
            (std::vector<double>{2.0, 4.0, 6.0}));
  EXPECT_EQ(loss.grad()(0, 0), 1.0);
}

TEST(Backward, Errors) {
  T x = row({1.0, 2.0}, true);
  Tape<double> tape;
  EXPECT_THROW(tape.backward(sum(x)), UsageError);  // empty tape: nothing recorded
  Tape<double>::Scope scope(tape);
  T y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), UsageError);  // not scalar
  T loss = sum(y);
  tape.backward(loss);
  EXPECT_THROW(tape.backward(loss), UsageError);  // consumed
  tape.clear();
  EXPECT_TRUE(tape.empty());
  x.zero_grad();
  T again = sum(scale(x, 3.0));
  tape.backward(again);
  EXPECT_DOUBLE_EQ(x.grad()(0, 0), 3.0);  // no state leaked from the first pass
}

TEST(Backward, EveryReachableTensorHasGrad) {
  Rng rng(3);
  T a = random_tensor(rng, {3, 4});
  T b = random_tensor(rng, {4, 2});
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  T h = matmul(a, b);
  T r = relu(h);
  T loss = mean(r);
  tape.backward(loss);
  for (const T* t : {&a, &b, &h, &r, &loss}) EXPECT_TRUE(t->has_grad());
  for (const auto& e : tape.entries()) EXPECT_TRUE(e.output->has_grad()) << e.op;
}

TEST(Backward, NoRecordingWithoutTape) {
  T x = row({1.0, 2.0}, true);
  T y = scale(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

// --- finite-difference checks, one per primitive ---------------------------

class PrimitiveGradient : public ::testing::Test {
 protected:
  Rng rng{42};
  void expect_fd(const std::function<T()>& f, std::vector<T> inputs) {
    const auto r = grad_check(f, std::move(inputs));
    EXPECT_LT(r.worst_relative_error, kFdTolerance) << r.worst_input;
  }
};

TEST_F(PrimitiveGradient, Matmul) {
  T a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {4, 2});
  expect_fd([&] { return weighted_sum(matmul(a, b)); }, {a, b});
}

TEST_F(PrimitiveGradient, Transpose) {
  T a = random_tensor(rng, {3, 4});
  expect_fd([&] { return weighted_sum(transpose(a)); }, {a});
}

TEST_F(PrimitiveGradient, AddAndBroadcast) {
  T a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), c = random_tensor(rng, {4});
  expect_fd([&] { return weighted_sum(add(add(a, b), c)); }, {a, b, c});
}

TEST_F(PrimitiveGradient, MultiplyAndBroadcast) {
  T a = random_tensor(rng, {3, 4}), b = random_tensor(rng, {3, 4}), c = random_tensor(rng, {1, 4});
  expect_fd([&] { return weighted_sum(multiply(multiply(a, b), c)); }, {a, b, c});
}

TEST_F(PrimitiveGradient, Relu) {
  T a = random_tensor(rng, {4, 5});
  expect_fd([&] { return weighted_sum(relu(a)); }, {a});
}

TEST_F(PrimitiveGradient, Softmax) {
  T a = random_tensor(rng, {3, 5});
  expect_fd([&] { return weighted_sum(softmax(a)); }, {a});
  Mask keep(1, 5);
  keep << true, true, false, true, false;
  expect_fd([&] { return weighted_sum(softmax(a, &keep)); }, {a});
}

TEST_F(PrimitiveGradient, LayerNorm) {
  T a = random_tensor(rng, {3, 6}), g = random_tensor(rng, {6}), b = random_tensor(rng, {6});
  expect_fd([&] { return weighted_sum(layer_norm(a, g, b)); }, {a, g, b});
}

TEST_F(PrimitiveGradient, Dropout) {
  T a = random_tensor(rng, {4, 6});
  expect_fd([&] { return weighted_sum(dropout(a, 0.3, 7, true)); }, {a});
}

TEST_F(PrimitiveGradient, EmbeddingLookup) {
  T table = random_tensor(rng, {6, 3});
  const std::vector<Index> ids{4, 0, 4, 2};
  expect_fd([&] { return weighted_sum(embedding_lookup(table, ids)); }, {table});
}

TEST_F(PrimitiveGradient, ConcatBothAxes) {
  T a = random_tensor(rng, {2, 3}), b = random_tensor(rng, {1, 3}), c = random_tensor(rng, {3, 2});
  expect_fd([&] { return weighted_sum(concat<double>({a, b}, 0)); }, {a, b});
  expect_fd([&] { return weighted_sum(concat<double>({transpose(a), c}, 1)); }, {a, c});
}

TEST_F(PrimitiveGradient, Slice) {
  T a = random_tensor(rng, {4, 5});
  expect_fd([&] { return weighted_sum(slice(slice(a, 0, 1, 3), 1, 2, 5)); }, {a});
}

TEST_F(PrimitiveGradient, MeanAndMeanRows) {
  T a = random_tensor(rng, {4, 3});
  const std::vector<Index> rows{0, 2, 3};
  expect_fd([&] { return mean(multiply(a, a)); }, {a});
  expect_fd([&] { return weighted_sum(mean_rows(a, rows)); }, {a});
}

TEST_F(PrimitiveGradient, ScaleAndSum) {
  T a = random_tensor(rng, {2, 3});
  expect_fd([&] { return sum(multiply(scale(a, -1.7), a)); }, {a});
}

TEST_F(PrimitiveGradient, Reshape) {
  T a = random_tensor(rng, {2, 6});
  expect_fd([&] { return weighted_sum(reshape(a, {3, 4})); }, {a});
}

TEST_F(PrimitiveGradient, Grl) {
  T a = random_tensor(rng, {2, 3});
  expect_fd([&] { return weighted_sum(grl(grl(a))); }, {a});
}

TEST_F(PrimitiveGradient, CosineSimilarity) {
  T a = random_tensor(rng, {5}), b = random_tensor(rng, {5});
  expect_fd([&] { return cosine_similarity(a, b); }, {a, b});
}

TEST_F(PrimitiveGradient, NormalizeRows) {
  T a = random_tensor(rng, {3, 4});
  expect_fd([&] { return weighted_sum(normalize_rows(a)); }, {a});
}

TEST_F(PrimitiveGradient, CrossEntropy) {
  T a = random_tensor(rng, {3});
  expect_fd([&] { return cross_entropy(a, 2); }, {a});
  T m = random_tensor(rng, {4, 3});
  const std::vector<Index> labels{0, 2, 1, 1};
  expect_fd([&] { return weighted_sum(cross_entropy_rows(m, labels)); }, {m});
}

TEST_F(PrimitiveGradient, LogSumExpAndPick) {
  T a = random_tensor(rng, {3, 4});
  Mask keep(3, 4);
  keep << true, false, true, true, false, true, true, false, true, true, true, true;
  const std::vector<Index> cols{1, 3, 0};
  expect_fd([&] { return weighted_sum(logsumexp_rows(a, &keep)); }, {a});
  expect_fd([&] { return weighted_sum(pick(a, cols)); }, {a});
}

TEST_F(PrimitiveGradient, ThreeOpChainsAgainstEndToEndDifferences) {
  for (int trial = 0; trial < 10; ++trial) {
    T x = random_tensor(rng, {3, 4}), w = random_tensor(rng, {4, 4}), g = random_tensor(rng, {4}),
      b = random_tensor(rng, {4});
    expect_fd([&] { return weighted_sum(softmax(layer_norm(matmul(x, w), g, b))); }, {x, w, g, b});
    expect_fd([&] { return mean(relu(add(matmul(x, w), b))); }, {x, w, b});
  }
}

// --- gradient reversal --------------------------------------------------------

TEST(GradientReversal, ForwardIsBitwiseIdentity) {
  T x = row({1.5, -2.0}, true);
  T y = grl(x);
  EXPECT_EQ(y.value(), x.value());
}

TEST(GradientReversal, BackwardNegatesUpstream) {
  T x = row({1.5, -2.0}, true);
  T upstream = row({3.0, -1.0});
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  tape.backward(sum(multiply(grl(x), upstream)));
  EXPECT_EQ(x.grad()(0, 0), -3.0);
  EXPECT_EQ(x.grad()(0, 1), 1.0);
}

TEST(GradientReversal, DoubleReversalIsPlainIdentity) {
  Rng rng(5);
  T x = random_tensor(rng, {2, 3});
  T w = probe_weights(x, 11);
  Mat plain, twice;
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(sum(multiply(x, w)));
    plain = x.grad();
  }
  x.zero_grad();
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    tape.backward(sum(multiply(grl(grl(x)), w)));
    twice = x.grad();
  }
  EXPECT_EQ(plain, twice);
}

// --- cosine similarity and cross-entropy examples -----------------------------

TEST(CosineSimilarity, Examples) {
  EXPECT_DOUBLE_EQ(cosine_similarity(row({1, 2}), row({1, 2})).item(), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(row({1, 0}), row({0, 1})).item(), 0.0);
  EXPECT_NEAR(cosine_similarity(row({1, 1}), row({1, 0})).item(), 1.0 / std::numbers::sqrt2, 1e-15);
  EXPECT_THROW(cosine_similarity(row({0, 0}), row({1, 0})), NumericError);
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(row({20.0, -20.0}), 0).item(), 0.0, 1e-8);
  EXPECT_NEAR(cross_entropy(row({0.0, 0.0}), 1).item(), std::numbers::ln2, 1e-12);
  EXPECT_NEAR(cross_entropy(row({1.0, 2.0}), 0).item(), 1.31326168751822283, 1e-12);
  EXPECT_THROW(cross_entropy(row({1.0, 2.0}), 2), UsageError);
  EXPECT_THROW(cross_entropy(row({1.0}), 0), ShapeError);
}

TEST(CrossEntropy, NonNegative) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    T x = random_tensor(rng, {4}, -50, 50, false);
    EXPECT_GE(cross_entropy(x, static_cast<Index>(rng.below(4))).item(), 0.0);
  }
}

}  // namespace
}  // namespace freqtune::test
