#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <set>
#include <sstream>

#include "freqtune/diagnostics.hpp"
#include "freqtune/error.hpp"
#include "freqtune/random.hpp"

namespace freqtune::test {
namespace {

RealMatrix gaussian(Rng& rng, Index rows, Index cols) {
  RealMatrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

std::vector<std::string> split(const std::string& line, char sep = '\t') {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, sep)) out.push_back(field);
  return out;
}

TEST(Cosine, IdenticalOrthonormalAndScaled) {
  RealMatrix same(6, 5);
  same.rowwise() = Eigen::RowVectorXd::LinSpaced(5, 1.0, 3.0);
  EXPECT_NEAR(mean_pairwise_cosine(same, 1000, 1), 1.0, 1e-12);

  Rng rng(31);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(gaussian(rng, 8, 8)).householderQ();
  const RealMatrix ortho = q;
  EXPECT_NEAR(mean_pairwise_cosine(ortho, 1000, 1), 0.0, 1e-12);

  const RealMatrix x = gaussian(rng, 300, 6);
  for (Index pairs : {Index{100000}, Index{500}}) {
    const double base = mean_pairwise_cosine(x, pairs, 4);
    EXPECT_NEAR(mean_pairwise_cosine(RealMatrix(3.5 * x), pairs, 4), base, 1e-12);
    EXPECT_EQ(mean_pairwise_cosine(x, pairs, 4), base);
    EXPECT_GE(base, -1.0);
    EXPECT_LE(base, 1.0);
  }
}

TEST(Cosine, Errors) {
  EXPECT_THROW(mean_pairwise_cosine(RealMatrix::Ones(1, 3), 10, 0), UsageError);
  RealMatrix zero = RealMatrix::Ones(3, 3);
  zero.row(1).setZero();
  EXPECT_THROW(mean_pairwise_cosine(zero, 10, 0), NumericError);
}

// Rows of type t carry label t % 2 and sit on the side of the first axis
// given by their label, with a clear margin.
struct Labelled {
  RealMatrix x;
  std::vector<int> labels;
  std::vector<TokenId> groups;
};

Labelled labelled_points(Rng& rng, Index types, Index per_type, Index dim, bool separable) {
  Labelled d;
  d.x = gaussian(rng, types * per_type, dim);
  for (Index t = 0; t < types; ++t) {
    for (Index k = 0; k < per_type; ++k) {
      const int label = static_cast<int>(t % 2);
      const Index row = t * per_type + k;
      if (separable) d.x(row, 0) = (label ? 1.0 : -1.0) * (2.0 + rng.uniform());
      d.labels.push_back(label);
      d.groups.push_back(static_cast<TokenId>(t + special::kCount));
    }
  }
  return d;
}

TEST(Probe, SeparableFixtureReachesPerfectHeldOutAccuracy) {
  Rng rng(32);
  const auto d = labelled_points(rng, 80, 3, 8, true);
  const auto r = train_probe(d.x, d.labels, d.groups, {});
  EXPECT_EQ(r.held_out_accuracy, 1.0);
  EXPECT_EQ(r.train_accuracy, 1.0);
  EXPECT_GT(r.held_out_size, 0);
  EXPECT_EQ(r.train_size + r.held_out_size, 240);
}

TEST(Probe, NoiseStaysNearChance) {
  double total = 0.0;
  const int repeats = 8;
  for (int s = 0; s < repeats; ++s) {
    Rng rng(static_cast<std::uint64_t>(100 + s));
    const auto d = labelled_points(rng, 300, 2, 16, false);
    ProbeOptions o;
    o.seed = static_cast<std::uint64_t>(s);
    const auto r = train_probe(d.x, d.labels, d.groups, o);
    EXPECT_GE(r.held_out_accuracy, 0.0);
    EXPECT_LE(r.held_out_accuracy, 1.0);
    total += r.held_out_accuracy;
  }
  EXPECT_NEAR(total / repeats, 0.5, 0.06);
}

TEST(Probe, HeldOutTypesAreUnseen) {
  Rng rng(33);
  const auto d = labelled_points(rng, 40, 4, 4, true);
  // Every occurrence of a type lands on one side, so sizes are multiples of 4
  // before class balancing; with balanced classes both sides stay even.
  const auto r = train_probe(d.x, d.labels, d.groups, {});
  EXPECT_EQ(r.train_size % 2, 0);
  EXPECT_EQ(r.held_out_size % 2, 0);
  const std::vector<int> one_class(d.labels.size(), 1);
  EXPECT_THROW(train_probe(d.x, one_class, d.groups, {}), UsageError);
}

TEST(Report, BandStatisticsOnSyntheticSample) {
  Rng rng(34);
  const auto d = labelled_points(rng, 60, 3, 6, true);
  TokenSample sample{d.x, d.groups, d.labels, 10};
  DiagnosticsOptions o;
  o.probe_repeats = 2;
  const auto report = anisotropy_report(sample, o);
  EXPECT_EQ(report.tokens, 180);
  EXPECT_EQ(report.high_tokens, 90);
  EXPECT_EQ(report.low_tokens, 90);
  EXPECT_EQ(report.sentences, 10);
  for (double c : {report.mean_pairwise_cosine, report.within_high_cosine, report.within_low_cosine,
                   report.cross_band_cosine}) {
    EXPECT_GE(c, -1.0);
    EXPECT_LE(c, 1.0);
  }
  // The two bands sit on opposite sides of the first axis.
  EXPECT_LT(report.cross_band_cosine, report.within_high_cosine);
  EXPECT_GT(report.cross_band_gap(), 0.0);
  EXPECT_EQ(report.probe_accuracy, 1.0);

  std::ostringstream out;
  write_diagnostics(out, report);
  EXPECT_NE(out.str().find("probe_accuracy\t1\n"), std::string::npos) << out.str();
  EXPECT_NE(out.str().find("mean_pairwise_cosine\t"), std::string::npos);
}

TEST(Collect, ContentTokensOnlyCappedPerType) {
  Vocabulary vocab;
  for (const char* w : {"x", "y", "z"}) vocab.add(w);
  const FrequencyTable labels = FrequencyTable::from_labels(vocab, {{"x", 0}, {"y", 1}, {"z", 1}});
  EncoderConfig c;
  c.vocab_size = vocab.size();
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.ffn_dim = 16;
  c.max_len = 10;
  const auto params = EncoderParams::initialize(c, 3);
  std::vector<std::vector<TokenId>> corpus;
  for (int i = 0; i < 20; ++i) corpus.push_back(vocab.encode(i % 2 ? "x y x z" : "x x [unk] y"));
  const auto a = collect_token_embeddings(params, corpus, labels, 12, 5, 8);
  const auto b = collect_token_embeddings(params, corpus, labels, 12, 5, 8);
  EXPECT_EQ(a.embeddings, b.embeddings);
  EXPECT_EQ(a.sentences, 12);
  std::map<TokenId, int> per_type;
  for (std::size_t i = 0; i < a.ids.size(); ++i) {
    EXPECT_FALSE(is_special(a.ids[i]));
    EXPECT_EQ(a.labels[i], labels.label(a.ids[i]));
    ++per_type[a.ids[i]];
  }
  for (const auto& [id, n] : per_type) EXPECT_LE(n, 5);
  EXPECT_EQ(a.embeddings.rows(), static_cast<Index>(a.ids.size()));
}

TEST(Export, LayoutAndDeterminism) {
  Rng rng(35);
  const RealMatrix x = gaussian(rng, 3, 4);
  const std::vector<ExportRow> rows{{"token:a", "0"}, {"token:b", "1"}, {"sentence:0", "NA"}};
  std::ostringstream plain;
  export_embeddings(plain, x, rows, false);
  std::stringstream in(plain.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "id\tlabel\tdim_0\tdim_1\tdim_2\tdim_3");
  int data_rows = 0;
  while (std::getline(in, line)) {
    const auto fields = split(line);
    ASSERT_EQ(fields.size(), 6u);
    EXPECT_EQ(fields[0], rows[static_cast<std::size_t>(data_rows)].id);
    EXPECT_EQ(std::stod(fields[2]), x(data_rows, 0));
    ++data_rows;
  }
  EXPECT_EQ(data_rows, 3);

  std::ostringstream p1, p2;
  export_embeddings(p1, x, rows, true, 5);
  export_embeddings(p2, x, rows, true, 5);
  EXPECT_EQ(p1.str(), p2.str());
  EXPECT_EQ(split(p1.str().substr(0, p1.str().find('\n'))).size(), 8u);
  EXPECT_THROW(export_embeddings(p1, x, std::span<const ExportRow>(rows).first(2), false), ShapeError);
}

TEST(Projection, RankTwoPointsKeepTheirDistances) {
  Rng rng(36);
  const RealMatrix coords = gaussian(rng, 40, 2), basis = gaussian(rng, 2, 7);
  RealMatrix points = coords * basis;
  points.rowwise() += gaussian(rng, 1, 7).row(0);
  const RealMatrix proj = principal_projection(points, 2, 500, 1);
  double worst = 0.0;
  for (Index i = 0; i < points.rows(); ++i)
    for (Index j = i + 1; j < points.rows(); ++j)
      worst = std::max(worst, std::abs((points.row(i) - points.row(j)).norm() - (proj.row(i) - proj.row(j)).norm()));
  EXPECT_LT(worst, 1e-6);
}

TEST(Projection, MatchesDenseEigensolver) {
  Rng rng(37);
  RealMatrix points = gaussian(rng, 200, 6);
  for (Index c = 0; c < 6; ++c) points.col(c) *= 1.0 + 1.5 * static_cast<double>(c);  // distinct variances
  const RealMatrix proj = principal_projection(points, 2, 500, 2);

  const RealMatrix centred = points.rowwise() - points.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(centred.transpose() * centred);
  for (Index k = 0; k < 2; ++k) {
    Eigen::VectorXd col = centred * eig.eigenvectors().col(5 - k);
    Index arg = 0;
    col.cwiseAbs().maxCoeff(&arg);
    if (col(arg) < 0) col = -col;
    EXPECT_LT((proj.col(k) - col).cwiseAbs().maxCoeff(), 1e-8) << "component " << k;
  }
}

}  // namespace
}  // namespace freqtune::test
