#include "freqtune/diagnostics.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>

#include "freqtune/augment.hpp"
#include "freqtune/config.hpp"
#include "freqtune/error.hpp"
#include "freqtune/objectives.hpp"
#include "freqtune/random.hpp"

namespace freqtune {

namespace {

RealMatrix unit_rows(const RealMatrix& m) {
  RealMatrix out = m;
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    if (n == 0.0) throw NumericError("cosine of a zero-norm embedding (row " + std::to_string(i) + ")");
    out.row(i) /= n;
  }
  return out;
}

}  // namespace

double mean_pairwise_cosine(const RealMatrix& points, Index max_pairs, std::uint64_t seed) {
  const Index n = points.rows();
  if (n < 2) throw UsageError("mean_pairwise_cosine: need at least 2 embeddings, got " + std::to_string(n));
  const RealMatrix u = unit_rows(points);
  const double total = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
  double acc = 0.0;
  if (total <= static_cast<double>(max_pairs)) {
    for (Index i = 0; i < n; ++i)
      for (Index j = i + 1; j < n; ++j) acc += u.row(i).dot(u.row(j));
    return acc / total;
  }
  Rng rng(seed);
  for (Index k = 0; k < max_pairs; ++k) {
    const auto i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n - 1)));
    if (j >= i) ++j;
    acc += u.row(i).dot(u.row(j));
  }
  return acc / static_cast<double>(max_pairs);
}

double mean_cross_cosine(const RealMatrix& a, const RealMatrix& b, Index max_pairs, std::uint64_t seed) {
  if (a.rows() == 0 || b.rows() == 0) throw UsageError("mean_cross_cosine: empty set");
  const RealMatrix ua = unit_rows(a), ub = unit_rows(b);
  const double total = static_cast<double>(a.rows()) * static_cast<double>(b.rows());
  if (total <= static_cast<double>(max_pairs)) return (ua * ub.transpose()).sum() / total;
  Rng rng(seed);
  double acc = 0.0;
  for (Index k = 0; k < max_pairs; ++k) {
    const auto i = static_cast<Index>(rng.below(static_cast<std::uint64_t>(a.rows())));
    const auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(b.rows())));
    acc += ua.row(i).dot(ub.row(j));
  }
  return acc / static_cast<double>(max_pairs);
}

TokenSample collect_token_embeddings(const EncoderParams& params, std::span<const std::vector<TokenId>> corpus,
                                     const FrequencyTable& labels, Index sample_sentences, Index max_per_type,
                                     std::uint64_t seed) {
  if (corpus.empty()) throw UsageError("empty sample");
  if (sample_sentences < 1) throw UsageError("sample size must be >= 1");
  auto picked = sample_without_replacement(static_cast<Index>(corpus.size()), sample_sentences, seed);
  std::sort(picked.begin(), picked.end());

  std::map<TokenId, Index> seen;
  std::vector<RealMatrix> rows;
  TokenSample sample;
  sample.sentences = static_cast<Index>(picked.size());
  for (Index s : picked) {
    const std::vector<std::vector<TokenId>> one{corpus[static_cast<std::size_t>(s)]};
    const auto encoded = encode(one, params, EncodeOptions{});
    const RealMatrix& hidden = encoded.hidden[0].value();
    for (Index p : encoded.content_positions(0)) {
      const TokenId id = encoded.ids[0][static_cast<std::size_t>(p)];
      if (is_special(id)) continue;
      if (max_per_type > 0 && seen[id]++ >= max_per_type) continue;
      rows.push_back(hidden.row(p));
      sample.ids.push_back(id);
      sample.labels.push_back(labels.label(id));
    }
  }
  sample.embeddings.resize(static_cast<Index>(rows.size()), params.config.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) sample.embeddings.row(static_cast<Index>(i)) = rows[i];
  return sample;
}

namespace {

std::vector<Index> balanced(const std::vector<Index>& zeros, const std::vector<Index>& ones, std::uint64_t seed) {
  const std::size_t k = std::min(zeros.size(), ones.size());
  std::vector<Index> out;
  for (const auto* cls : {&zeros, &ones}) {
    for (Index c : sample_without_replacement(static_cast<Index>(cls->size()), static_cast<Index>(k),
                                              derive_seed({seed, cls == &zeros ? 0u : 1u})))
      out.push_back((*cls)[static_cast<std::size_t>(c)]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

RealMatrix gather(const RealMatrix& x, const std::vector<Index>& rows) {
  RealMatrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
  return out;
}

double accuracy(const Discriminator<Real>& probe, const RealMatrix& x, const std::vector<Index>& y) {
  const RealMatrix logits = probe(RealTensor::from_matrix(x, false)).value();
  Index correct = 0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const Index predicted = logits(i, 1) > logits(i, 0) ? 1 : 0;
    if (predicted == y[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

}  // namespace

ProbeResult train_probe(const RealMatrix& x, std::span<const int> labels, std::span<const TokenId> groups,
                        const ProbeOptions& options) {
  if (static_cast<Index>(labels.size()) != x.rows() || static_cast<Index>(groups.size()) != x.rows())
    throw ShapeError("train_probe: " + std::to_string(x.rows()) + " rows, " + std::to_string(labels.size()) +
                     " labels, " + std::to_string(groups.size()) + " groups");
  if (!(options.held_out_fraction > 0.0 && options.held_out_fraction < 1.0))
    throw UsageError("probe held-out fraction must be in (0, 1)");

  // Split token types of each class.
  std::set<TokenId> held_out_types;
  for (int cls : {0, 1}) {
    std::set<TokenId> types;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] == cls) types.insert(groups[i]);
    if (types.size() < 2)
      throw UsageError("probe: class " + std::to_string(cls) + " has " + std::to_string(types.size()) +
                       " token types, need at least 2");
    std::vector<TokenId> ordered(types.begin(), types.end());
    const auto k = std::clamp<Index>(
        static_cast<Index>(std::lround(options.held_out_fraction * static_cast<double>(ordered.size()))), 1,
        static_cast<Index>(ordered.size()) - 1);
    for (Index c : sample_without_replacement(static_cast<Index>(ordered.size()), k,
                                              derive_seed({options.seed, 0x73706c69, static_cast<std::uint64_t>(cls)})))
      held_out_types.insert(ordered[static_cast<std::size_t>(c)]);
  }
  std::vector<Index> train[2], test[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int cls = labels[i];
    if (cls != 0 && cls != 1) throw UsageError("probe: labels must be 0 or 1");
    (held_out_types.count(groups[i]) ? test : train)[cls].push_back(static_cast<Index>(i));
  }
  const auto train_rows = balanced(train[0], train[1], derive_seed({options.seed, 1}));
  const auto test_rows = balanced(test[0], test[1], derive_seed({options.seed, 2}));
  std::vector<Index> y_train, y_test;
  for (Index r : train_rows) y_train.push_back(labels[static_cast<std::size_t>(r)]);
  for (Index r : test_rows) y_test.push_back(labels[static_cast<std::size_t>(r)]);
  const RealMatrix x_train = gather(x, train_rows), x_test = gather(x, test_rows);

  const Index hidden = options.hidden > 0 ? options.hidden : x.cols();
  auto probe = Discriminator<Real>::initialize(x.cols(), hidden, derive_seed({options.seed, 3}));
  const auto params = probe.named_parameters("probe");
  std::vector<RealMatrix> m1, m2;
  for (const auto& [name, t] : params) {
    m1.push_back(RealMatrix::Zero(t.rows(), t.cols()));
    m2.push_back(RealMatrix::Zero(t.rows(), t.cols()));
  }
  const RealTensor inputs = RealTensor::from_matrix(x_train, false);
  const double b1 = 0.9, b2 = 0.999;
  for (Index epoch = 0; epoch < options.epochs; ++epoch) {
    for (const auto& [name, t] : params) RealTensor(t).zero_grad();
    Tape<Real> tape;
    Tape<Real>::Scope scope(tape);
    const RealTensor loss = mean(cross_entropy_rows(probe(inputs), std::span<const Index>(y_train)));
    tape.backward(loss);
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(epoch + 1));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(epoch + 1));
    for (std::size_t k = 0; k < params.size(); ++k) {
      RealTensor t = params[k].second;
      const RealMatrix& g = t.grad();
      m1[k] = b1 * m1[k] + (1.0 - b1) * g;
      m2[k] = b2 * m2[k] + (1.0 - b2) * g.cwiseAbs2();
      t.mutable_value().array() -= options.learning_rate * (m1[k].array() / c1) / ((m2[k].array() / c2).sqrt() + 1e-8);
    }
  }

  ProbeResult result;
  result.train_size = static_cast<Index>(train_rows.size());
  result.held_out_size = static_cast<Index>(test_rows.size());
  result.train_accuracy = accuracy(probe, x_train, y_train);
  result.held_out_accuracy = accuracy(probe, x_test, y_test);
  return result;
}

DiagnosticsReport anisotropy_report(const TokenSample& sample, const DiagnosticsOptions& options) {
  const Index n = sample.embeddings.rows();
  if (n < 2) throw UsageError("empty sample: need at least 2 token embeddings, got " + std::to_string(n));
  DiagnosticsReport r;
  r.sentences = sample.sentences;
  r.tokens = n;
  r.mean_pairwise_cosine = mean_pairwise_cosine(sample.embeddings, options.max_pairs, derive_seed({options.seed, 1}));

  std::vector<Index> band[2];
  for (Index i = 0; i < n; ++i) band[sample.labels[static_cast<std::size_t>(i)] == 1 ? 1 : 0].push_back(i);
  r.high_tokens = static_cast<Index>(band[0].size());
  r.low_tokens = static_cast<Index>(band[1].size());
  const RealMatrix high = gather(sample.embeddings, band[0]), low = gather(sample.embeddings, band[1]);
  if (high.rows() > 0) r.mean_norm_high = high.rowwise().norm().mean();
  if (low.rows() > 0) r.mean_norm_low = low.rowwise().norm().mean();
  if (high.rows() >= 2) r.within_high_cosine = mean_pairwise_cosine(high, options.max_pairs, derive_seed({options.seed, 2}));
  if (low.rows() >= 2) r.within_low_cosine = mean_pairwise_cosine(low, options.max_pairs, derive_seed({options.seed, 3}));
  if (high.rows() > 0 && low.rows() > 0)
    r.cross_band_cosine = mean_cross_cosine(high, low, options.max_pairs, derive_seed({options.seed, 4}));

  if (options.probe_repeats < 1) throw UsageError("probe_repeats must be >= 1");
  for (Index k = 0; k < options.probe_repeats; ++k) {
    ProbeOptions po = options.probe;
    po.seed = derive_seed({options.probe.seed, static_cast<std::uint64_t>(k)});
    const auto probe = train_probe(sample.embeddings, sample.labels, sample.ids, po);
    r.probe_accuracy += probe.held_out_accuracy / static_cast<double>(options.probe_repeats);
    r.probe_train_accuracy += probe.train_accuracy / static_cast<double>(options.probe_repeats);
    r.probe_train_size += probe.train_size;
    r.probe_held_out_size += probe.held_out_size;
  }
  return r;
}

DiagnosticsReport anisotropy_report(const EncoderParams& params, std::span<const std::vector<TokenId>> corpus,
                                    const FrequencyTable& labels, const DiagnosticsOptions& options) {
  const auto sample = collect_token_embeddings(params, corpus, labels, options.sample_sentences,
                                               options.max_per_type, options.seed);
  return anisotropy_report(sample, options);
}

void write_diagnostics(std::ostream& out, const DiagnosticsReport& r) {
  const std::pair<const char*, double> reals[] = {
      {"mean_pairwise_cosine", r.mean_pairwise_cosine}, {"mean_norm_high", r.mean_norm_high},
      {"mean_norm_low", r.mean_norm_low},               {"within_high_cosine", r.within_high_cosine},
      {"within_low_cosine", r.within_low_cosine},       {"cross_band_cosine", r.cross_band_cosine},
      {"cross_band_gap", r.cross_band_gap()},           {"probe_accuracy", r.probe_accuracy},
      {"probe_train_accuracy", r.probe_train_accuracy}};
  for (const auto& [k, v] : reals) out << k << '\t' << format_real(v) << '\n';
  const std::pair<const char*, Index> counts[] = {
      {"sentences", r.sentences},     {"tokens", r.tokens},
      {"high_tokens", r.high_tokens}, {"low_tokens", r.low_tokens},
      {"probe_train_size", r.probe_train_size}, {"probe_held_out_size", r.probe_held_out_size}};
  for (const auto& [k, v] : counts) out << k << '\t' << v << '\n';
}

RealMatrix principal_projection(const RealMatrix& points, Index components, Index iterations, std::uint64_t seed) {
  if (components < 1 || components > points.cols())
    throw UsageError("principal_projection: " + std::to_string(components) + " components for width " +
                     std::to_string(points.cols()));
  const RealMatrix centred = points.rowwise() - points.colwise().mean();
  const Eigen::MatrixXd cov = centred.transpose() * centred;
  Rng rng(seed);
  Eigen::MatrixXd q(points.cols(), components);
  for (Index i = 0; i < q.size(); ++i) q.data()[i] = rng.normal();
  for (Index it = 0; it < iterations; ++it) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(cov * q);
    q = qr.householderQ() * Eigen::MatrixXd::Identity(points.cols(), components);
  }
  // Rayleigh-Ritz inside the subspace orders the directions by variance.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> small(q.transpose() * cov * q);
  q = q * small.eigenvectors().rowwise().reverse();
  RealMatrix coords = centred * q;
  for (Index c = 0; c < coords.cols(); ++c) {
    Index arg = 0;
    coords.col(c).cwiseAbs().maxCoeff(&arg);
    if (coords(arg, c) < 0) coords.col(c) *= -1.0;
  }
  return coords;
}

void export_embeddings(std::ostream& out, const RealMatrix& points, std::span<const ExportRow> rows,
                       bool projection, std::uint64_t seed) {
  if (static_cast<Index>(rows.size()) != points.rows())
    throw ShapeError("export_embeddings: " + std::to_string(rows.size()) + " ids for " +
                     std::to_string(points.rows()) + " embeddings");
  RealMatrix proj;
  if (projection) proj = principal_projection(points, 2, 500, seed);
  out << "id\tlabel";
  for (Index d = 0; d < points.cols(); ++d) out << "\tdim_" << d;
  if (projection) out << "\tproj_0\tproj_1";
  out << '\n';
  for (Index i = 0; i < points.rows(); ++i) {
    out << rows[static_cast<std::size_t>(i)].id << '\t' << rows[static_cast<std::size_t>(i)].label;
    for (Index d = 0; d < points.cols(); ++d) out << '\t' << format_real(points(i, d));
    if (projection) out << '\t' << format_real(proj(i, 0)) << '\t' << format_real(proj(i, 1));
    out << '\n';
  }
  if (!out) throw Error("export_embeddings: write failed");
}

}  // namespace freqtune
