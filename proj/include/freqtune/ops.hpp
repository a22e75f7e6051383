#pragma once

// Differentiable primitives over Tensor<Scalar>. Every function computes the
// forward value eagerly and, when an input requires grad and a tape is
// active, records an analytic backward rule.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "freqtune/error.hpp"
#include "freqtune/random.hpp"
#include "freqtune/tensor.hpp"

namespace freqtune {

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

template <typename Scalar>
void check_finite(std::string_view op, const std::vector<Tensor<Scalar>>& inputs) {
  if (!strict_numerics()) return;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].value().allFinite())
      throw NumericError(std::string(op) + ": input " + std::to_string(i) +
                         " contains non-finite values");
  }
}

template <typename Scalar, typename Backward>
Tensor<Scalar> finish(std::string_view op, Shape shape, Matrix<Scalar> value,
                      const std::vector<Tensor<Scalar>>& inputs, Backward&& backward) {
  bool track = false;
  for (const auto& t : inputs) track = track || t.requires_grad();
  Tape<Scalar>* tape = Tape<Scalar>::active();
  track = track && tape != nullptr;
  Tensor<Scalar> out(std::move(shape), std::move(value), track);
  if (track) {
    typename Tape<Scalar>::Entry entry;
    entry.op = op;
    for (const auto& t : inputs) entry.inputs.push_back(t.node());
    entry.output = out.node();
    entry.backward = std::forward<Backward>(backward);
    tape->record(std::move(entry));
  }
  return out;
}

template <typename Scalar>
std::string dims(const Tensor<Scalar>& t) {
  return shape_string(t.shape());
}

template <typename Scalar>
bool is_row_vector(const Tensor<Scalar>& t) {
  return t.rank() <= 1 || (t.rank() == 2 && t.dim(0) == 1);
}

template <typename Scalar>
void require_matrix(std::string_view op, const Tensor<Scalar>& t) {
  if (t.rank() > 2)
    throw ShapeError(std::string(op) + ": expected rank <= 2, got " + dims(t));
}

}  // namespace detail

/// (m x k) * (k x n). Rank-1 operands are treated as a single row.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions differ (" + detail::dims(a) + " vs " +
                     detail::dims(b) + ")");
  detail::check_finite<Scalar>("matmul", {a, b});
  Matrix<Scalar> value = a.value() * b.value();
  Shape shape{value.rows(), value.cols()};
  auto an = a.node(), bn = b.node();
  return detail::finish<Scalar>("matmul", std::move(shape), std::move(value), {a, b},
                                [an, bn](const Matrix<Scalar>& g) {
                                  if (an->requires_grad) an->accumulate(g * bn->value.transpose());
                                  if (bn->requires_grad) bn->accumulate(an->value.transpose() * g);
                                });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  detail::require_matrix("transpose", a);
  detail::check_finite<Scalar>("transpose", {a});
  Matrix<Scalar> value = a.value().transpose();
  Shape shape{value.rows(), value.cols()};
  auto an = a.node();
  return detail::finish<Scalar>("transpose", std::move(shape), std::move(value), {a},
                                [an](const Matrix<Scalar>& g) { an->accumulate(g.transpose()); });
}

/// Elementwise sum. `b` may instead be a row vector of length a.cols(), which
/// is broadcast over the rows of `a`.
template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_finite<Scalar>("add", {a, b});
  auto an = a.node(), bn = b.node();
  if (a.shape() == b.shape()) {
    Matrix<Scalar> value = a.value() + b.value();
    return detail::finish<Scalar>("add", a.shape(), std::move(value), {a, b},
                                  [an, bn](const Matrix<Scalar>& g) {
                                    an->accumulate(g);
                                    bn->accumulate(g);
                                  });
  }
  if (detail::is_row_vector(b) && b.numel() == a.cols()) {
    Matrix<Scalar> value = a.value().rowwise() + b.value().row(0);
    return detail::finish<Scalar>("add", a.shape(), std::move(value), {a, b},
                                  [an, bn](const Matrix<Scalar>& g) {
                                    an->accumulate(g);
                                    if (bn->requires_grad)
                                      bn->accumulate(g.colwise().sum().reshaped(bn->value.rows(),
                                                                                bn->value.cols()));
                                  });
  }
  throw ShapeError("add: shapes " + detail::dims(a) + " and " + detail::dims(b) +
                   " are neither equal nor row-broadcastable");
}

/// Elementwise product, with the same broadcasting rule as `add`.
template <typename Scalar>
Tensor<Scalar> multiply(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::check_finite<Scalar>("multiply", {a, b});
  auto an = a.node(), bn = b.node();
  if (a.shape() == b.shape()) {
    Matrix<Scalar> value = a.value().cwiseProduct(b.value());
    return detail::finish<Scalar>("multiply", a.shape(), std::move(value), {a, b},
                                  [an, bn](const Matrix<Scalar>& g) {
                                    if (an->requires_grad) an->accumulate(g.cwiseProduct(bn->value));
                                    if (bn->requires_grad) bn->accumulate(g.cwiseProduct(an->value));
                                  });
  }
  if (detail::is_row_vector(b) && b.numel() == a.cols()) {
    Matrix<Scalar> value = a.value().array().rowwise() * b.value().row(0).array();
    return detail::finish<Scalar>(
        "multiply", a.shape(), std::move(value), {a, b}, [an, bn](const Matrix<Scalar>& g) {
          if (an->requires_grad) {
            Matrix<Scalar> ga = g.array().rowwise() * bn->value.row(0).array();
            an->accumulate(ga);
          }
          if (bn->requires_grad)
            bn->accumulate(g.cwiseProduct(an->value).colwise().sum().reshaped(bn->value.rows(),
                                                                              bn->value.cols()));
        });
  }
  throw ShapeError("multiply: shapes " + detail::dims(a) + " and " + detail::dims(b) +
                   " are neither equal nor row-broadcastable");
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  detail::check_finite<Scalar>("scale", {a});
  Matrix<Scalar> value = a.value() * factor;
  auto an = a.node();
  return detail::finish<Scalar>("scale", a.shape(), std::move(value), {a},
                                [an, factor](const Matrix<Scalar>& g) { an->accumulate(g * factor); });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  detail::check_finite<Scalar>("relu", {a});
  Matrix<Scalar> value = a.value().cwiseMax(Scalar{0});
  auto an = a.node();
  return detail::finish<Scalar>("relu", a.shape(), std::move(value), {a},
                                [an](const Matrix<Scalar>& g) {
                                  Matrix<Scalar> ga =
                                      (an->value.array() > Scalar{0}).select(g, Scalar{0});
                                  an->accumulate(ga);
                                });
}

/// Identity forward; backward negates the incoming gradient.
template <typename Scalar>
Tensor<Scalar> grl(const Tensor<Scalar>& a) {
  Matrix<Scalar> value = a.value();
  auto an = a.node();
  return detail::finish<Scalar>("grl", a.shape(), std::move(value), {a},
                                [an](const Matrix<Scalar>& g) { an->accumulate(-g); });
}

namespace detail {

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x, const Mask* keep) {
  Matrix<Scalar> y(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    Scalar peak = -std::numeric_limits<Scalar>::infinity();
    bool any = false, finite = true;
    for (Index c = 0; c < x.cols(); ++c) {
      if (keep && !(*keep)(0, c)) continue;
      any = true;
      finite = finite && std::isfinite(x(r, c));
      peak = std::max(peak, x(r, c));
    }
    if (!any) throw NumericError("softmax: row has no unmasked entries");
    if (!finite) {
      y.row(r).setConstant(std::numeric_limits<Scalar>::quiet_NaN());
      continue;
    }
    Scalar total{0};
    for (Index c = 0; c < x.cols(); ++c) {
      const Scalar e = (!keep || (*keep)(0, c)) ? std::exp(x(r, c) - peak) : Scalar{0};
      y(r, c) = e;
      total += e;
    }
    y.row(r) /= total;
  }
  return y;
}

}  // namespace detail

/// Row-wise softmax. When `keep_columns` is given (one row, a.cols() entries)
/// masked columns receive exactly zero weight.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& a, const Mask* keep_columns = nullptr) {
  detail::check_finite<Scalar>("softmax", {a});
  if (keep_columns && (keep_columns->rows() != 1 || keep_columns->cols() != a.cols()))
    throw ShapeError("softmax: column mask has " + std::to_string(keep_columns->cols()) +
                     " entries, input has " + std::to_string(a.cols()) + " columns");
  Matrix<Scalar> value = detail::softmax_rows(a.value(), keep_columns);
  auto an = a.node();
  Matrix<Scalar> y = value;
  return detail::finish<Scalar>("softmax", a.shape(), std::move(value), {a},
                                [an, y = std::move(y)](const Matrix<Scalar>& g) {
                                  const auto dot = g.cwiseProduct(y).rowwise().sum();
                                  Matrix<Scalar> ga =
                                      y.cwiseProduct(g - dot.replicate(1, g.cols()));
                                  an->accumulate(ga);
                                });
}

/// Row-wise layer normalisation with learned scale and shift (row vectors of
/// length a.cols()).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& a, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar{1e-5}) {
  if (!detail::is_row_vector(gamma) || gamma.numel() != a.cols() ||
      !detail::is_row_vector(beta) || beta.numel() != a.cols())
    throw ShapeError("layer_norm: scale " + detail::dims(gamma) + " and shift " +
                     detail::dims(beta) + " must be rows of length " + std::to_string(a.cols()));
  detail::check_finite<Scalar>("layer_norm", {a, gamma, beta});
  const Index n = a.cols();
  const auto& x = a.value();
  Matrix<Scalar> xhat(x.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar mu = x.row(r).mean();
    const Scalar var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = Scalar{1} / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix<Scalar> value = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
                         beta.value().row(0).array();
  auto an = a.node(), gn = gamma.node(), bn = beta.node();
  return detail::finish<Scalar>(
      "layer_norm", a.shape(), std::move(value), {a, gamma, beta},
      [an, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n](const Matrix<Scalar>& g) {
        if (gn->requires_grad)
          gn->accumulate(g.cwiseProduct(xhat).colwise().sum().reshaped(gn->value.rows(),
                                                                       gn->value.cols()));
        if (bn->requires_grad)
          bn->accumulate(g.colwise().sum().reshaped(bn->value.rows(), bn->value.cols()));
        if (an->requires_grad) {
          Matrix<Scalar> gx(g.rows(), n);
          for (Index r = 0; r < g.rows(); ++r) {
            const auto gxhat = (g.row(r).array() * gn->value.row(0).array()).matrix().eval();
            const Scalar mean_g = gxhat.mean();
            const Scalar mean_gx = gxhat.cwiseProduct(xhat.row(r)).mean();
            gx.row(r) = inv_std(r) * (gxhat.array() - mean_g - xhat.row(r).array() * mean_gx);
          }
          an->accumulate(gx);
        }
      });
}

/// Inverted dropout: kept entries are scaled by 1/(1-p). Identity when
/// `train` is false or p == 0. The mask is a pure function of `seed`.
template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& a, double p, std::uint64_t seed, bool train) {
  if (p < 0.0 || p >= 1.0) throw UsageError("dropout: rate must be in [0, 1)");
  if (!train || p == 0.0) return a;
  detail::check_finite<Scalar>("dropout", {a});
  Rng rng(seed);
  const Scalar keep_scale = Scalar{1} / static_cast<Scalar>(1.0 - p);
  Matrix<Scalar> mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i)
    mask.data()[i] = rng.uniform() < p ? Scalar{0} : keep_scale;
  Matrix<Scalar> value = a.value().cwiseProduct(mask);
  auto an = a.node();
  return detail::finish<Scalar>("dropout", a.shape(), std::move(value), {a},
                                [an, mask = std::move(mask)](const Matrix<Scalar>& g) {
                                  an->accumulate(g.cwiseProduct(mask));
                                });
}

/// Gathers rows `ids` of a (V x D) table into an (n x D) tensor.
template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, std::span<const Index> ids) {
  detail::require_matrix("embedding_lookup", table);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= table.rows())
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) + " at position " +
                       std::to_string(i) + " outside table of " + std::to_string(table.rows()) +
                       " rows");
  detail::check_finite<Scalar>("embedding_lookup", {table});
  const auto n = static_cast<Index>(ids.size());
  Matrix<Scalar> value(n, table.cols());
  for (Index i = 0; i < n; ++i) value.row(i) = table.value().row(ids[static_cast<std::size_t>(i)]);
  auto tn = table.node();
  std::vector<Index> rows(ids.begin(), ids.end());
  return detail::finish<Scalar>("embedding_lookup", Shape{n, table.cols()}, std::move(value),
                                {table}, [tn, rows = std::move(rows)](const Matrix<Scalar>& g) {
                                  if (!tn->requires_grad) return;
                                  if (!tn->has_grad())
                                    tn->grad = Matrix<Scalar>::Zero(tn->value.rows(), tn->value.cols());
                                  for (std::size_t i = 0; i < rows.size(); ++i)
                                    tn->grad.row(rows[i]) += g.row(static_cast<Index>(i));
                                });
}

/// Concatenates along axis 0 (rows) or 1 (columns). Rank-1 parts count as
/// single rows.
template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  Index rows = 0, cols = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    detail::require_matrix("concat", parts[i]);
    const bool mismatch =
        axis == 0 ? parts[i].cols() != parts[0].cols() : parts[i].rows() != parts[0].rows();
    if (mismatch)
      throw ShapeError("concat: part " + std::to_string(i) + " has shape " +
                       detail::dims(parts[i]) + ", incompatible with " + detail::dims(parts[0]) +
                       " along axis " + std::to_string(axis));
    if (axis == 0) rows += parts[i].rows();
    else cols += parts[i].cols();
  }
  if (axis == 0) cols = parts[0].cols();
  else rows = parts[0].rows();
  detail::check_finite<Scalar>("concat", parts);
  Matrix<Scalar> value(rows, cols);
  std::vector<std::pair<Index, Index>> spans;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index extent = axis == 0 ? p.rows() : p.cols();
    if (axis == 0) value.middleRows(offset, extent) = p.value();
    else value.middleCols(offset, extent) = p.value();
    spans.emplace_back(offset, extent);
    offset += extent;
  }
  std::vector<typename Tape<Scalar>::NodePtr> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::finish<Scalar>(
      "concat", Shape{rows, cols}, std::move(value), parts,
      [nodes = std::move(nodes), spans = std::move(spans), axis](const Matrix<Scalar>& g) {
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          const auto [off, ext] = spans[i];
          Matrix<Scalar> part = axis == 0 ? Matrix<Scalar>(g.middleRows(off, ext))
                                          : Matrix<Scalar>(g.middleCols(off, ext));
          nodes[i]->accumulate(part.reshaped(nodes[i]->value.rows(), nodes[i]->value.cols()));
        }
      });
}

/// Half-open range [begin, end) along axis 0 or 1.
template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& a, int axis, Index begin, Index end) {
  detail::require_matrix("slice", a);
  if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
  const Index extent = axis == 0 ? a.rows() : a.cols();
  if (begin < 0 || end > extent || begin >= end)
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + detail::dims(a));
  detail::check_finite<Scalar>("slice", {a});
  Matrix<Scalar> value = axis == 0 ? Matrix<Scalar>(a.value().middleRows(begin, end - begin))
                                   : Matrix<Scalar>(a.value().middleCols(begin, end - begin));
  Shape shape{value.rows(), value.cols()};
  auto an = a.node();
  return detail::finish<Scalar>("slice", std::move(shape), std::move(value), {a},
                                [an, axis, begin, end](const Matrix<Scalar>& g) {
                                  if (!an->requires_grad) return;
                                  Matrix<Scalar> ga =
                                      Matrix<Scalar>::Zero(an->value.rows(), an->value.cols());
                                  if (axis == 0) ga.middleRows(begin, end - begin) = g;
                                  else ga.middleCols(begin, end - begin) = g;
                                  an->accumulate(ga);
                                });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + detail::dims(a) + " as " + shape_string(shape));
  const auto [rows, cols] = detail::storage_dims(shape);
  Matrix<Scalar> value = a.value().template reshaped<Eigen::RowMajor>(rows, cols);
  auto an = a.node();
  return detail::finish<Scalar>("reshape", std::move(shape), std::move(value), {a},
                                [an](const Matrix<Scalar>& g) {
                                  an->accumulate(g.template reshaped<Eigen::RowMajor>(
                                      an->value.rows(), an->value.cols()));
                                });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  detail::check_finite<Scalar>("sum", {a});
  Matrix<Scalar> value(1, 1);
  value(0, 0) = a.value().sum();
  auto an = a.node();
  return detail::finish<Scalar>("sum", Shape{}, std::move(value), {a},
                                [an](const Matrix<Scalar>& g) {
                                  an->accumulate(Matrix<Scalar>::Constant(
                                      an->value.rows(), an->value.cols(), g(0, 0)));
                                });
}

/// Mean of all entries, as a scalar.
template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  detail::check_finite<Scalar>("mean", {a});
  Matrix<Scalar> value(1, 1);
  value(0, 0) = a.value().mean();
  auto an = a.node();
  const Scalar inv = Scalar{1} / static_cast<Scalar>(a.numel());
  return detail::finish<Scalar>("mean", Shape{}, std::move(value), {a},
                                [an, inv](const Matrix<Scalar>& g) {
                                  an->accumulate(Matrix<Scalar>::Constant(
                                      an->value.rows(), an->value.cols(), g(0, 0) * inv));
                                });
}

/// Mean over the selected rows, as a (1 x cols) tensor.
template <typename Scalar>
Tensor<Scalar> mean_rows(const Tensor<Scalar>& a, std::span<const Index> rows) {
  detail::require_matrix("mean_rows", a);
  if (rows.empty()) throw ShapeError("mean_rows: no rows selected");
  for (Index r : rows)
    if (r < 0 || r >= a.rows())
      throw ShapeError("mean_rows: row " + std::to_string(r) + " outside " + detail::dims(a));
  detail::check_finite<Scalar>("mean_rows", {a});
  Matrix<Scalar> value = Matrix<Scalar>::Zero(1, a.cols());
  for (Index r : rows) value += a.value().row(r);
  const Scalar inv = Scalar{1} / static_cast<Scalar>(rows.size());
  value *= inv;
  auto an = a.node();
  std::vector<Index> selected(rows.begin(), rows.end());
  return detail::finish<Scalar>("mean_rows", Shape{1, a.cols()}, std::move(value), {a},
                                [an, inv, selected = std::move(selected)](const Matrix<Scalar>& g) {
                                  if (!an->requires_grad) return;
                                  Matrix<Scalar> ga =
                                      Matrix<Scalar>::Zero(an->value.rows(), an->value.cols());
                                  for (Index r : selected) ga.row(r) += g.row(0) * inv;
                                  an->accumulate(ga);
                                });
}

/// a . b / (|a| |b|) over flattened operands of equal size.
template <typename Scalar>
Tensor<Scalar> cosine_similarity(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError("cosine_similarity: sizes differ (" + detail::dims(a) + " vs " +
                     detail::dims(b) + ")");
  detail::check_finite<Scalar>("cosine_similarity", {a, b});
  const auto av = a.value().reshaped();
  const auto bv = b.value().reshaped();
  const Scalar na = a.value().norm(), nb = b.value().norm();
  if (na == Scalar{0} || nb == Scalar{0})
    throw NumericError("cosine_similarity: zero-norm operand (degenerate embedding)");
  const Scalar cos = av.dot(bv) / (na * nb);
  auto an = a.node(), bn = b.node();
  return detail::finish<Scalar>(
      "cosine_similarity", Shape{}, Matrix<Scalar>::Constant(1, 1, cos), {a, b},
      [an, bn, na, nb, cos](const Matrix<Scalar>& g) {
        const Scalar s = g(0, 0);
        if (an->requires_grad)
          an->accumulate(s * (bn->value / (na * nb) - cos * an->value / (na * na)));
        if (bn->requires_grad)
          bn->accumulate(s * (an->value / (na * nb) - cos * bn->value / (nb * nb)));
      });
}

/// Scales every row to unit Euclidean norm.
template <typename Scalar>
Tensor<Scalar> normalize_rows(const Tensor<Scalar>& a) {
  detail::require_matrix("normalize_rows", a);
  detail::check_finite<Scalar>("normalize_rows", {a});
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms = a.value().rowwise().norm();
  for (Index r = 0; r < norms.size(); ++r)
    if (norms(r) == Scalar{0})
      throw NumericError("normalize_rows: row " + std::to_string(r) + " has zero norm");
  Matrix<Scalar> value = a.value().array().colwise() / norms.array();
  auto an = a.node();
  Matrix<Scalar> y = value;
  return detail::finish<Scalar>(
      "normalize_rows", a.shape(), std::move(value), {a},
      [an, y = std::move(y), norms = std::move(norms)](const Matrix<Scalar>& g) {
        const auto dot = g.cwiseProduct(y).rowwise().sum();
        Matrix<Scalar> ga = (g - y.cwiseProduct(dot.replicate(1, y.cols()))).array().colwise() /
                            norms.array();
        an->accumulate(ga);
      });
}

namespace detail {

template <typename Scalar>
Scalar log_sum_exp(const auto& row, const Mask* keep, Index r) {
  Scalar peak = -std::numeric_limits<Scalar>::infinity();
  bool any = false, finite = true;
  for (Index c = 0; c < row.size(); ++c) {
    if (keep && !(*keep)(r, c)) continue;
    any = true;
    finite = finite && std::isfinite(row(c));
    peak = std::max(peak, row(c));
  }
  if (!any) throw NumericError("log_sum_exp: row has no selected entries");
  if (!finite) return std::numeric_limits<Scalar>::quiet_NaN();
  Scalar total{0};
  for (Index c = 0; c < row.size(); ++c)
    if (!keep || (*keep)(r, c)) total += std::exp(row(c) - peak);
  return peak + std::log(total);
}

}  // namespace detail

/// -log softmax(logits)[label] for a single row of logits.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, Index label) {
  if (!detail::is_row_vector(logits) || logits.numel() < 2)
    throw ShapeError("cross_entropy: expected one row of >= 2 logits, got " + detail::dims(logits));
  if (label < 0 || label >= logits.numel())
    throw UsageError("cross_entropy: label " + std::to_string(label) + " out of range [0, " +
                     std::to_string(logits.numel()) + ")");
  detail::check_finite<Scalar>("cross_entropy", {logits});
  const auto row = logits.value().row(0);
  const Scalar lse = detail::log_sum_exp<Scalar>(row, nullptr, 0);
  const Scalar loss = lse - row(label);
  auto ln = logits.node();
  return detail::finish<Scalar>("cross_entropy", Shape{}, Matrix<Scalar>::Constant(1, 1, loss),
                                {logits}, [ln, lse, label](const Matrix<Scalar>& g) {
                                  Matrix<Scalar> p = (ln->value.array() - lse).exp().matrix();
                                  p(0, label) -= Scalar{1};
                                  ln->accumulate(g(0, 0) * p);
                                });
}

/// Per-row cross-entropy of an (m x k) logit matrix; returns shape {m}.
template <typename Scalar>
Tensor<Scalar> cross_entropy_rows(const Tensor<Scalar>& logits, std::span<const Index> labels) {
  detail::require_matrix("cross_entropy_rows", logits);
  if (logits.cols() < 2)
    throw ShapeError("cross_entropy_rows: need >= 2 classes, got " + detail::dims(logits));
  if (static_cast<Index>(labels.size()) != logits.rows())
    throw ShapeError("cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.rows()) + " rows");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= logits.cols())
      throw UsageError("cross_entropy_rows: label " + std::to_string(labels[i]) + " at row " +
                       std::to_string(i) + " out of range");
  detail::check_finite<Scalar>("cross_entropy_rows", {logits});
  const Index m = logits.rows();
  Matrix<Scalar> value(1, m);
  Matrix<Scalar> probs(m, logits.cols());
  for (Index r = 0; r < m; ++r) {
    const auto row = logits.value().row(r);
    const Scalar lse = detail::log_sum_exp<Scalar>(row, nullptr, 0);
    value(0, r) = lse - row(labels[static_cast<std::size_t>(r)]);
    probs.row(r) = (row.array() - lse).exp().matrix();
  }
  auto ln = logits.node();
  std::vector<Index> targets(labels.begin(), labels.end());
  return detail::finish<Scalar>(
      "cross_entropy_rows", Shape{m}, std::move(value), {logits},
      [ln, probs = std::move(probs), targets = std::move(targets)](const Matrix<Scalar>& g) {
        Matrix<Scalar> ga = probs;
        for (Index r = 0; r < ga.rows(); ++r) {
          ga(r, targets[static_cast<std::size_t>(r)]) -= Scalar{1};
          ga.row(r) *= g(0, r);
        }
        ln->accumulate(ga);
      });
}

/// Row-wise log-sum-exp over the entries selected by `keep` (same shape as
/// `a`; null selects everything). Returns shape {rows}.
template <typename Scalar>
Tensor<Scalar> logsumexp_rows(const Tensor<Scalar>& a, const Mask* keep = nullptr) {
  detail::require_matrix("logsumexp_rows", a);
  if (keep && (keep->rows() != a.rows() || keep->cols() != a.cols()))
    throw ShapeError("logsumexp_rows: mask shape differs from " + detail::dims(a));
  detail::check_finite<Scalar>("logsumexp_rows", {a});
  const Index m = a.rows();
  Matrix<Scalar> value(1, m);
  Matrix<Scalar> weights = Matrix<Scalar>::Zero(m, a.cols());
  for (Index r = 0; r < m; ++r) {
    const auto row = a.value().row(r);
    const Scalar lse = detail::log_sum_exp<Scalar>(row, keep, r);
    value(0, r) = lse;
    for (Index c = 0; c < a.cols(); ++c)
      if (!keep || (*keep)(r, c)) weights(r, c) = std::exp(row(c) - lse);
  }
  auto an = a.node();
  return detail::finish<Scalar>("logsumexp_rows", Shape{m}, std::move(value), {a},
                                [an, weights = std::move(weights)](const Matrix<Scalar>& g) {
                                  Matrix<Scalar> ga =
                                      weights.array().colwise() * g.row(0).transpose().array();
                                  an->accumulate(ga);
                                });
}

/// Picks a(r, columns[r]) from every row; returns shape {rows}.
template <typename Scalar>
Tensor<Scalar> pick(const Tensor<Scalar>& a, std::span<const Index> columns) {
  detail::require_matrix("pick", a);
  if (static_cast<Index>(columns.size()) != a.rows())
    throw ShapeError("pick: " + std::to_string(columns.size()) + " indices for " +
                     std::to_string(a.rows()) + " rows");
  for (std::size_t r = 0; r < columns.size(); ++r)
    if (columns[r] < 0 || columns[r] >= a.cols())
      throw ShapeError("pick: column " + std::to_string(columns[r]) + " outside " + detail::dims(a));
  detail::check_finite<Scalar>("pick", {a});
  const Index m = a.rows();
  Matrix<Scalar> value(1, m);
  for (Index r = 0; r < m; ++r) value(0, r) = a.value()(r, columns[static_cast<std::size_t>(r)]);
  auto an = a.node();
  std::vector<Index> cols(columns.begin(), columns.end());
  return detail::finish<Scalar>("pick", Shape{m}, std::move(value), {a},
                                [an, cols = std::move(cols)](const Matrix<Scalar>& g) {
                                  if (!an->requires_grad) return;
                                  Matrix<Scalar> ga =
                                      Matrix<Scalar>::Zero(an->value.rows(), an->value.cols());
                                  for (std::size_t r = 0; r < cols.size(); ++r)
                                    ga(static_cast<Index>(r), cols[r]) = g(0, static_cast<Index>(r));
                                  an->accumulate(ga);
                                });
}

/// Elementwise a - b for equal shapes.
template <typename Scalar>
Tensor<Scalar> subtract(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, scale(b, Scalar{-1}));
}

}  // namespace freqtune
