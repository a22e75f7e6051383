#pragma once

// Central finite-difference oracle for reverse-mode gradients. Lives in test
// code and only touches tensor values, never the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "freqtune/ops.hpp"
#include "freqtune/random.hpp"
#include "freqtune/tensor.hpp"

namespace freqtune::test {

using T = Tensor<double>;
using Mat = Matrix<double>;

struct GradCheckResult {
  double worst_relative_error = 0.0;
  std::string worst_input;
};

/// Norm-wise relative error |a - n| / max(|a|, |n|), with an absolute floor
/// so that two vanishing gradients compare equal.
inline double relative_error(const Mat& analytic, const Mat& numeric, double floor = 1e-8) {
  const double scale = std::max({analytic.norm(), numeric.norm(), floor});
  return (analytic - numeric).norm() / scale;
}

/// `loss` must rebuild the graph from `inputs` on every call.
inline GradCheckResult grad_check(const std::function<T()>& loss, std::vector<T> inputs,
                                  double step = 1e-5, double floor = 1e-8) {
  for (auto& t : inputs) t.zero_grad();
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    T out = loss();
    tape.backward(out);
  }
  GradCheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& t = inputs[k];
    Mat analytic = t.has_grad() ? t.grad() : Mat::Zero(t.rows(), t.cols());
    Mat numeric(t.rows(), t.cols());
    for (Index i = 0; i < t.numel(); ++i) {
      double& x = t.mutable_value().data()[i];
      const double saved = x;
      x = saved + step;
      const double up = loss().item();
      x = saved - step;
      const double down = loss().item();
      x = saved;
      numeric.data()[i] = (up - down) / (2.0 * step);
    }
    const double err = relative_error(analytic, numeric, floor);
    if (err > result.worst_relative_error) {
      result.worst_relative_error = err;
      result.worst_input = "input " + std::to_string(k);
    }
  }
  return result;
}

inline T random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0,
                       bool requires_grad = true) {
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return T::from_values(std::move(shape), v, requires_grad);
}

/// Fixed random weights for reducing a tensor to a scalar without symmetry.
inline T probe_weights(const T& like, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor(rng, like.shape(), -1.0, 1.0, false);
}

inline T weighted_sum(const T& x, std::uint64_t seed = 99) {
  return sum(multiply(x, probe_weights(x, seed)));
}

}  // namespace freqtune::test
