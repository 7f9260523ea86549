#pragma once

// Central finite differences, kept out of the library on purpose: the
// analytic backward passes are checked against this and nothing else.

#include "r2d2/autograd.hpp"
#include "r2d2/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace r2d2::testing {

struct GradReport {
  std::string name;
  double relative_error = 0.0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  size_t checked = 0;
  bool structural_zero = false;
};

/// Compares d loss / d param against central differences for every tensor in
/// `params`. At most `max_entries` coordinates per tensor are probed (chosen
/// with a fixed seed); the error is ||a - n|| / max(||a||, ||n||) over the
/// probed coordinates. A tensor whose analytic gradient is exactly zero and
/// whose numeric gradient is at round-off level (below `zero_tol`) is
/// reported as a structural zero with error 0; attention key biases are the
/// usual case, since softmax ignores per-query shifts.
inline std::vector<GradReport> check_gradients(const std::function<Tensor()>& loss_fn,
                                               const std::vector<NamedParameter>& params, double eps = 1e-5,
                                               size_t max_entries = 0, uint64_t seed = 1,
                                               double zero_tol = 1e-8) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
  Tensor loss = loss_fn();
  loss.backward();

  std::mt19937_64 rng(seed);
  std::vector<GradReport> out;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    const Matrix analytic = t.grad().size() ? t.grad() : Matrix::Zero(t.rows(), t.cols());
    std::vector<Eigen::Index> coords(static_cast<size_t>(t.value().size()));
    for (size_t i = 0; i < coords.size(); ++i) coords[i] = static_cast<Eigen::Index>(i);
    if (max_entries && coords.size() > max_entries) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_entries);
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (auto c : coords) {
      double& x = t.mutable_value().data()[c];
      const double saved = x;
      double plus, minus;
      {
        NoGradGuard guard;
        x = saved + eps;
        plus = loss_fn().item();
        x = saved - eps;
        minus = loss_fn().item();
      }
      x = saved;
      const double numeric = (plus - minus) / (2.0 * eps);
      const double a = analytic.data()[c];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    GradReport r;
    r.name = p.name;
    r.analytic_norm = std::sqrt(a2);
    r.numeric_norm = std::sqrt(n2);
    const double scale = std::max(r.analytic_norm, r.numeric_norm);
    r.structural_zero = r.analytic_norm < 1e-12 && r.numeric_norm < zero_tol;
    r.relative_error = r.structural_zero ? 0.0 : std::sqrt(diff2) / std::max(scale, 1e-300);
    r.checked = coords.size();
    out.push_back(r);
  }
  return out;
}

inline double worst_error(const std::vector<GradReport>& reports) {
  double worst = 0.0;
  for (const auto& r : reports) worst = std::max(worst, r.relative_error);
  return worst;
}

}  // namespace r2d2::testing
