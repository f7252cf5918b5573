#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "privpart/rng.hpp"
#include "privpart/tensor.hpp"

namespace privpart {

// Central-difference verification of reverse-mode gradients, in double so the
// difference quotient has headroom. err is |analytic - numeric| scaled by
// max(1, |analytic|, |numeric|), i.e. absolute near zero, relative otherwise.
struct GradCheckResult {
  double worst_err = 0.0;
  double analytic = 0.0;
  double numeric = 0.0;
  size_t param = 0;
  size_t index = 0;
  size_t coords_checked = 0;

  bool ok(double tol) const { return worst_err <= tol; }

  std::string describe() const {
    return "worst err " + std::to_string(worst_err) + " at param " +
           std::to_string(param) + "[" + std::to_string(index) +
           "]: analytic " + std::to_string(analytic) + " vs numeric " +
           std::to_string(numeric) + " (" + std::to_string(coords_checked) +
           " coords)";
  }
};

using LossFn = std::function<double(const std::vector<Tensor<double>>&)>;

// coords_per_param == 0 checks every coordinate; otherwise that many are
// sampled per parameter (rng required). Params are perturbed in place and
// restored, so the caller's tensors come back bitwise unchanged.
inline GradCheckResult check_gradients(
    const LossFn& loss_fn, std::vector<Tensor<double>> params,
    const std::vector<Tensor<double>>& analytic, double eps = 1e-5,
    size_t coords_per_param = 0, Rng* rng = nullptr) {
  if (analytic.size() != params.size())
    throw Error("check_gradients: " + std::to_string(params.size()) +
                " params but " + std::to_string(analytic.size()) +
                " gradients");
  GradCheckResult result;
  for (size_t p = 0; p < params.size(); ++p) {
    if (!params[p].same_shape(analytic[p]))
      throw ShapeError("check_gradients: grad shape mismatch at param " +
                       std::to_string(p));
    std::vector<size_t> coords;
    if (coords_per_param == 0 || coords_per_param >= params[p].size()) {
      coords.resize(params[p].size());
      for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      if (!rng)
        throw Error("check_gradients: sampled coords need an rng");
      for (size_t i = 0; i < coords_per_param; ++i)
        coords.push_back(rng->uniform_index(params[p].size()));
    }
    for (size_t i : coords) {
      const double saved = params[p][i];
      params[p][i] = saved + eps;
      const double up = loss_fn(params);
      params[p][i] = saved - eps;
      const double down = loss_fn(params);
      params[p][i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[p][i];
      const double scale =
          std::max({1.0, std::fabs(a), std::fabs(numeric)});
      const double err = std::fabs(a - numeric) / scale;
      ++result.coords_checked;
      if (err > result.worst_err) {
        result.worst_err = err;
        result.analytic = a;
        result.numeric = numeric;
        result.param = p;
        result.index = i;
      }
    }
  }
  return result;
}

}  // namespace privpart
