#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "skyrm/error.hpp"

namespace skyrm {

struct GradCheckOptions {
  double epsilon = 1e-3;
  double tolerance = 1e-3;
  // Check at most this many coordinates (sampled without replacement); 0 = all.
  std::size_t max_coords = 0;
  // Denominator floor, as a fraction of the largest |numeric| gradient, so that
  // coordinates with a vanishing gradient are judged on absolute error.
  double relative_floor = 1e-2;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool passed = false;
};

/// Central-difference check of `analytic` against d loss / d point.
///
/// `loss` is evaluated at copies of `point` with one coordinate moved by
/// +-epsilon. Works for float and double points; use double (the "shadow"
/// copy of a float computation) for the tight tolerances.
template <typename T>
GradCheckReport gradient_check(const std::function<double(std::span<const T>)>& loss,
                               std::span<const T> point, std::span<const T> analytic,
                               const GradCheckOptions& opts = {}) {
  if (point.size() != analytic.size())
    throw ShapeError("gradient_check: point has " + std::to_string(point.size()) +
                     " coords, analytic gradient " + std::to_string(analytic.size()));
  std::vector<std::size_t> coords(point.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (opts.max_coords != 0 && opts.max_coords < coords.size()) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opts.max_coords);
  }

  std::vector<T> x(point.begin(), point.end());
  std::vector<double> numeric(coords.size());
  for (std::size_t j = 0; j < coords.size(); ++j) {
    const std::size_t i = coords[j];
    const T saved = x[i];
    x[i] = static_cast<T>(saved + opts.epsilon);
    const double step_up = static_cast<double>(x[i]) - saved;
    const double up = loss(x);
    x[i] = static_cast<T>(saved - opts.epsilon);
    const double step_down = saved - static_cast<double>(x[i]);
    const double down = loss(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("gradient_check: non-finite loss at coordinate " + std::to_string(i));
    numeric[j] = (up - down) / (step_up + step_down);
  }

  double scale = 0.0;
  for (std::size_t j = 0; j < coords.size(); ++j)
    scale = std::max({scale, std::abs(numeric[j]), std::abs(static_cast<double>(analytic[coords[j]]))});
  const double floor = std::max(scale * opts.relative_floor, 1e-300);

  GradCheckReport report;
  report.checked = coords.size();
  for (std::size_t j = 0; j < coords.size(); ++j) {
    const double a = analytic[coords[j]];
    const double err = std::abs(a - numeric[j]);
    const double rel = err / std::max({std::abs(a), std::abs(numeric[j]), floor});
    report.max_abs_error = std::max(report.max_abs_error, err);
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = coords[j];
    }
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

/// Checks a 32-bit analytic gradient against central differences taken on a
/// 64-bit shadow of the computation. `loss64` must evaluate the same function
/// in double precision; the result measures the float backward pass alone,
/// free of float rounding noise in the difference quotient.
inline GradCheckReport gradient_check_shadow(
    const std::function<double(std::span<const double>)>& loss64, std::span<const float> point,
    std::span<const float> analytic, const GradCheckOptions& opts = {}) {
  std::vector<double> p(point.begin(), point.end());
  std::vector<double> a(analytic.begin(), analytic.end());
  return gradient_check<double>(loss64, p, a, opts);
}

}  // namespace skyrm
