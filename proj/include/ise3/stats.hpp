#pragma once

#include <optional>
#include <span>

namespace ise3::stats {

/// Mean of repeated runs with a 1-sigma Student-t interval: half-width
/// s / sqrt(n) * t_{Phi(1), n-1}. Absent for a single run.
struct Interval {
  double mean = 0.0;
  std::optional<double> half_width;
  std::size_t runs = 0;
};

/// Throws ArgumentError on an empty sample.
Interval t_interval(std::span<const double> values);

struct WelchResult {
  double t = 0.0;
  double dof = 0.0;
  /// P(T <= t) under equal means: small when mean(a) < mean(b).
  double p_less = 1.0;
};

/// One-sided Welch test of mean(a) < mean(b). Needs two values per sample.
/// With both variances zero the p-value is 0 or 1 from the sign of the gap.
WelchResult welch_less(std::span<const double> a, std::span<const double> b);

}  // namespace ise3::stats
