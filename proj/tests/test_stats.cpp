#include <cmath>
#include <vector>

#include "doctest.h"
#include "ise3/errors.hpp"
#include "ise3/stats.hpp"

using namespace ise3;
using namespace ise3::stats;

namespace {

// Closed forms of the Student t distribution for 2 and 4 degrees of freedom.
double t2_quantile(double p) { return (2 * p - 1) / std::sqrt(2 * p * (1 - p)); }
double t4_cdf(double t) {
  const double q = 1 + t * t / 4;
  return 0.5 + 0.375 * (t / std::sqrt(q)) * (1 - t * t / (12 * q));
}

}  // namespace

TEST_CASE("one-sigma interval of three runs") {
  const std::vector<double> v{1, 2, 3};
  const Interval iv = t_interval(v);
  CHECK(iv.mean == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(iv.runs == 3);
  REQUIRE(iv.half_width);
  const double phi1 = 0.5 * std::erfc(-1 / std::sqrt(2.0));
  CHECK(*iv.half_width == doctest::Approx(1 / std::sqrt(3.0) * t2_quantile(phi1)).epsilon(1e-12));
}

TEST_CASE("single run has no interval, empty sample throws") {
  const std::vector<double> one{0.25};
  const Interval iv = t_interval(one);
  CHECK(iv.mean == 0.25);
  CHECK_FALSE(iv.half_width);
  CHECK_THROWS_AS(t_interval(std::vector<double>{}), ArgumentError);
}

TEST_CASE("constant sample has zero width") {
  const std::vector<double> v{0.5, 0.5, 0.5, 0.5};
  CHECK(*t_interval(v).half_width == 0.0);
}

TEST_CASE("welch one-sided test against a closed form") {
  // Equal sizes and variances: 4 degrees of freedom.
  const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
  const WelchResult w = welch_less(a, b);
  CHECK(w.t == doctest::Approx(-3 / std::sqrt(2.0 / 3)).epsilon(1e-12));
  CHECK(w.dof == doctest::Approx(4.0).epsilon(1e-12));
  CHECK(w.p_less == doctest::Approx(t4_cdf(w.t)).epsilon(1e-10));
  CHECK(w.p_less < 0.05);
  const WelchResult r = welch_less(b, a);
  CHECK(r.p_less == doctest::Approx(1 - w.p_less).epsilon(1e-10));
}

TEST_CASE("welch degenerate cases") {
  const std::vector<double> a{1, 1}, b{2, 2};
  CHECK(welch_less(a, b).p_less == 0.0);
  CHECK(welch_less(b, a).p_less == 1.0);
  CHECK_THROWS_AS(welch_less(std::vector<double>{1}, b), ArgumentError);
}
