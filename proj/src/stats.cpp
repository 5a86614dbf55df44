#include "ise3/stats.hpp"

#include <cmath>

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "ise3/errors.hpp"

namespace ise3::stats {

namespace {

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // unbiased
  double n = 0.0;
};

Moments moments(std::span<const double> v) {
  Moments m;
  m.n = static_cast<double>(v.size());
  for (double x : v) m.mean += x;
  m.mean /= m.n;
  if (v.size() > 1) {
    for (double x : v) m.var += (x - m.mean) * (x - m.mean);
    m.var /= m.n - 1.0;
  }
  return m;
}

}  // namespace

Interval t_interval(std::span<const double> values) {
  if (values.empty()) throw ArgumentError("t_interval: no values");
  const Moments m = moments(values);
  Interval out{m.mean, std::nullopt, values.size()};
  if (values.size() < 2) return out;
  const double level = boost::math::cdf(boost::math::normal_distribution<double>(), 1.0);
  const double t = boost::math::quantile(boost::math::students_t_distribution<double>(m.n - 1.0), level);
  out.half_width = std::sqrt(m.var / m.n) * t;
  return out;
}

WelchResult welch_less(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw ArgumentError("welch_less: need at least two values per sample");
  const Moments ma = moments(a), mb = moments(b);
  const double va = ma.var / ma.n, vb = mb.var / mb.n;
  WelchResult r;
  const double se2 = va + vb;
  if (se2 == 0.0) {
    r.t = ma.mean < mb.mean ? -INFINITY : (ma.mean > mb.mean ? INFINITY : 0.0);
    r.dof = ma.n + mb.n - 2.0;
    r.p_less = ma.mean < mb.mean ? 0.0 : 1.0;
    return r;
  }
  r.t = (ma.mean - mb.mean) / std::sqrt(se2);
  r.dof = se2 * se2 / (va * va / (ma.n - 1.0) + vb * vb / (mb.n - 1.0));
  r.p_less = boost::math::cdf(boost::math::students_t_distribution<double>(r.dof), r.t);
  return r;
}

}  // namespace ise3::stats
