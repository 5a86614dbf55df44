#include "ise3/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numbers>
#include <random>
#include <sstream>

#include <boost/math/quadrature/gauss.hpp>

#include "ise3/equinet.hpp"
#include "ise3/errors.hpp"
#include "ise3/optim.hpp"
#include "ise3/toysim.hpp"

namespace ise3::verify {

using diff::RowMatrix;
using diff::Tape;
using diff::Tensor;
using diff::Var;
using so3::Matrix;
using so3::Rotation;

namespace {

double max_abs(const Eigen::Ref<const RowMatrix>& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

Check below(std::string name, double observed, double threshold) {
  return {std::move(name), observed, threshold, observed < threshold};
}

Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Entries with |x| < 0.05 pushed away from zero so relu kinks stay outside the stencil.
Tensor away_from_zero(Tensor t) {
  for (double& v : t.values())
    if (std::abs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

// Linear functional with fixed random weights: every output entry reaches the gradient.
Var probe(const Var& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w(x.value().shape());
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& v : w.values()) v = u(rng);
  return diff::sum(diff::mul(x, x.tape().constant(std::move(w))));
}

void randomize_heads(net::ModelParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& e : p.entries())
    if (e.name.ends_with("/head"))
      for (double& v : e.value.values()) v = u(rng);
}

so3::CGTensor maybe_mutated(int lo, int li, int J, const Mutation& m) {
  so3::CGTensor cg = so3::clebsch_gordan(lo, li, J);
  if (m.flip_cg_sign && lo == 1 && li == 1 && J == 1) {
    auto it = std::max_element(cg.coeffs.begin(), cg.coeffs.end(),
                               [](double a, double b) { return std::abs(a) < std::abs(b); });
    *it = -*it;
  }
  return cg;
}

double dwell(double s) { return 4 * s * s * s - 2 * s + 0.1; }
double well(double s) { return s * s * s * s - s * s + 0.1 * s; }

double bisect(double lo, double hi) {
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if ((dwell(lo) < 0) == (dwell(mid) < 0)) lo = mid; else hi = mid;
  }
  return 0.5 * (lo + hi);
}

net::ModelConfig tiny_config() {
  net::ModelConfig c;
  c.n_blocks = 3;
  c.layers_per_block = 1;
  c.max_type = 1;
  c.channels = 2;
  c.radial_hidden = 4;
  return c;
}

}  // namespace

bool SuiteReport::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

const Check* SuiteReport::find(const std::string& name) const {
  for (const auto& c : checks)
    if (c.name == name) return &c;
  return nullptr;
}

std::string SuiteReport::to_string() const {
  std::ostringstream os;
  char buf[200];
  for (const auto& c : checks) {
    std::snprintf(buf, sizeof buf, "  %-4s %-56s observed %-11.3e threshold %.1e\n", c.pass ? "ok" : "FAIL", c.name.c_str(),
                  c.observed, c.threshold);
    os << buf;
  }
  os << suite << ": " << (passed() ? "PASS" : "FAIL") << "\n";
  return os.str();
}

SuiteReport so3_suite(int rotations, const Mutation& mutation) {
  SuiteReport rep{"so3", {}};
  constexpr int L = so3::kMaxDegree;

  // Product rule: Gauss-Legendre in cos(theta), uniform in phi.
  using Gauss = boost::math::quadrature::gauss<double, 24>;
  const auto& abscissa = Gauss::abscissa();
  const auto& weights = Gauss::weights();
  std::vector<std::pair<double, double>> zw;
  for (std::size_t k = 0; k < abscissa.size(); ++k) {
    zw.emplace_back(abscissa[k], weights[k]);
    if (abscissa[k] != 0.0) zw.emplace_back(-abscissa[k], weights[k]);
  }
  const int nphi = 4 * L + 2, count = so3::sh_count(L);
  Matrix gram = Matrix::Zero(count, count);
  std::vector<double> y(count);
  for (const auto& [z, w] : zw)
    for (int k = 0; k < nphi; ++k) {
      const double phi = 2 * std::numbers::pi * k / nphi, s = std::sqrt(1 - z * z);
      so3::sph_harm_all(L, so3::Vec3(s * std::cos(phi), s * std::sin(phi), z), y, {});
      const double wt = w * 2 * std::numbers::pi / nphi;
      for (int a = 0; a < count; ++a)
        for (int b = 0; b < count; ++b) gram(a, b) += wt * y[a] * y[b];
    }
  rep.checks.push_back(below("harmonic orthonormality (quadrature)", max_abs(gram - Matrix::Identity(count, count)), 1e-6));

  std::mt19937_64 rng(101);
  double composition = 0.0, cartesian = 0.0, harmonic_rotation = 0.0, basis_err = 0.0;
  const so3::Mat3 P = so3::cartesian_to_type1();
  const Fiber fiber = Fiber::uniform(2, 1);
  const so3::BasisLayout layout(fiber, fiber);
  std::map<std::tuple<int, int, int>, so3::CGTensor> cgs;
  for (const auto& b : layout.blocks())
    for (int J = b.J_min; J < b.J_min + b.J_count; ++J) cgs.emplace(std::tuple{b.l_out, b.l_in, J}, maybe_mutated(b.l_out, b.l_in, J, mutation));
  std::normal_distribution<double> normal;
  for (int t = 0; t < rotations; ++t) {
    const Rotation R1 = so3::random_rotation(rng), R2 = so3::random_rotation(rng);
    for (int l = 0; l <= L; ++l)
      composition = std::max(composition, max_abs(so3::wigner_d(l, R1 * R2) - so3::wigner_d(l, R1) * so3::wigner_d(l, R2)));
    cartesian = std::max(cartesian, max_abs(so3::wigner_d(1, R1) - P * R1.matrix() * P.transpose()));

    so3::Vec3 x(normal(rng), normal(rng), normal(rng));
    const so3::Vec3 rx = R1 * x;
    std::vector<double> y0(count), y1(count);
    so3::sph_harm_all(L, x, y0, {});
    so3::sph_harm_all(L, rx, y1, {});
    for (int J = 0; J <= L; ++J) {
      const Matrix D = so3::wigner_d(J, R1);
      const Eigen::Map<const Eigen::VectorXd> a(y0.data() + J * J, 2 * J + 1), b(y1.data() + J * J, 2 * J + 1);
      harmonic_rotation = std::max(harmonic_rotation, (b - D * a).cwiseAbs().maxCoeff());
    }
    for (const auto& [k, cg] : cgs) {
      const auto& [lo, li, J] = k;
      const Matrix lhs = so3::basis_from_cg(cg, rx);
      const Matrix rhs = so3::wigner_d(lo, R1) * so3::basis_from_cg(cg, x) * so3::wigner_d(li, R1).transpose();
      basis_err = std::max(basis_err, max_abs(lhs - rhs));
    }
  }
  rep.checks.push_back(below("wigner-D composition", composition, 1e-9));
  rep.checks.push_back(below("wigner-D degree-1 Cartesian equivalence", cartesian, 1e-9));
  rep.checks.push_back(below("harmonic rotation rule", harmonic_rotation, 1e-9));

  double ortho = 0.0;
  for (int lo = 0; lo <= 2; ++lo)
    for (int li = 0; li <= 2; ++li) {
      const int cols = (2 * lo + 1) * (2 * li + 1);
      Matrix all(cols, cols);
      int r = 0;
      for (int J = std::abs(lo - li); J <= lo + li; ++J) {
        const Matrix q = maybe_mutated(lo, li, J, mutation).as_matrix();
        all.middleRows(r, q.rows()) = q;
        r += static_cast<int>(q.rows());
      }
      ortho = std::max(ortho, max_abs(all * all.transpose() - Matrix::Identity(cols, cols)));
    }
  rep.checks.push_back(below("clebsch-gordan orthogonality", ortho, 1e-10));
  rep.checks.push_back(below("basis equivariance B(Rx) = D B(x) D^T", basis_err, 1e-9));
  return rep;
}

SuiteReport gradcheck_suite() {
  SuiteReport rep{"gradcheck", {}};
  constexpr double tol = 1e-5;
  std::mt19937_64 rng(77);
  auto add = [&](const std::string& name, const diff::ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5) {
    rep.checks.push_back(below(name, diff::gradient_check(f, inputs, h).max_rel_error, tol));
  };
  using S = std::span<const Var>;

  const Tensor a = random_tensor(3, 4, rng), b = random_tensor(3, 4, rng), row = random_tensor(1, 4, rng);
  const Tensor col = random_tensor(3, 1, rng), rhs = random_tensor(4, 2, rng), bias = random_tensor(1, 2, rng);
  const Tensor pos = random_tensor(3, 4, rng, 0.5, 2.0);
  Tensor sc(Tensor::Shape{}, std::vector<double>{0.7});
  add("add", [](Tape&, S x) { return probe(diff::add(x[0], x[1]), 1); }, {a, b});
  add("add (row broadcast)", [](Tape&, S x) { return probe(diff::add(x[0], x[1]), 2); }, {a, row});
  add("sub (column broadcast)", [](Tape&, S x) { return probe(diff::sub(x[0], x[1]), 3); }, {a, col});
  add("mul", [](Tape&, S x) { return probe(diff::mul(x[0], x[1]), 4); }, {a, b});
  add("mul (scalar)", [](Tape&, S x) { return probe(diff::mul(x[0], x[1]), 5); }, {a, sc});
  add("scale", [](Tape&, S x) { return probe(diff::scale(x[0], -1.7), 6); }, {a});
  add("shift", [](Tape&, S x) { return probe(diff::shift(x[0], 0.3), 7); }, {a});
  add("matmul", [](Tape&, S x) { return probe(diff::matmul(x[0], x[1]), 8); }, {a, rhs});
  add("affine", [](Tape&, S x) { return probe(diff::affine(x[0], x[1], x[2]), 9); }, {a, rhs, bias});
  add("concat", [](Tape&, S x) { return probe(diff::concat({x[0], x[1]}, 1), 10); }, {a, col});
  add("slice", [](Tape&, S x) { return probe(diff::slice(x[0], 1, 1, 3), 11); }, {a});
  add("sum", [](Tape&, S x) { return diff::scale(diff::sum(x[0]), 2.0); }, {a});
  add("sum (axis)", [](Tape&, S x) { return probe(diff::sum(x[0], 0), 12); }, {a});
  add("power", [](Tape&, S x) { return probe(diff::power(x[0], 1.5), 13); }, {pos});
  add("sqrt_norm", [](Tape&, S x) { return probe(diff::sqrt_norm(x[0], 1e-8), 14); }, {a});
  add("exp", [](Tape&, S x) { return probe(diff::exp(x[0]), 15); }, {a});
  add("softmax", [](Tape&, S x) { return probe(diff::softmax(x[0], 1), 16); }, {a});
  add("relu", [](Tape&, S x) { return probe(diff::relu(x[0]), 17); }, {away_from_zero(a)});
  add("stack", [](Tape&, S x) { return probe(diff::stack({x[0], x[1]}), 18); }, {a, b});
  add("gather_diff", [](Tape&, S x) {
    const std::vector<std::size_t> i{0, 1, 2, 2}, j{1, 2, 0, 1};
    return probe(diff::gather_diff(x[0], i, j), 19);
  }, {a});
  {
    const so3::BasisLayout layout(Fiber::uniform(2, 1), Fiber::uniform(2, 1));
    add("sph_basis", [&layout](Tape&, S x) { return probe(diff::sph_basis(x[0], layout), 20); }, {random_tensor(4, 3, rng)});
  }
  {
    // Identity forward, no gradient: FD through the op sees the downstream
    // function but the tape must report zero.
    Tape t;
    const Var x = t.leaf(a);
    const Var y = diff::stop_gradient(x);
    const double g = t.backward(probe(y, 21)).of(x).mat().cwiseAbs().maxCoeff();
    rep.checks.push_back({"stop_gradient (zero gradient, identity)", g + max_abs(y.value().mat() - a.mat()), 0.0,
                          g == 0.0 && y.value() == a});
  }

  // Layer ops on a small mixed fiber.
  const Fiber fiber{{0, 2}, {1, 2}, {2, 1}};
  const so3::BasisLayout layout(fiber, fiber);
  const std::size_t n = 4, K = 3, D = fiber.dim(), P = net::radial_width(layout);
  const toy::ProblemInstance inst = toy::sample_instance(static_cast<int>(n), 5);
  Tape gt;
  const net::BlockGeometry g =
      net::build_geometry(gt.constant(Tensor::from_matrix(inst.positions)), inst.a, K, layout);
  const Tensor f0 = random_tensor(n, D, rng), phi0 = random_tensor(n * K, 2 * P, rng);
  const std::vector<std::size_t> src = g.src;
  add("self_interaction", [&](Tape&, S x) { return probe(net::self_interaction(x[0], fiber, fiber, x.subspan(1)), 22); },
      {f0, random_tensor(2, 2, rng), random_tensor(2, 2, rng), random_tensor(1, 1, rng)});
  // Linear in each input, so a wide step costs nothing and removes roundoff.
  add("edge_conv", [&](Tape&, S x) { return probe(net::edge_conv(x[0], x[1], x[2], src, layout, 2), 23); },
      {g.basis.value(), phi0, f0}, 1e-3);
  add("edge_dot", [&](Tape&, S x) { return probe(net::edge_dot(x[0], x[1], K, 0.3), 24); },
      {f0, random_tensor(n * K, D, rng)});
  add("segment_weighted_sum", [&](Tape&, S x) { return probe(net::segment_weighted_sum(x[0], x[1]), 25); },
      {random_tensor(n, K, rng), random_tensor(n * K, D, rng)});
  add("type_norm", [&](Tape&, S x) { return probe(net::type_norm(x[0], fiber), 26); }, {f0});
  add("norm_gate", [&](Tape&, S x) { return probe(net::norm_gate(x[0], x[1], x[2], fiber), 27); },
      {away_from_zero(f0), random_tensor(1, 3, rng), random_tensor(1, 3, rng)});
  add("type_readout", [&](Tape&, S x) { return probe(net::type_readout(x[0], x[1], fiber, 1), 28); },
      {f0, random_tensor(1, 2, rng)});

  {
    const net::ModelConfig cfg = tiny_config();
    net::ModelParams p = net::init_params(cfg, 2);
    randomize_heads(p, 3);
    const toy::ProblemInstance small = toy::sample_instance(3, 17);
    std::vector<Tensor> inputs{Tensor::from_matrix(small.positions)};
    for (const auto& e : p.entries()) inputs.push_back(e.value);
    // Balances roundoff on an O(10) energy against curvature.
    add("full 3-block model (positions + all parameters)", [&](Tape&, S x) {
      net::BoundParams bp(p, std::vector<Var>(x.begin() + 1, x.end()));
      return net::iterative_forward(x[0], small.a, bp, cfg, net::GeometryMode::differentiable).energy;
    }, inputs, 3e-5);
  }
  return rep;
}

SuiteReport equivariance_suite(int seeds) {
  SuiteReport rep{"equivariance", {}};
  double rot_delta = 0.0, rot_fiber = 0.0, rot_attention = 0.0, trans = 0.0;
  for (const bool iterative : {false, true}) {
    const net::ModelConfig cfg = iterative ? net::ModelConfig::iterative() : net::ModelConfig::single_pass();
    const Fiber fiber = cfg.hidden_fiber();
    for (int s = 0; s < seeds; ++s) {
      net::ModelParams p = net::init_params(cfg, 100 + s);
      randomize_heads(p, 200 + s);
      const toy::ProblemInstance inst = toy::sample_instance(10, 300 + s);
      std::mt19937_64 rng(400 + s);
      const Rotation R = so3::random_rotation(rng);
      std::uniform_real_distribution<double> u(-3.0, 3.0);
      const Eigen::RowVector3d shift(u(rng), u(rng), u(rng));

      auto run = [&](const toy::Positions& x, Tape& t) {
        const net::BoundParams bp(t, p, false);
        return net::iterative_forward(t.constant(Tensor::from_matrix(x)), inst.a, bp, cfg, net::default_mode(cfg));
      };
      Tape t0, t1, t2;
      const net::ForwardResult base = run(inst.positions, t0);
      const net::ForwardResult rotated = run(inst.positions * R.matrix().transpose(), t1);
      toy::Positions moved = inst.positions;
      moved.rowwise() += shift;
      const net::ForwardResult translated = run(moved, t2);

      for (std::size_t b = 0; b < base.deltas.size(); ++b) {
        const RowMatrix d = base.deltas[b].value().mat();
        rot_delta = std::max(rot_delta, max_abs(rotated.deltas[b].value().mat() - d * R.matrix().transpose()));
        rot_fiber = std::max(rot_fiber, max_abs(rotated.features[b].value().mat() -
                                                 net::rotate_features(base.features[b].value().mat(), fiber, R)));
        trans = std::max(trans, max_abs(translated.deltas[b].value().mat() - d));
        trans = std::max(trans, max_abs(translated.features[b].value().mat() - base.features[b].value().mat()));
      }
      for (std::size_t k = 0; k < base.attention.size(); ++k)
        rot_attention = std::max(rot_attention, max_abs(rotated.attention[k].value().mat() - base.attention[k].value().mat()));
    }
  }
  rep.checks.push_back(below("rotation: position updates", rot_delta, 1e-7));
  rep.checks.push_back(below("rotation: hidden fibers", rot_fiber, 1e-7));
  rep.checks.push_back(below("rotation: attention weights invariant", rot_attention, 1e-7));
  rep.checks.push_back(below("translation invariance", trans, 1e-10));
  return rep;
}

SuiteReport potential_suite() {
  SuiteReport rep{"potential", {}};
  const double s_star = bisect(-2.0, -0.5), s_barrier = bisect(-0.2, 0.3), s_plus = bisect(0.3, 2.0);
  const double p_min = -well(s_star);
  const toy::PotentialSpec& spec = toy::PotentialSpec::get();
  rep.checks.push_back(below("library stationary points vs oracle",
                             std::max({std::abs(spec.s_global - s_star), std::abs(spec.s_barrier - s_barrier),
                                       std::abs(spec.s_local - s_plus), std::abs(spec.p_min - p_min)}),
                             1e-12));
  rep.checks.push_back(below("|p_min - 0.32190|", std::abs(p_min - 0.32190), 1e-4));
  rep.checks.push_back(below("|s* - (-0.73091)|", std::abs(s_star + 0.73091), 1e-4));
  Check at_min = below("p(s*)", toy::pair_potential(1.5 + s_star, 0.5), 1e-6);
  at_min.pass = at_min.observed <= 1e-6;
  rep.checks.push_back(at_min);
  rep.checks.push_back(below("|p(s+) - 0.14133|", std::abs(toy::pair_potential(1.5 + s_plus, 0.5) - 0.14133), 1e-3));
  // Double-well shape: a barrier between the two minima, the local one above zero.
  const bool shape = s_star < s_barrier && s_barrier < s_plus && well(s_barrier) > well(s_plus) && well(s_plus) > well(s_star);
  rep.checks.push_back({"double-well ordering of stationary values", shape ? 0.0 : 1.0, 0.5, shape});
  return rep;
}

SuiteReport ablation_suite() {
  SuiteReport rep{"ablation", {}};
  auto grads = [](const net::ModelConfig& cfg, const net::ModelParams& p, const toy::ProblemInstance& inst,
                  net::GeometryMode mode) {
    Tape t;
    const net::BoundParams bp(t, p, true);
    const net::ForwardResult fr = net::iterative_forward(t.constant(Tensor::from_matrix(inst.positions)), inst.a, bp, cfg, mode);
    return bp.gradients(t.backward(fr.energy));
  };
  auto max_diff = [](const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
    double d = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) d = std::max(d, max_abs(a[k].mat() - b[k].mat()));
    return d;
  };
  auto bitwise = [](const std::vector<Tensor>& a, const std::vector<Tensor>& b) { return a == b; };

  net::ModelConfig cfg = net::ModelConfig::iterative();
  net::ModelParams p = net::init_params(cfg, 31);
  randomize_heads(p, 32);
  const toy::ProblemInstance inst = toy::sample_instance(10, 33);
  const auto stopped = grads(cfg, p, inst, net::GeometryMode::stopped);
  const auto constant = grads(cfg, p, inst, net::GeometryMode::constant);
  const auto full = grads(cfg, p, inst, net::GeometryMode::differentiable);
  const bool same = bitwise(stopped, constant);
  rep.checks.push_back({"no basis gradients == constant-basis reference (bitwise)", max_diff(stopped, constant), 0.0, same});
  const double gap = max_diff(full, constant);
  rep.checks.push_back({"basis gradients change some parameter gradient (> 1e-8)", gap, 1e-8, gap > 1e-8});

  net::ModelConfig single = net::ModelConfig::single_pass();
  net::ModelParams ps = net::init_params(single, 34);
  randomize_heads(ps, 35);
  const auto s0 = grads(single, ps, inst, net::GeometryMode::stopped);
  const auto s1 = grads(single, ps, inst, net::GeometryMode::differentiable);
  rep.checks.push_back({"single pass unaffected by the flag (bitwise)", max_diff(s0, s1), 0.0, bitwise(s0, s1)});
  return rep;
}

SuiteReport gd_suite(double tol) {
  SuiteReport rep{"gd", {}};
  const double a = 0.5;
  const double s_star = bisect(-2.0, -0.5);
  toy::Positions x = toy::Positions::Zero(2, 3);
  x(1, 0) = a + 1.0;  // s = 0
  toy::Interactions A = toy::Interactions::Zero(2, 2);
  A(0, 1) = A(1, 0) = a;
  optim::GDConfig c;
  c.update_norm_tol = tol;
  const optim::GDResult r = optim::gd_refine(x, A, c);
  const double dist = (r.positions.row(0) - r.positions.row(1)).norm();
  rep.checks.push_back(below("|distance - (a + 1 + s*)|", std::abs(dist - (a + 1.0 + s_star)), 1e-3));
  rep.checks.push_back(below("final energy", r.energy, 1e-5));
  rep.checks.push_back({"converged before max_iters", r.converged ? 0.0 : 1.0, 0.5, r.converged});
  return rep;
}

std::vector<std::string> suite_names() { return {"so3", "gradcheck", "equivariance", "potential", "ablation", "gd"}; }

SuiteReport run_suite(const std::string& name) {
  if (name == "so3") return so3_suite();
  if (name == "gradcheck") return gradcheck_suite();
  if (name == "equivariance") return equivariance_suite();
  if (name == "potential") return potential_suite();
  if (name == "ablation") return ablation_suite();
  if (name == "gd") return gd_suite(kAnalyticGdTol);
  throw ArgumentError("unknown suite '" + name + "'");
}

}  // namespace ise3::verify
