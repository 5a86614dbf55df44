#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "ise3/diff.hpp"
#include "ise3/errors.hpp"

using namespace ise3;
using namespace ise3::diff;

namespace {

Tensor random_tensor(Tensor::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Weighted sum with fixed random weights turns any tensor into a scalar whose
// gradient exercises every output entry.
Var probe(const Var& x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(x.value().shape(), rng);
  return sum(mul(x, x.tape().constant(std::move(w))));
}

void check_primitive(const char* name, const ScalarFn& f, const std::vector<Tensor>& inputs) {
  const std::string label = name;
  CAPTURE(label);
  const GradCheckReport r = gradient_check(f, inputs, 1e-5);
  CHECK(r.entries > 0);
  CHECK(r.max_rel_error < 1e-6);
}

}  // namespace

TEST_CASE("primitive examples") {
  Tape t;
  Var z = t.constant(Tensor::matrix(1, 2, 0.0));
  Var s = softmax(z, 1);
  CHECK(s.value()[0] == 0.5);
  CHECK(s.value()[1] == 0.5);

  Var v = t.constant(Tensor(Tensor::Shape{2}, std::vector<double>{3.0, 4.0}));
  CHECK(sqrt_norm(v, 0.0).value().item() == 5.0);

  std::mt19937_64 rng(1);
  Tensor m = random_tensor({3, 4}, rng);
  Var I = t.constant(Tensor::from_matrix(RowMatrix::Identity(3, 3)));
  CHECK(matmul(I, t.constant(m)).value() == m);
}

TEST_CASE("every primitive matches central differences") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor a = random_tensor({3, 4}, rng);
    const Tensor b = random_tensor({3, 4}, rng);
    const Tensor row = random_tensor({1, 4}, rng);
    const Tensor col = random_tensor({3, 1}, rng);
    const Tensor sc = random_tensor({}, rng);
    const Tensor rhs = random_tensor({4, 2}, rng);
    const Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0);

    check_primitive("add", [](Tape&, std::span<const Var> x) { return probe(add(x[0], x[1]), 1); }, {a, b});
    check_primitive("add row", [](Tape&, std::span<const Var> x) { return probe(add(x[0], x[1]), 2); }, {a, row});
    check_primitive("sub col", [](Tape&, std::span<const Var> x) { return probe(sub(x[0], x[1]), 3); }, {a, col});
    check_primitive("mul", [](Tape&, std::span<const Var> x) { return probe(mul(x[0], x[1]), 4); }, {a, b});
    check_primitive("mul scalar", [](Tape&, std::span<const Var> x) { return probe(mul(x[0], x[1]), 5); }, {a, sc});
    check_primitive("scale", [](Tape&, std::span<const Var> x) { return probe(scale(x[0], -1.7), 6); }, {a});
    check_primitive("shift", [](Tape&, std::span<const Var> x) { return probe(shift(x[0], 0.3), 7); }, {a});
    check_primitive("matmul", [](Tape&, std::span<const Var> x) { return probe(matmul(x[0], x[1]), 8); }, {a, rhs});
    check_primitive("affine", [](Tape&, std::span<const Var> x) { return probe(affine(x[0], x[1], x[2]), 24); },
                    {a, rhs, random_tensor({1, 2}, rng)});
    check_primitive("concat0", [](Tape&, std::span<const Var> x) { return probe(concat({x[0], x[1]}, 0), 9); }, {a, row});
    check_primitive("concat1", [](Tape&, std::span<const Var> x) { return probe(concat({x[0], x[1]}, 1), 10); }, {a, col});
    check_primitive("slice0", [](Tape&, std::span<const Var> x) { return probe(slice(x[0], 0, 1, 3), 11); }, {a});
    check_primitive("slice1", [](Tape&, std::span<const Var> x) { return probe(slice(x[0], 1, 0, 2), 12); }, {a});
    check_primitive("sum", [](Tape&, std::span<const Var> x) { return scale(sum(x[0]), 2.0); }, {a});
    check_primitive("sum0", [](Tape&, std::span<const Var> x) { return probe(sum(x[0], 0), 13); }, {a});
    check_primitive("sum1", [](Tape&, std::span<const Var> x) { return probe(sum(x[0], 1), 14); }, {a});
    check_primitive("power", [](Tape&, std::span<const Var> x) { return probe(power(x[0], 4.0), 15); }, {a});
    check_primitive("power frac", [](Tape&, std::span<const Var> x) { return probe(power(x[0], 1.5), 16); }, {pos});
    check_primitive("sqrt_norm", [](Tape&, std::span<const Var> x) { return probe(sqrt_norm(x[0], 1e-8), 17); }, {a});
    check_primitive("exp", [](Tape&, std::span<const Var> x) { return probe(exp(x[0]), 18); }, {a});
    check_primitive("softmax1", [](Tape&, std::span<const Var> x) { return probe(softmax(x[0], 1), 19); }, {a});
    check_primitive("softmax0", [](Tape&, std::span<const Var> x) { return probe(softmax(x[0], 0), 20); }, {a});
    check_primitive("relu", [](Tape&, std::span<const Var> x) { return probe(relu(x[0]), 21); }, {a});
    check_primitive("stack", [](Tape&, std::span<const Var> x) {
      return probe(stack({slice(x[0], 0, 0, 1), slice(x[0], 0, 2, 3), x[1]}), 22);
    }, {a, row});
    check_primitive("gather_diff", [](Tape&, std::span<const Var> x) {
      const std::vector<std::size_t> i{0, 1, 2, 2}, j{1, 2, 0, 1};
      return probe(gather_diff(x[0], i, j), 23);
    }, {a});
  }
}

TEST_CASE("sph_basis gradients are exact") {
  std::mt19937_64 rng(5);
  const so3::BasisLayout layout(Fiber::uniform(2, 1), Fiber::uniform(2, 1));
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor rel = random_tensor({4, 3}, rng);
    check_primitive("sph_basis", [&layout](Tape&, std::span<const Var> x) { return probe(sph_basis(x[0], layout), 31); },
                    {rel});
  }

  // Constant basis on the z axis and direction-only dependence.
  Tape t;
  Var z = t.leaf(Tensor(Tensor::Shape{1, 3}, std::vector<double>{0.0, 0.0, 2.0}));
  const so3::BasisLayout scalar(Fiber{{0, 1}}, Fiber{{0, 1}});
  Gradients g = t.backward(sum(sph_basis(z, scalar)));
  CHECK(g.of(z).mat().norm() == 0.0);

  Tape t2;
  Tensor x0 = random_tensor({1, 3}, rng);
  Var x = t2.leaf(x0);
  Gradients g2 = t2.backward(probe(sph_basis(x, layout), 41));
  const double radial = g2.of(x).mat().row(0).dot(x0.mat().row(0));
  CHECK(std::abs(radial) < 1e-12);
}

TEST_CASE("sph_basis clamps degenerate rows") {
  Tape t;
  const so3::BasisLayout layout(Fiber{{1, 1}}, Fiber{{1, 1}});
  Var x = t.leaf(Tensor(Tensor::Shape{2, 3}, std::vector<double>{0, 0, 0, 1e-9, 0, 0}));
  Var b = sph_basis(x, layout);
  CHECK(t.clamp_events() == 2);
  CHECK(b.value().all_finite());
  Gradients g = t.backward(sum(b));
  CHECK(g.of(x).all_finite());
}

TEST_CASE("stop_gradient") {
  std::mt19937_64 rng(3);
  Tape t;
  Var x = t.leaf(random_tensor({2, 3}, rng));
  Var sg = stop_gradient(x);
  CHECK(sg.value() == x.value());
  Gradients g1 = t.backward(sum(sg));
  CHECK(g1.find(x) == nullptr);
  CHECK(g1.of(x).mat().norm() == 0.0);

  Gradients g2 = t.backward(sum(add(x, stop_gradient(x))));
  const Tensor gx = g2.of(x);
  for (double v : gx.values()) CHECK(v == 1.0);
}

TEST_CASE("backward examples") {
  std::mt19937_64 rng(4);
  Tape t;
  const Tensor w0 = random_tensor({2, 2}, rng);
  Var x = t.leaf(random_tensor({2, 2}, rng));
  Var w = t.constant(w0);
  CHECK(t.backward(sum(mul(w, x))).of(x) == w0);

  Var y = t.leaf(random_tensor({2, 2}, rng));
  Gradients g = t.backward(sum(exp(y)));
  CHECK(g.find(x) == nullptr);
  CHECK(g.of(x).mat().norm() == 0.0);

  CHECK_THROWS_AS(t.backward(exp(y)), ArgumentError);
}

TEST_CASE("fan-out gradients add up") {
  std::mt19937_64 rng(6);
  const Tensor x0 = random_tensor({3, 3}, rng);
  auto grad_of = [&](int which) {
    Tape t;
    Var x = t.leaf(x0);
    Var f = sum(power(x, 3.0));
    Var g = sum(exp(scale(x, 0.5)));
    Var root = which == 0 ? f : which == 1 ? g : add(f, g);
    return t.backward(root).of(x);
  };
  const Tensor a = grad_of(0), b = grad_of(1), c = grad_of(2);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(a[i] + b[i]).epsilon(1e-14));
}

TEST_CASE("identical tapes give bitwise-identical gradients") {
  std::mt19937_64 rng(7);
  const Tensor x0 = random_tensor({4, 3}, rng), w0 = random_tensor({3, 5}, rng);
  auto run = [&] {
    Tape t;
    Var x = t.leaf(x0), w = t.leaf(w0);
    Var y = softmax(relu(matmul(x, w)), 1);
    Gradients g = t.backward(probe(y, 99));
    return std::make_pair(g.of(x), g.of(w));
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("shape errors and checked mode") {
  Tape t(true);
  Var a = t.constant(Tensor::matrix(2, 3, 1.0));
  Var b = t.constant(Tensor::matrix(3, 2, 1.0));
  CHECK_THROWS_AS(add(a, b), ArgumentError);
  CHECK_THROWS_AS(matmul(a, a), ArgumentError);
  CHECK_THROWS_AS(slice(a, 1, 2, 4), ArgumentError);
  CHECK_THROWS_AS(concat({a, b}, 0), ArgumentError);
  CHECK_THROWS_AS(Tensor(Tensor::Shape{2, 2}, std::vector<double>{1.0}), ArgumentError);
  Var neg = t.constant(Tensor::matrix(1, 1, -1.0));
  CHECK_THROWS_AS(power(neg, 0.5), NumericError);

  Tape other;
  Var c = other.constant(Tensor::matrix(2, 3, 1.0));
  CHECK_THROWS_AS(add(a, c), ArgumentError);
}
