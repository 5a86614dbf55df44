#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "ise3/equinet.hpp"
#include "ise3/errors.hpp"

using namespace ise3;
using namespace ise3::net;
using diff::RowMatrix;
using diff::Tape;
using diff::Tensor;
using diff::Var;

namespace {

Tensor random_tensor(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = n(rng);
  return t;
}

void randomize_heads(ModelParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& e : p.entries())
    if (e.name.ends_with("/head"))
      for (double& v : e.value.values()) v = u(rng);
}

RowMatrix rotate_rows(const Eigen::Ref<const RowMatrix>& x, const so3::Rotation& R) {
  return x * R.matrix().transpose();
}

// (E x k*D) edge outputs viewed as (E*k) x D rows so rotate_features applies.
RowMatrix rotate_edge_rows(const Tensor& t, const Fiber& fiber, const so3::Rotation& R) {
  const std::size_t D = fiber.dim();
  Eigen::Map<const RowMatrix> view(t.data(), t.size() / D, D);
  return rotate_features(view, fiber, R);
}

double max_abs(const Eigen::Ref<const RowMatrix>& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_blocks = 3;
  c.layers_per_block = 1;
  c.max_type = 1;
  c.channels = 2;
  c.radial_hidden = 4;
  return c;
}

}  // namespace

TEST_CASE("self_interaction") {
  std::mt19937_64 rng(1);
  const Fiber fiber{{0, 2}, {1, 3}, {2, 2}};
  Tape t;
  const Tensor f0 = random_tensor(5, fiber.dim(), rng);
  const Var f = t.constant(f0);
  std::vector<Var> eye;
  for (const auto& [l, m] : fiber.types()) eye.push_back(t.constant(Tensor::from_matrix(RowMatrix::Identity(m, m))));
  CHECK(self_interaction(f, fiber, fiber, eye).value() == f0);

  std::vector<Var> w;
  for (const auto& [l, m] : fiber.types()) w.push_back(t.constant(random_tensor(m, m, rng)));
  const Tensor y = self_interaction(f, fiber, fiber, w).value();
  for (int k = 0; k < 5; ++k) {
    const so3::Rotation R = so3::random_rotation(rng);
    const Var fr = t.constant(Tensor::from_matrix(rotate_features(f0.mat(), fiber, R)));
    const Tensor yr = self_interaction(fr, fiber, fiber, w).value();
    CHECK(max_abs(yr.mat() - rotate_features(y.mat(), fiber, R)) < 1e-10);
  }

  // Scalars only: an ordinary dense layer.
  const Fiber scalars{{0, 3}};
  const Fiber scalars_out{{0, 2}};
  const Tensor x0 = random_tensor(4, 3, rng), w0 = random_tensor(2, 3, rng);
  const Var ys = self_interaction(t.constant(x0), scalars, scalars_out, std::vector<Var>{t.constant(w0)});
  CHECK(max_abs(ys.value().mat() - x0.mat() * w0.mat().transpose()) < 1e-14);

  CHECK_THROWS_AS(self_interaction(f, fiber, fiber, std::vector<Var>{}), ArgumentError);

  const diff::GradCheckReport r = diff::gradient_check(
      [&fiber](Tape&, std::span<const Var> x) {
        return diff::sum(diff::power(self_interaction(x[0], fiber, fiber, x.subspan(1)), 2.0));
      },
      {f0, random_tensor(2, 2, rng), random_tensor(3, 3, rng), random_tensor(2, 2, rng)});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("edge_conv") {
  std::mt19937_64 rng(2);
  const Fiber fiber{{0, 2}, {1, 2}, {2, 2}};
  const so3::BasisLayout layout(fiber, fiber);
  const std::size_t P = radial_width(layout);
  const std::size_t n = 4, K = 3;
  const toy::ProblemInstance inst = toy::sample_instance(static_cast<int>(n), 5);

  Tape t;
  const BlockGeometry g = build_geometry(t.constant(Tensor::from_matrix(inst.positions)), inst.a, K, layout);
  const Tensor f0 = random_tensor(n, fiber.dim(), rng);
  const Tensor phi0 = random_tensor(n * K, 2 * P, rng);
  const Var f = t.constant(f0);

  const Var zero = edge_conv(g.basis, t.constant(Tensor::matrix(n * K, 2 * P)), f, g.src, layout, 2);
  CHECK(max_abs(zero.value().mat()) == 0.0);

  // Scalar-to-scalar kernel: phi * Y_00 * f.
  const Fiber s{{0, 1}};
  const so3::BasisLayout sl(s, s);
  const BlockGeometry gs = build_geometry(t.constant(Tensor::from_matrix(inst.positions)), inst.a, K, sl);
  const Tensor fs = random_tensor(n, 1, rng), ps = random_tensor(n * K, 1, rng);
  const Tensor ys = edge_conv(gs.basis, t.constant(ps), t.constant(fs), gs.src, sl, 1).value();
  const double y00 = 0.5 / std::sqrt(std::numbers::pi);
  for (std::size_t e = 0; e < n * K; ++e) CHECK(ys[e] == doctest::Approx(ps[e] * y00 * fs[gs.src[e]]).epsilon(1e-13));

  // Equivariance: rotating positions and features rotates every edge output.
  const Tensor y = edge_conv(g.basis, t.constant(phi0), f, g.src, layout, 2).value();
  for (int k = 0; k < 10; ++k) {
    const so3::Rotation R = so3::random_rotation(rng);
    const BlockGeometry gr =
        build_geometry(t.constant(Tensor::from_matrix(rotate_rows(inst.positions, R))), inst.a, K, layout);
    REQUIRE(gr.src == g.src);
    const Var fr = t.constant(Tensor::from_matrix(rotate_features(f0.mat(), fiber, R)));
    const Tensor yr = edge_conv(gr.basis, t.constant(phi0), fr, gr.src, layout, 2).value();
    Eigen::Map<const RowMatrix> view(yr.data(), yr.size() / fiber.dim(), fiber.dim());
    CHECK(max_abs(view - rotate_edge_rows(y, fiber, R)) < 1e-9);
  }

  const std::vector<std::size_t> src = g.src;
  const Tensor probe = random_tensor(n * K, 2 * fiber.dim(), rng);
  const diff::GradCheckReport r = diff::gradient_check(
      [&](Tape&, std::span<const Var> x) {
        const Var out = edge_conv(x[0], x[1], x[2], src, layout, 2);
        return diff::sum(diff::mul(out, out.tape().constant(probe)));
      },
      {g.basis.value(), phi0, f0}, 1e-3);  // linear in each input: a wide step only reduces roundoff
  CHECK(r.max_rel_error < 1e-6);
  CHECK_THROWS_AS(edge_conv(g.basis, t.constant(Tensor::matrix(n * K, P)), f, g.src, layout, 2), ArgumentError);
}

TEST_CASE("attention helpers") {
  std::mt19937_64 rng(3);
  const std::size_t n = 3, K = 2, D = 5;
  const Tensor q = random_tensor(n, D, rng), k = random_tensor(n * K, D, rng), w = random_tensor(n, K, rng);
  Tape t;
  const Tensor logits = edge_dot(t.constant(q), t.constant(k), K, 0.5).value();
  CHECK(logits.at(1, 1) == doctest::Approx(0.5 * q.mat().row(1).dot(k.mat().row(3))).epsilon(1e-14));
  const Tensor agg = segment_weighted_sum(t.constant(w), t.constant(k)).value();
  CHECK(max_abs(agg.mat().row(2) - (w.at(2, 0) * k.mat().row(4) + w.at(2, 1) * k.mat().row(5))) < 1e-14);

  const diff::GradCheckReport r1 = diff::gradient_check(
      [K](Tape&, std::span<const Var> x) { return diff::sum(diff::power(edge_dot(x[0], x[1], K, 0.3), 2.0)); }, {q, k});
  const diff::GradCheckReport r2 = diff::gradient_check(
      [](Tape&, std::span<const Var> x) { return diff::sum(diff::power(segment_weighted_sum(x[0], x[1]), 2.0)); },
      {w, k});
  CHECK(r1.max_rel_error < 1e-6);
  CHECK(r2.max_rel_error < 1e-6);
}

TEST_CASE("type_norm") {
  std::mt19937_64 rng(14);
  const Fiber fiber{{0, 2}, {1, 3}, {2, 1}};
  Tape t;
  const Tensor f0 = random_tensor(4, fiber.dim(), rng);
  const Tensor y = type_norm(t.constant(f0), fiber).value();
  for (std::size_t i = 0; i < 4; ++i)
    for (const auto& [l, m] : fiber.types()) {
      const auto in = f0.mat().row(i).segment(fiber.offset(l), m * (2 * l + 1));
      const auto out = y.mat().row(i).segment(fiber.offset(l), m * (2 * l + 1));
      // Mean squared channel norm of the output is one (up to eps).
      CHECK(out.squaredNorm() / m == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(max_abs(out - in * (out.norm() / in.norm())) < 1e-14);
    }
  CHECK(type_norm(t.constant(Tensor::matrix(2, fiber.dim())), fiber).value().mat().isZero(0.0));

  // Scaling the input leaves the output unchanged.
  Tensor big = f0;
  big.mat() *= 1e3;
  CHECK(max_abs(type_norm(t.constant(big), fiber).value().mat() - y.mat()) < 1e-7);

  for (int k = 0; k < 5; ++k) {
    const so3::Rotation R = so3::random_rotation(rng);
    const Tensor yr = type_norm(t.constant(Tensor::from_matrix(rotate_features(f0.mat(), fiber, R))), fiber).value();
    CHECK(max_abs(yr.mat() - rotate_features(y.mat(), fiber, R)) < 1e-12);
  }
  const Tensor probe = random_tensor(4, fiber.dim(), rng);
  const diff::GradCheckReport r = diff::gradient_check(
      [&](Tape&, std::span<const Var> x) {
        return diff::sum(diff::mul(type_norm(x[0], fiber), x[0].tape().constant(probe)));
      },
      {f0});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("norm_gate") {
  std::mt19937_64 rng(4);
  const Fiber fiber{{0, 2}, {1, 2}, {2, 1}};
  Tape t;
  const Tensor f0 = random_tensor(3, fiber.dim(), rng);
  const Tensor s0 = random_tensor(1, 3, rng), b0 = random_tensor(1, 3, rng);
  const Var scale = t.constant(s0), bias = t.constant(b0);

  Tensor zeros = f0;
  for (std::size_t c = fiber.offset(1); c < fiber.offset(1) + 3; ++c) zeros.at(0, c) = 0.0;
  const Tensor yz = norm_gate(t.constant(zeros), scale, bias, fiber).value();
  for (std::size_t c = fiber.offset(1); c < fiber.offset(1) + 3; ++c) CHECK(yz.at(0, c) == 0.0);

  const Tensor y = norm_gate(t.constant(f0), scale, bias, fiber).value();
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t c = 0; c < 2; ++c) CHECK(y.at(i, c) == std::max(f0.at(i, c), 0.0));
    // Each gated channel is a positive multiple of its input.
    for (const auto& [l, m] : fiber.types()) {
      if (l == 0) continue;
      const int d = 2 * l + 1;
      for (int ch = 0; ch < m; ++ch) {
        const auto in = f0.mat().row(i).segment(fiber.offset(l) + ch * d, d);
        const auto out = y.mat().row(i).segment(fiber.offset(l) + ch * d, d);
        const double ratio = out.norm() / in.norm();
        CHECK(ratio > 0.0);
        CHECK(max_abs(out - ratio * in) < 1e-14);
      }
    }
  }
  for (int k = 0; k < 5; ++k) {
    const so3::Rotation R = so3::random_rotation(rng);
    const Tensor yr =
        norm_gate(t.constant(Tensor::from_matrix(rotate_features(f0.mat(), fiber, R))), scale, bias, fiber).value();
    CHECK(max_abs(yr.mat() - rotate_features(y.mat(), fiber, R)) < 1e-10);
  }
  const diff::GradCheckReport r = diff::gradient_check(
      [&fiber](Tape&, std::span<const Var> x) {
        return diff::sum(diff::power(norm_gate(x[0], x[1], x[2], fiber), 2.0));
      },
      {f0, s0, b0});
  CHECK(r.max_rel_error < 1e-6);

  const Tensor wr = random_tensor(1, 2, rng);
  const diff::GradCheckReport r2 = diff::gradient_check(
      [&fiber](Tape&, std::span<const Var> x) { return diff::sum(diff::power(type_readout(x[0], x[1], fiber, 1), 2.0)); },
      {f0, wr});
  CHECK(r2.max_rel_error < 1e-6);
}

TEST_CASE("radial network") {
  std::mt19937_64 rng(5);
  ModelConfig cfg = ModelConfig::iterative();
  ModelParams p = init_params(cfg, 3);
  const toy::ProblemInstance inst = toy::sample_instance(10, 2);
  const Fiber fiber = cfg.hidden_fiber();
  const so3::BasisLayout layout(fiber, fiber);

  Tape t;
  BoundParams bp(t, p, false);
  const LayerParams lp = layer_params(bp, 0, 0, cfg);
  auto coefficients = [&](const toy::Positions& x) {
    const BlockGeometry g = build_geometry(t.constant(Tensor::from_matrix(x)), inst.a, 9, layout);
    return diff::affine(diff::relu(diff::affine(diff::relu(diff::affine(g.radial_in, lp.w1, lp.b1)), lp.w2, lp.b2)),
                        lp.w3, lp.b3)
        .value();
  };
  const Tensor c0 = coefficients(inst.positions);
  const Tensor c1 = coefficients(rotate_rows(inst.positions, so3::random_rotation(rng)));
  CHECK(max_abs(c0.mat() - c1.mat()) < 1e-12);

  // Zero weights give zero coefficients.
  Tape t2;
  const Var zero_in = t2.constant(random_tensor(6, 2, rng));
  const Var z = diff::affine(diff::relu(diff::affine(zero_in, t2.constant(Tensor::matrix(2, 3)), t2.constant(Tensor::matrix(1, 3)))),
                             t2.constant(Tensor::matrix(3, 4)), t2.constant(Tensor::matrix(1, 4)));
  CHECK(max_abs(z.value().mat()) == 0.0);

  // d coefficients / d r through the standardization, against finite differences.
  const diff::GradCheckReport r = diff::gradient_check(
      [&](Tape& tt, std::span<const Var> x) {
        const Var in = diff::concat({diff::scale(diff::shift(x[0], -kRadialCenter), 1.0 / kRadialScale),
                                     tt.constant(Tensor::matrix(5, 1, 0.3))},
                                    1);
        const Var h = diff::relu(diff::affine(in, tt.constant(p.get("block0/layer0/radial/w1")),
                                              tt.constant(p.get("block0/layer0/radial/b1"))));
        return diff::sum(diff::affine(h, tt.constant(p.get("block0/layer0/radial/w2")),
                                      tt.constant(p.get("block0/layer0/radial/b2"))));
      },
      {Tensor(Tensor::Shape{5, 1}, std::vector<double>{0.6, 1.1, 1.7, 2.3, 3.1})});
  CHECK(r.max_rel_error < 1e-6);
}

TEST_CASE("parameters") {
  const ModelConfig single = ModelConfig::single_pass(), iter = ModelConfig::iterative();
  CHECK(parameter_count(single) == parameter_count(iter));
  CHECK(init_params(iter, 9) == init_params(iter, 9));
  CHECK(!(init_params(iter, 9) == init_params(iter, 10)));
  CHECK(single.hidden_fiber().dim() == 36);
  CHECK(single.hidden_fiber().to_string() == "{0:4,1:4,2:4}");

  ModelConfig bad = iter;
  bad.heads = 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = iter;
  bad.max_type = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("attention layer and blocks") {
  std::mt19937_64 rng(6);
  const ModelConfig cfg = ModelConfig::iterative();
  ModelParams p = init_params(cfg, 11);
  randomize_heads(p, 1);
  const Fiber fiber = cfg.hidden_fiber();
  const so3::BasisLayout layout(fiber, fiber);
  const toy::ProblemInstance inst = toy::sample_instance(10, 21);
  const Tensor f0 = random_tensor(10, fiber.dim(), rng, 0.5);

  Tape t;
  BoundParams bp(t, p, false);
  const LayerParams lp = layer_params(bp, 0, 0, cfg);

  // A single neighbour takes all the weight.
  const BlockGeometry g1 = build_geometry(t.constant(Tensor::from_matrix(inst.positions)), inst.a, 1, layout);
  const LayerOutput o1 = attention_layer(g1, t.constant(f0), lp, fiber, layout);
  for (std::size_t i = 0; i < 10; ++i) CHECK(o1.attention.value().at(i, 0) == 1.0);

  const BlockGeometry g = build_geometry(t.constant(Tensor::from_matrix(inst.positions)), inst.a, 9, layout);
  const LayerOutput o = attention_layer(g, t.constant(f0), lp, fiber, layout);
  for (std::size_t i = 0; i < 10; ++i) CHECK(std::abs(o.attention.value().mat().row(i).sum() - 1.0) < 1e-12);

  for (int k = 0; k < 5; ++k) {
    const so3::Rotation R = so3::random_rotation(rng);
    const BlockGeometry gr =
        build_geometry(t.constant(Tensor::from_matrix(rotate_rows(inst.positions, R))), inst.a, 9, layout);
    const LayerOutput orot =
        attention_layer(gr, t.constant(Tensor::from_matrix(rotate_features(f0.mat(), fiber, R))), lp, fiber, layout);
    CHECK(max_abs(orot.features.value().mat() - rotate_features(o.features.value().mat(), fiber, R)) < 1e-8);
    CHECK(max_abs(orot.attention.value().mat() - o.attention.value().mat()) < 1e-10);
  }

  // Relabelling nodes relabels the outputs.
  std::vector<int> perm{3, 7, 0, 9, 1, 5, 2, 8, 6, 4};
  toy::Positions xp(10, 3);
  toy::Interactions ap(10, 10);
  RowMatrix fp(10, fiber.dim());
  for (int i = 0; i < 10; ++i) {
    xp.row(i) = inst.positions.row(perm[i]);
    fp.row(i) = f0.mat().row(perm[i]);
    for (int j = 0; j < 10; ++j) ap(i, j) = inst.a(perm[i], perm[j]);
  }
  const BlockGeometry gp = build_geometry(t.constant(Tensor::from_matrix(xp)), ap, 9, layout);
  const LayerOutput op = attention_layer(gp, t.constant(Tensor::from_matrix(fp)), lp, fiber, layout);
  for (int i = 0; i < 10; ++i)
    CHECK(max_abs(op.features.value().mat().row(i) - o.features.value().mat().row(perm[i])) < 1e-12);

  // Blocks: zero heads give zero updates, rotated inputs rotate the update.
  std::vector<LayerParams> layers;
  for (int l = 0; l < cfg.layers_per_block; ++l) layers.push_back(layer_params(bp, 0, l, cfg));
  const BlockOutput b = transformer_block(g, t.constant(f0), layers, fiber, layout);
  CHECK(b.features.value().cols() == 36);
  const so3::Rotation R = so3::random_rotation(rng);
  const BlockGeometry gr =
      build_geometry(t.constant(Tensor::from_matrix(rotate_rows(inst.positions, R))), inst.a, 9, layout);
  const BlockOutput br =
      transformer_block(gr, t.constant(Tensor::from_matrix(rotate_features(f0.mat(), fiber, R))), layers, fiber, layout);
  CHECK(max_abs(br.delta.value().mat() - rotate_rows(b.delta.value().mat(), R)) < 1e-8);
  CHECK(max_abs(b.delta.value().mat()) > 1e-6);

  const ModelParams zero_heads = init_params(cfg, 11);
  BoundParams bz(t, zero_heads, false);
  std::vector<LayerParams> zl;
  for (int l = 0; l < cfg.layers_per_block; ++l) zl.push_back(layer_params(bz, 0, l, cfg));
  CHECK(max_abs(transformer_block(g, t.constant(f0), zl, fiber, layout).delta.value().mat()) == 0.0);
}

TEST_CASE("forward pass") {
  const ModelConfig iter = ModelConfig::iterative();
  const toy::ProblemInstance inst = toy::sample_instance(10, 33);
  ModelParams p = init_params(iter, 4);

  // Zero heads: the trajectory stays at the centred input.
  {
    Tape t;
    BoundParams bp(t, p, false);
    const ForwardResult r = iterative_forward(t, inst, bp, iter);
    REQUIRE(r.positions.size() == 4);
    for (const Var& x : r.positions) CHECK(max_abs(x.value().mat() - toy::centered(inst.positions)) < 1e-15);
    CHECK(r.energy.value().item() == doctest::Approx(toy::total_energy(inst.positions, inst.a)).epsilon(1e-12));
  }

  // One block of an iterative model is exactly a single-pass model.
  randomize_heads(p, 8);
  ModelConfig one = iter;
  one.n_blocks = 1;
  ModelParams p1;
  for (const auto& e : p.entries())
    if (e.name.starts_with("block0/")) p1.add(e.name, e.value);
  {
    Tape t;
    BoundParams a(t, p, false), b(t, p1, false);
    const ForwardResult ra = iterative_forward(t, inst, a, iter);
    const ForwardResult rb = iterative_forward(t, inst, b, one);
    CHECK(ra.positions[1].value() == rb.positions[1].value());
    CHECK(ra.features[0].value() == rb.features[0].value());
  }

  // Neighborhoods shrink with K and are recomputed per block.
  ModelConfig k3 = iter;
  k3.K = 3;
  {
    Tape t;
    BoundParams bp(t, p, false);
    const ForwardResult r = iterative_forward(t, inst, bp, k3);
    REQUIRE(r.neighborhoods.size() == 3);
    for (const auto& nb : r.neighborhoods) CHECK(nb[0].size() == 3);
    CHECK(r.attention.size() == 12);
    CHECK(r.attention[0].value().cols() == 3);
  }
  ModelConfig k12 = iter;
  k12.K = 12;
  Tape t;
  BoundParams bp(t, p, false);
  CHECK_THROWS_AS(iterative_forward(t, inst, bp, k12), ConfigError);
}

TEST_CASE("full-model equivariance and translation invariance") {
  for (const ModelConfig& cfg : {ModelConfig::single_pass(), ModelConfig::iterative()}) {
    double worst_rot = 0.0, worst_trans = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      ModelParams p = init_params(cfg, seed);
      randomize_heads(p, seed + 100);
      const toy::ProblemInstance inst = toy::sample_instance(10, 500 + seed);
      std::mt19937_64 rng(seed);
      const so3::Rotation R = so3::random_rotation(rng);
      const Eigen::RowVector3d shift(0.7, -1.3, 2.1);
      const Fiber fiber = cfg.hidden_fiber();

      Tape t;
      BoundParams bp(t, p, false);
      auto run = [&](const toy::Positions& x) {
        return iterative_forward(t.constant(Tensor::from_matrix(x)), inst.a, bp, cfg, default_mode(cfg));
      };
      const ForwardResult base = run(inst.positions);
      toy::Positions rotated = rotate_rows(inst.positions, R);
      rotated.rowwise() += shift;
      toy::Positions moved = inst.positions;
      moved.rowwise() += shift;
      const ForwardResult rot = run(rotated);
      const ForwardResult tr = run(moved);
      for (std::size_t b = 0; b < base.deltas.size(); ++b) {
        worst_rot = std::max(worst_rot, max_abs(rot.deltas[b].value().mat() - rotate_rows(base.deltas[b].value().mat(), R)));
        worst_rot = std::max(worst_rot, max_abs(rot.features[b].value().mat() -
                                                rotate_features(base.features[b].value().mat(), fiber, R)));
        worst_trans = std::max(worst_trans, max_abs(tr.deltas[b].value().mat() - base.deltas[b].value().mat()));
        worst_trans = std::max(worst_trans, max_abs(tr.features[b].value().mat() - base.features[b].value().mat()));
      }
      for (std::size_t b = 0; b < base.positions.size(); ++b)
        worst_rot = std::max(worst_rot, max_abs(rot.positions[b].value().mat() -
                                                rotate_rows(base.positions[b].value().mat(), R)));
      for (std::size_t l = 0; l < base.attention.size(); ++l)
        worst_trans = std::max(worst_trans, max_abs(tr.attention[l].value().mat() - base.attention[l].value().mat()));
      worst_rot = std::max(worst_rot, std::abs(rot.energy.value().item() - base.energy.value().item()));
    }
    CAPTURE(cfg.n_blocks);
    CHECK(worst_rot < 1e-7);
    CHECK(worst_trans < 1e-10);
  }
}

TEST_CASE("full-model gradients match finite differences") {
  const ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 2);
  randomize_heads(p, 3);
  const toy::ProblemInstance inst = toy::sample_instance(3, 17);
  std::vector<Tensor> inputs{Tensor::from_matrix(inst.positions)};
  for (const auto& e : p.entries()) inputs.push_back(e.value);
  const diff::GradCheckReport r = diff::gradient_check(
      [&](Tape&, std::span<const Var> x) {
        BoundParams bp(p, std::vector<Var>(x.begin() + 1, x.end()));
        return iterative_forward(x[0], inst.a, bp, cfg, GeometryMode::differentiable).energy;
      },
      inputs, 3e-5);  // balances roundoff on an O(10) energy against curvature
  CHECK(r.entries == 9 + p.count());
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("basis-gradient ablation") {
  const ModelConfig cfg = ModelConfig::iterative();
  ModelParams p = init_params(cfg, 12);
  randomize_heads(p, 13);
  const toy::ProblemInstance inst = toy::sample_instance(10, 14);
  auto grads = [&](GeometryMode mode) {
    Tape t;
    BoundParams bp(t, p, true);
    const ForwardResult r = iterative_forward(t.constant(Tensor::from_matrix(inst.positions)), inst.a, bp, cfg, mode);
    return bp.gradients(t.backward(r.energy));
  };
  const auto stopped = grads(GeometryMode::stopped);
  const auto reference = grads(GeometryMode::constant);
  const auto full = grads(GeometryMode::differentiable);
  bool identical = true;
  double diff_max = 0.0;
  for (std::size_t k = 0; k < stopped.size(); ++k) {
    identical = identical && stopped[k] == reference[k];
    diff_max = std::max(diff_max, max_abs(full[k].mat() - stopped[k].mat()));
  }
  CHECK(identical);
  CHECK(diff_max > 1e-8);

  // A single block has no recomputed geometry: all modes agree.
  const ModelConfig single = ModelConfig::single_pass();
  ModelParams ps = init_params(single, 12);
  randomize_heads(ps, 13);
  auto grads1 = [&](GeometryMode mode) {
    Tape t;
    BoundParams bp(t, ps, true);
    const ForwardResult r = iterative_forward(t.constant(Tensor::from_matrix(inst.positions)), inst.a, bp, single, mode);
    return bp.gradients(t.backward(r.energy));
  };
  const auto a = grads1(GeometryMode::differentiable), b = grads1(GeometryMode::stopped);
  bool same = true;
  for (std::size_t k = 0; k < a.size(); ++k) same = same && a[k] == b[k];
  CHECK(same);
}
