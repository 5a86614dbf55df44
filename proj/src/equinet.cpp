#include "ise3/equinet.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include "ise3/errors.hpp"

namespace ise3::net {

using diff::GradSink;
using diff::Tape;
using diff::Tensor;
using diff::Var;

// ---------------------------------------------------------------- config and parameters

ModelConfig ModelConfig::single_pass() {
  ModelConfig c;
  c.n_blocks = 1;
  c.layers_per_block = 12;
  return c;
}

ModelConfig ModelConfig::iterative() {
  ModelConfig c;
  c.n_blocks = 3;
  c.layers_per_block = 4;
  return c;
}

void ModelConfig::validate() const {
  if (n_blocks < 1) throw ConfigError("model: n_blocks must be at least 1");
  if (layers_per_block < 1) throw ConfigError("model: layers_per_block must be at least 1");
  if (max_type < 1 || 2 * max_type > so3::kMaxDegree)
    throw ConfigError("model: max_type must lie in [1, " + std::to_string(so3::kMaxDegree / 2) + "]");
  if (channels < 1) throw ConfigError("model: channels must be at least 1");
  if (heads != 1) throw ConfigError("model: only single-head attention is supported");
  if (radial_hidden < 1) throw ConfigError("model: radial_hidden must be at least 1");
  if (K < 0) throw ConfigError("model: K must be non-negative (0 = fully connected)");
}

void ModelParams::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ArgumentError("params: duplicate entry " + name);
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value)});
}

std::size_t ModelParams::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ArgumentError("params: no entry named " + name);
  return it->second;
}

const Tensor& ModelParams::get(const std::string& name) const { return entries_[index_of(name)].value; }
Tensor& ModelParams::get(const std::string& name) { return entries_[index_of(name)].value; }

std::size_t ModelParams::count() const {
  std::size_t c = 0;
  for (const auto& e : entries_) c += e.value.size();
  return c;
}

bool ModelParams::operator==(const ModelParams& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t k = 0; k < entries_.size(); ++k)
    if (entries_[k].name != other.entries_[k].name || !(entries_[k].value == other.entries_[k].value)) return false;
  return true;
}

namespace {

std::string prefix(int block, int layer) {
  return "block" + std::to_string(block) + "/layer" + std::to_string(layer) + "/";
}

std::size_t gated_channels(const Fiber& fiber) {
  std::size_t c = 0;
  for (const auto& [l, m] : fiber.types())
    if (l > 0) c += m;
  return c;
}

}  // namespace

std::size_t radial_width(const so3::BasisLayout& layout) {
  std::size_t w = 0;
  for (const auto& b : layout.blocks())
    w += static_cast<std::size_t>(b.J_count) * layout.fiber_out().multiplicity(b.l_out) *
         layout.fiber_in().multiplicity(b.l_in);
  return w;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const Fiber fiber = config.hidden_fiber();
  const so3::BasisLayout layout(fiber, fiber);
  const std::size_t H = config.radial_hidden;
  const std::size_t P = radial_width(layout);
  const std::size_t C = gated_channels(fiber);
  std::mt19937_64 rng(seed);

  auto uniform = [&rng](std::size_t rows, std::size_t cols, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.values()) v = u(rng);
    return t;
  };

  ModelParams p;
  for (int b = 0; b < config.n_blocks; ++b)
    for (int l = 0; l < config.layers_per_block; ++l) {
      const std::string pre = prefix(b, l);
      p.add(pre + "radial/w1", uniform(2, H, 2));
      p.add(pre + "radial/b1", Tensor::matrix(1, H));
      p.add(pre + "radial/w2", uniform(H, H, H));
      p.add(pre + "radial/b2", Tensor::matrix(1, H));
      p.add(pre + "radial/w3", uniform(H, 2 * P, H));
      p.add(pre + "radial/b3", Tensor::matrix(1, 2 * P));
      for (const auto& [t, m] : fiber.types()) p.add(pre + "query/" + std::to_string(t), uniform(m, m, m));
      for (const auto& [t, m] : fiber.types()) p.add(pre + "skip/" + std::to_string(t), uniform(m, m, m));
      p.add(pre + "gate/scale", Tensor::matrix(1, C, 1.0));
      p.add(pre + "gate/bias", Tensor::matrix(1, C));
      p.add(pre + "head", Tensor::matrix(1, fiber.multiplicity(1)));
    }
  return p;
}

std::size_t parameter_count(const ModelConfig& config) { return init_params(config, 0).count(); }

BoundParams::BoundParams(Tape& tape, const ModelParams& params, bool trainable) : params_(&params) {
  vars_.reserve(params.size());
  for (const auto& e : params.entries()) vars_.push_back(trainable ? tape.leaf(e.value) : tape.constant(e.value));
}

BoundParams::BoundParams(const ModelParams& params, std::vector<Var> vars) : params_(&params), vars_(std::move(vars)) {
  if (vars_.size() != params.size()) throw ArgumentError("params: expected one tape value per entry");
  for (std::size_t k = 0; k < vars_.size(); ++k)
    if (!vars_[k].value().same_shape(params.entries()[k].value))
      throw ArgumentError("params: shape mismatch for " + params.entries()[k].name);
}

const Var& BoundParams::get(const std::string& name) const { return vars_[params_->index_of(name)]; }

std::vector<Tensor> BoundParams::gradients(const diff::Gradients& g) const {
  std::vector<Tensor> out;
  out.reserve(vars_.size());
  for (const Var& v : vars_) out.push_back(g.of(v));
  return out;
}

LayerParams layer_params(const BoundParams& p, int block, int layer, const ModelConfig& config) {
  const std::string pre = prefix(block, layer);
  LayerParams lp;
  lp.w1 = p.get(pre + "radial/w1");
  lp.b1 = p.get(pre + "radial/b1");
  lp.w2 = p.get(pre + "radial/w2");
  lp.b2 = p.get(pre + "radial/b2");
  lp.w3 = p.get(pre + "radial/w3");
  lp.b3 = p.get(pre + "radial/b3");
  const Fiber fiber = config.hidden_fiber();
  for (const auto& [t, m] : fiber.types()) {
    lp.query.push_back(p.get(pre + "query/" + std::to_string(t)));
    lp.skip.push_back(p.get(pre + "skip/" + std::to_string(t)));
  }
  lp.gate_scale = p.get(pre + "gate/scale");
  lp.gate_bias = p.get(pre + "gate/bias");
  lp.head = p.get(pre + "head");
  return lp;
}

// ---------------------------------------------------------------- fused ops

namespace {

void require_cols(const Tensor& t, std::size_t cols, const char* op, const char* what) {
  if (t.rank() != 2 || t.cols() != cols)
    throw ArgumentError(std::string(op) + ": " + what + " has shape " + t.shape_string() + ", expected " +
                        std::to_string(cols) + " columns");
}

}  // namespace

Var self_interaction(const Var& f, const Fiber& fin, const Fiber& fout, std::span<const Var> weights) {
  const Tensor& fv = f.value();
  require_cols(fv, fin.dim(), "self_interaction", "input");
  struct Map {
    std::size_t in_off, out_off;
    int mi, mo, d;
  };
  std::vector<Map> maps;
  for (const auto& [l, mo] : fout.types()) {
    if (!fin.has(l)) continue;
    maps.push_back({fin.offset(l), fout.offset(l), fin.multiplicity(l), mo, 2 * l + 1});
  }
  if (weights.size() != maps.size())
    throw ArgumentError("self_interaction: expected " + std::to_string(maps.size()) + " weight matrices, got " +
                        std::to_string(weights.size()));
  for (std::size_t t = 0; t < maps.size(); ++t) {
    const Tensor& w = weights[t].value();
    if (w.rank() != 2 || w.rows() != static_cast<std::size_t>(maps[t].mo) ||
        w.cols() != static_cast<std::size_t>(maps[t].mi))
      throw ArgumentError("self_interaction: weight " + std::to_string(t) + " has shape " + w.shape_string());
  }

  const std::size_t n = fv.rows(), Din = fin.dim(), Dout = fout.dim();
  Tensor out = Tensor::matrix(n, Dout);
  for (std::size_t t = 0; t < maps.size(); ++t) {
    const Map& m = maps[t];
    const Tensor& w = weights[t].value();
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = fv.data() + i * Din + m.in_off;
      double* y = out.data() + i * Dout + m.out_off;
      for (int co = 0; co < m.mo; ++co)
        for (int ci = 0; ci < m.mi; ++ci) {
          const double c = w[co * m.mi + ci];
          for (int a = 0; a < m.d; ++a) y[co * m.d + a] += c * x[ci * m.d + a];
        }
    }
  }

  std::vector<Var> parents{f};
  parents.insert(parents.end(), weights.begin(), weights.end());
  return f.tape().record("self_interaction", std::move(out), parents,
                         [parents, maps, n, Din, Dout](const Tensor& g, GradSink& s) {
                           const Tensor& fv = parents[0].value();
                           Tensor* gf = s[0];
                           for (std::size_t t = 0; t < maps.size(); ++t) {
                             const Map& m = maps[t];
                             const Tensor& w = parents[t + 1].value();
                             Tensor* gw = s[t + 1];
                             for (std::size_t i = 0; i < n; ++i) {
                               const double* x = fv.data() + i * Din + m.in_off;
                               const double* gy = g.data() + i * Dout + m.out_off;
                               for (int co = 0; co < m.mo; ++co)
                                 for (int ci = 0; ci < m.mi; ++ci) {
                                   if (gw) {
                                     double acc = 0.0;
                                     for (int a = 0; a < m.d; ++a) acc += gy[co * m.d + a] * x[ci * m.d + a];
                                     (*gw)[co * m.mi + ci] += acc;
                                   }
                                   if (gf) {
                                     const double c = w[co * m.mi + ci];
                                     double* gx = gf->data() + i * Din + m.in_off;
                                     for (int a = 0; a < m.d; ++a) gx[ci * m.d + a] += c * gy[co * m.d + a];
                                   }
                                 }
                             }
                           }
                         });
}

namespace {

struct ConvBlock;

// Per-edge kernels for one (l_in, l_out) block, sized at compile time.
using ConvForward = void (*)(const ConvBlock&, const double* B, const double* x, const double* phi, std::size_t P,
                             int kernels, double* y, std::size_t Dout);
using ConvBackward = void (*)(const ConvBlock&, const double* B, const double* x, const double* phi, std::size_t P,
                              int kernels, const double* gy, std::size_t Dout, double* gB, double* gx, double* gphi);

// One kernel block of edge_conv with all offsets resolved.
struct ConvBlock {
  std::size_t basis_off, phi_off, in_off, out_off;
  int J_count, mi, mo;
  ConvForward forward;
  ConvBackward backward;
};

constexpr int kMaxChannelsScratch = 64;

template <int DI, int DO>
inline void project(int mi, const double* Bj, const double* x, double* G) {
  for (int ci = 0; ci < mi; ++ci)
    for (int a = 0; a < DO; ++a) {
      double acc = 0.0;
      for (int b = 0; b < DI; ++b) acc += Bj[a * DI + b] * x[ci * DI + b];
      G[ci * DO + a] = acc;
    }
}

template <int DI, int DO>
void conv_forward(const ConvBlock& c, const double* B, const double* x, const double* phi, std::size_t P, int kernels,
                  double* y, std::size_t Dout) {
  double G[kMaxChannelsScratch * DO];
  for (int j = 0; j < c.J_count; ++j) {
    project<DI, DO>(c.mi, B + c.basis_off + j * DI * DO, x + c.in_off, G);
    for (int k = 0; k < kernels; ++k) {
      const double* Phi = phi + k * P + c.phi_off + static_cast<std::size_t>(j) * c.mo * c.mi;
      double* yy = y + k * Dout + c.out_off;
      for (int co = 0; co < c.mo; ++co) {
        double acc[DO] = {};
        for (int ci = 0; ci < c.mi; ++ci) {
          const double w = Phi[co * c.mi + ci];
          for (int a = 0; a < DO; ++a) acc[a] += w * G[ci * DO + a];
        }
        for (int a = 0; a < DO; ++a) yy[co * DO + a] += acc[a];
      }
    }
  }
}

template <int DI, int DO>
void conv_backward(const ConvBlock& c, const double* B, const double* x, const double* phi, std::size_t P, int kernels,
                   const double* gy, std::size_t Dout, double* gB, double* gx, double* gphi) {
  double G[kMaxChannelsScratch * DO];
  double gG[kMaxChannelsScratch * DO];
  for (int j = 0; j < c.J_count; ++j) {
    const double* Bj = B + c.basis_off + j * DI * DO;
    project<DI, DO>(c.mi, Bj, x + c.in_off, G);
    std::fill(gG, gG + c.mi * DO, 0.0);
    for (int k = 0; k < kernels; ++k) {
      const std::size_t poff = k * P + c.phi_off + static_cast<std::size_t>(j) * c.mo * c.mi;
      const double* Phi = phi + poff;
      const double* gyy = gy + k * Dout + c.out_off;
      for (int co = 0; co < c.mo; ++co) {
        const double* gr = gyy + co * DO;
        for (int ci = 0; ci < c.mi; ++ci) {
          const double* Gr = G + ci * DO;
          if (gphi) {
            double acc = 0.0;
            for (int a = 0; a < DO; ++a) acc += gr[a] * Gr[a];
            gphi[poff + co * c.mi + ci] += acc;
          }
          const double w = Phi[co * c.mi + ci];
          for (int a = 0; a < DO; ++a) gG[ci * DO + a] += w * gr[a];
        }
      }
    }
    if (gx) {
      double* gxx = gx + c.in_off;
      for (int ci = 0; ci < c.mi; ++ci)
        for (int b = 0; b < DI; ++b) {
          double acc = 0.0;
          for (int a = 0; a < DO; ++a) acc += gG[ci * DO + a] * Bj[a * DI + b];
          gxx[ci * DI + b] += acc;
        }
    }
    if (gB) {
      double* gBj = gB + c.basis_off + j * DI * DO;
      const double* xx = x + c.in_off;
      for (int a = 0; a < DO; ++a)
        for (int b = 0; b < DI; ++b) {
          double acc = 0.0;
          for (int ci = 0; ci < c.mi; ++ci) acc += gG[ci * DO + a] * xx[ci * DI + b];
          gBj[a * DI + b] += acc;
        }
    }
  }
}

template <int LI, int LO>
void bind_kernels(ConvBlock& c) {
  c.forward = &conv_forward<2 * LI + 1, 2 * LO + 1>;
  c.backward = &conv_backward<2 * LI + 1, 2 * LO + 1>;
}

void bind(ConvBlock& c, int li, int lo) {
  switch (3 * li + lo) {
    case 0: return bind_kernels<0, 0>(c);
    case 1: return bind_kernels<0, 1>(c);
    case 2: return bind_kernels<0, 2>(c);
    case 3: return bind_kernels<1, 0>(c);
    case 4: return bind_kernels<1, 1>(c);
    case 5: return bind_kernels<1, 2>(c);
    case 6: return bind_kernels<2, 0>(c);
    case 7: return bind_kernels<2, 1>(c);
    case 8: return bind_kernels<2, 2>(c);
  }
  throw ArgumentError("edge_conv: feature types above 2 are not supported");
}

struct ConvPlan {
  std::vector<ConvBlock> blocks;
  std::size_t width, P, Din, Dout;
  int kernels;
};

std::shared_ptr<const ConvPlan> make_plan(const so3::BasisLayout& layout, int kernels) {
  auto plan = std::make_shared<ConvPlan>();
  const Fiber& fin = layout.fiber_in();
  const Fiber& fout = layout.fiber_out();
  std::size_t phi_off = 0;
  for (const auto& b : layout.blocks()) {
    if (b.l_in > 2 || b.l_out > 2) throw ArgumentError("edge_conv: feature types above 2 are not supported");
    ConvBlock c{b.offset, phi_off, fin.offset(b.l_in), fout.offset(b.l_out), b.J_count, fin.multiplicity(b.l_in),
                fout.multiplicity(b.l_out), nullptr, nullptr};
    if (c.mi > kMaxChannelsScratch) throw ArgumentError("edge_conv: too many channels per type");
    bind(c, b.l_in, b.l_out);
    phi_off += static_cast<std::size_t>(c.J_count) * c.mo * c.mi;
    plan->blocks.push_back(c);
  }
  plan->width = layout.size();
  plan->P = phi_off;
  plan->Din = fin.dim();
  plan->Dout = fout.dim();
  plan->kernels = kernels;
  return plan;
}

}  // namespace

Var edge_conv(const Var& basis, const Var& phi, const Var& f, std::span<const std::size_t> src,
              const so3::BasisLayout& layout, int kernels) {
  if (kernels < 1) throw ArgumentError("edge_conv: need at least one kernel");
  auto plan = make_plan(layout, kernels);
  const Tensor& bv = basis.value();
  const Tensor& pv = phi.value();
  const Tensor& fv = f.value();
  const std::size_t E = src.size();
  require_cols(bv, plan->width, "edge_conv", "basis");
  require_cols(pv, plan->P * kernels, "edge_conv", "radial coefficients");
  require_cols(fv, plan->Din, "edge_conv", "features");
  if (bv.rows() != E || pv.rows() != E)
    throw ArgumentError("edge_conv: " + std::to_string(E) + " edges but basis/coefficients have " +
                        std::to_string(bv.rows()) + "/" + std::to_string(pv.rows()) + " rows");
  for (std::size_t s : src)
    if (s >= fv.rows()) throw ArgumentError("edge_conv: source index out of range");

  const std::size_t out_w = plan->Dout * kernels;
  const std::size_t phi_w = plan->P * kernels;
  Tensor out = Tensor::matrix(E, out_w);
  for (std::size_t e = 0; e < E; ++e)
    for (const ConvBlock& c : plan->blocks)
      c.forward(c, bv.data() + e * plan->width, fv.data() + src[e] * plan->Din, pv.data() + e * phi_w, plan->P, kernels,
                out.data() + e * out_w, plan->Dout);

  std::vector<std::size_t> src_copy(src.begin(), src.end());
  return f.tape().record(
      "edge_conv", std::move(out), {basis, phi, f},
      [basis, phi, f, plan, src = std::move(src_copy)](const Tensor& g, GradSink& s) {
        Tensor* gB = s[0];
        Tensor* gP = s[1];
        Tensor* gF = s[2];
        const Tensor& bv = basis.value();
        const Tensor& pv = phi.value();
        const Tensor& fv = f.value();
        const std::size_t out_w = plan->Dout * plan->kernels;
        const std::size_t phi_w = plan->P * plan->kernels;
        for (std::size_t e = 0; e < src.size(); ++e)
          for (const ConvBlock& c : plan->blocks)
            c.backward(c, bv.data() + e * plan->width, fv.data() + src[e] * plan->Din, pv.data() + e * phi_w, plan->P,
                       plan->kernels, g.data() + e * out_w, plan->Dout, gB ? gB->data() + e * plan->width : nullptr,
                       gF ? gF->data() + src[e] * plan->Din : nullptr, gP ? gP->data() + e * phi_w : nullptr);
      });
}

Var edge_dot(const Var& q, const Var& keys, std::size_t K, double scale) {
  const Tensor& qv = q.value();
  const Tensor& kv = keys.value();
  if (qv.rank() != 2 || kv.rank() != 2 || qv.cols() != kv.cols() || kv.rows() != qv.rows() * K)
    throw ArgumentError("edge_dot: incompatible shapes " + qv.shape_string() + " and " + kv.shape_string() +
                        " for K = " + std::to_string(K));
  const std::size_t n = qv.rows(), D = qv.cols();
  Tensor out = Tensor::matrix(n, K);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      double acc = 0.0;
      const double* a = qv.data() + i * D;
      const double* b = kv.data() + (i * K + k) * D;
      for (std::size_t d = 0; d < D; ++d) acc += a[d] * b[d];
      out.at(i, k) = scale * acc;
    }
  return q.tape().record("edge_dot", std::move(out), {q, keys}, [q, keys, K, scale](const Tensor& g, GradSink& s) {
    const Tensor& qv = q.value();
    const Tensor& kv = keys.value();
    const std::size_t n = qv.rows(), D = qv.cols();
    Tensor* gq = s[0];
    Tensor* gk = s[1];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        const double c = scale * g.at(i, k);
        const std::size_t e = i * K + k;
        if (gq)
          for (std::size_t d = 0; d < D; ++d) gq->at(i, d) += c * kv.at(e, d);
        if (gk)
          for (std::size_t d = 0; d < D; ++d) gk->at(e, d) += c * qv.at(i, d);
      }
  });
}

Var segment_weighted_sum(const Var& w, const Var& values) {
  const Tensor& wv = w.value();
  const Tensor& vv = values.value();
  if (wv.rank() != 2 || vv.rank() != 2 || vv.rows() != wv.rows() * wv.cols())
    throw ArgumentError("segment_weighted_sum: incompatible shapes " + wv.shape_string() + " and " + vv.shape_string());
  const std::size_t n = wv.rows(), K = wv.cols(), D = vv.cols();
  Tensor out = Tensor::matrix(n, D);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const double c = wv.at(i, k);
      const double* v = vv.data() + (i * K + k) * D;
      double* y = out.data() + i * D;
      for (std::size_t d = 0; d < D; ++d) y[d] += c * v[d];
    }
  return w.tape().record("segment_weighted_sum", std::move(out), {w, values}, [w, values](const Tensor& g, GradSink& s) {
    const Tensor& wv = w.value();
    const Tensor& vv = values.value();
    const std::size_t n = wv.rows(), K = wv.cols(), D = vv.cols();
    Tensor* gw = s[0];
    Tensor* gv = s[1];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t e = i * K + k;
        const double* gy = g.data() + i * D;
        if (gw) {
          double acc = 0.0;
          for (std::size_t d = 0; d < D; ++d) acc += gy[d] * vv.at(e, d);
          gw->at(i, k) += acc;
        }
        if (gv) {
          const double c = wv.at(i, k);
          for (std::size_t d = 0; d < D; ++d) gv->at(e, d) += c * gy[d];
        }
      }
  });
}

namespace {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

Var type_norm(const Var& f, const Fiber& fiber) {
  const Tensor& fv = f.value();
  require_cols(fv, fiber.dim(), "type_norm", "input");
  const std::size_t n = fv.rows(), D = fiber.dim();
  // One scale per node and type: rows x types.
  std::vector<double> rho(n * fiber.types().size());
  Tensor out = Tensor::matrix(n, D);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t t = 0;
    for (const auto& [l, m] : fiber.types()) {
      const std::size_t w = static_cast<std::size_t>(m) * (2 * l + 1);
      const double* x = fv.data() + i * D + fiber.offset(l);
      double sq = 0.0;
      for (std::size_t k = 0; k < w; ++k) sq += x[k] * x[k];
      const double r = std::sqrt(sq / m + kNormEps);
      rho[i * fiber.types().size() + t++] = r;
      double* y = out.data() + i * D + fiber.offset(l);
      for (std::size_t k = 0; k < w; ++k) y[k] = x[k] / r;
    }
  }
  return f.tape().record("type_norm", std::move(out), {f}, [f, fiber, rho = std::move(rho)](const Tensor& g, GradSink& s) {
    Tensor* gf = s[0];
    if (!gf) return;
    const Tensor& xv = f.value();
    const std::size_t n = xv.rows(), D = fiber.dim();
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t t = 0;
      for (const auto& [l, m] : fiber.types()) {
        const std::size_t w = static_cast<std::size_t>(m) * (2 * l + 1);
        const std::size_t off = i * D + fiber.offset(l);
        const double r = rho[i * fiber.types().size() + t++];
        double gx = 0.0;
        for (std::size_t k = 0; k < w; ++k) gx += g[off + k] * xv[off + k];
        const double c = gx / (m * r * r);
        for (std::size_t k = 0; k < w; ++k) (*gf)[off + k] += (g[off + k] - c * xv[off + k]) / r;
      }
    }
  });
}

Var norm_gate(const Var& f, const Var& scale, const Var& bias, const Fiber& fiber) {
  const Tensor& fv = f.value();
  require_cols(fv, fiber.dim(), "norm_gate", "input");
  const std::size_t C = gated_channels(fiber);
  if (scale.value().size() != C || bias.value().size() != C)
    throw ArgumentError("norm_gate: expected " + std::to_string(C) + " gate scales and biases");
  const std::size_t n = fv.rows(), D = fiber.dim();
  Tensor out = Tensor::matrix(n, D);
  const Tensor& sv = scale.value();
  const Tensor& bv = bias.value();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (const auto& [l, m] : fiber.types()) {
      const int d = 2 * l + 1;
      const double* x = fv.data() + i * D + fiber.offset(l);
      double* y = out.data() + i * D + fiber.offset(l);
      if (l == 0) {
        for (int k = 0; k < m; ++k) y[k] = std::max(x[k], 0.0);
        continue;
      }
      for (int ch = 0; ch < m; ++ch, ++c) {
        double sq = kGateEps;
        for (int a = 0; a < d; ++a) sq += x[ch * d + a] * x[ch * d + a];
        const double gate = sigmoid(sv[c] * std::sqrt(sq) + bv[c]);
        for (int a = 0; a < d; ++a) y[ch * d + a] = gate * x[ch * d + a];
      }
    }
  }
  return f.tape().record("norm_gate", std::move(out), {f, scale, bias}, [f, scale, bias, fiber](const Tensor& g, GradSink& s) {
    const Tensor& fv = f.value();
    const Tensor& sv = scale.value();
    const Tensor& bv = bias.value();
    Tensor* gf = s[0];
    Tensor* gs = s[1];
    Tensor* gb = s[2];
    const std::size_t n = fv.rows(), D = fiber.dim();
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t c = 0;
      for (const auto& [l, m] : fiber.types()) {
        const int d = 2 * l + 1;
        const std::size_t off = i * D + fiber.offset(l);
        const double* x = fv.data() + off;
        const double* gy = g.data() + off;
        if (l == 0) {
          if (gf)
            for (int k = 0; k < m; ++k)
              if (x[k] > 0.0) (*gf)[off + k] += gy[k];
          continue;
        }
        for (int ch = 0; ch < m; ++ch, ++c) {
          double sq = kGateEps, gx = 0.0;
          for (int a = 0; a < d; ++a) {
            sq += x[ch * d + a] * x[ch * d + a];
            gx += gy[ch * d + a] * x[ch * d + a];
          }
          const double norm = std::sqrt(sq);
          const double gate = sigmoid(sv[c] * norm + bv[c]);
          const double dz = gx * gate * (1.0 - gate);  // dL/dz with z = s |v| + b
          if (gs) (*gs)[c] += dz * norm;
          if (gb) (*gb)[c] += dz;
          if (gf) {
            const double radial = dz * sv[c] / norm;
            for (int a = 0; a < d; ++a) (*gf)[off + ch * d + a] += gate * gy[ch * d + a] + radial * x[ch * d + a];
          }
        }
      }
    }
  });
}

Var type_readout(const Var& f, const Var& w, const Fiber& fiber, int l) {
  const Tensor& fv = f.value();
  require_cols(fv, fiber.dim(), "type_readout", "input");
  if (!fiber.has(l)) throw ArgumentError("type_readout: fiber " + fiber.to_string() + " has no type " + std::to_string(l));
  const int m = fiber.multiplicity(l), d = 2 * l + 1;
  if (w.value().size() != static_cast<std::size_t>(m))
    throw ArgumentError("type_readout: expected " + std::to_string(m) + " weights");
  const std::size_t n = fv.rows(), D = fiber.dim(), off = fiber.offset(l);
  Tensor out = Tensor::matrix(n, d);
  const Tensor& wv = w.value();
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < m; ++c)
      for (int a = 0; a < d; ++a) out.at(i, a) += wv[c] * fv[i * D + off + c * d + a];
  return f.tape().record("type_readout", std::move(out), {f, w}, [f, w, m, d, D, off](const Tensor& g, GradSink& s) {
    const Tensor& fv = f.value();
    const Tensor& wv = w.value();
    Tensor* gf = s[0];
    Tensor* gw = s[1];
    for (std::size_t i = 0; i < fv.rows(); ++i)
      for (int c = 0; c < m; ++c)
        for (int a = 0; a < d; ++a) {
          const std::size_t idx = i * D + off + c * d + a;
          if (gw) (*gw)[c] += g.at(i, a) * fv[idx];
          if (gf) (*gf)[idx] += wv[c] * g.at(i, a);
        }
  });
}

// ---------------------------------------------------------------- model

BlockGeometry build_geometry(const Var& x, const toy::Interactions& a, std::size_t K, const so3::BasisLayout& layout) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != 3) throw ArgumentError("geometry: positions must be n x 3, got " + xv.shape_string());
  const std::size_t n = xv.rows();
  if (a.rows() != static_cast<Eigen::Index>(n) || a.cols() != static_cast<Eigen::Index>(n))
    throw ArgumentError("geometry: interaction matrix does not match the node count");
  if (K < 1) throw ConfigError("geometry: empty neighborhoods");

  BlockGeometry g;
  g.n = n;
  g.K = K;
  const toy::Positions pos = Eigen::Map<const toy::Positions>(xv.data(), n, 3);
  g.neighborhoods = toy::select_neighborhoods(pos, a, static_cast<int>(K));
  Tensor a_edge = Tensor::matrix(n * K, 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t j = g.neighborhoods[i][k];
      g.dst.push_back(i);
      g.src.push_back(j);
      a_edge[i * K + k] = (a(i, j) - kParamCenter) / kParamScale;
    }
  Tape& tape = x.tape();
  const Var rel = diff::gather_diff(x, g.src, g.dst);
  g.basis = diff::sph_basis(rel, layout);
  const Var r = diff::sqrt_norm(rel, so3::kMinRadius * so3::kMinRadius);
  const Var r_std = diff::scale(diff::shift(r, -kRadialCenter), 1.0 / kRadialScale);
  g.radial_in = diff::concat({r_std, tape.constant(std::move(a_edge))}, 1);
  return g;
}

LayerOutput attention_layer(const BlockGeometry& g, const Var& f, const LayerParams& p, const Fiber& fiber,
                            const so3::BasisLayout& layout) {
  const std::size_t D = fiber.dim();
  const Var h1 = diff::relu(diff::affine(g.radial_in, p.w1, p.b1));
  const Var h2 = diff::relu(diff::affine(h1, p.w2, p.b2));
  const Var phi = diff::affine(h2, p.w3, p.b3);
  const Var kv = edge_conv(g.basis, phi, f, g.src, layout, 2);
  const Var keys = diff::slice(kv, 1, 0, D);
  const Var values = diff::slice(kv, 1, D, 2 * D);

  const Var q = self_interaction(f, fiber, fiber, p.query);
  const Var logits = edge_dot(q, keys, g.K, 1.0 / std::sqrt(static_cast<double>(D)));
  LayerOutput out;
  out.attention = diff::softmax(logits, 1);
  const Var mixed = diff::add(segment_weighted_sum(out.attention, values), self_interaction(f, fiber, fiber, p.skip));
  out.features = norm_gate(type_norm(mixed, fiber), p.gate_scale, p.gate_bias, fiber);
  out.head = type_readout(out.features, p.head, fiber, 1);
  return out;
}

BlockOutput transformer_block(const BlockGeometry& g, const Var& f, std::span<const LayerParams> layers,
                              const Fiber& fiber, const so3::BasisLayout& layout) {
  if (layers.empty()) throw ConfigError("transformer_block: no layers");
  BlockOutput out;
  Var h = f;
  Var head;
  for (const LayerParams& p : layers) {
    const LayerOutput lo = attention_layer(g, h, p, fiber, layout);
    h = lo.features;
    head = head.valid() ? diff::add(head, lo.head) : lo.head;
    out.attention.push_back(lo.attention);
  }
  // Rows in harmonic order (y, z, x) times the change of basis give Cartesian rows.
  const so3::Mat3 P = so3::cartesian_to_type1();
  out.delta = diff::matmul(head, f.tape().constant(Tensor::from_matrix(P)));
  out.features = h;
  return out;
}

GeometryMode default_mode(const ModelConfig& config) {
  return config.basis_gradients ? GeometryMode::differentiable : GeometryMode::stopped;
}

Tensor input_features(std::size_t n, const Fiber& fiber) {
  Tensor f = Tensor::matrix(n, fiber.dim());
  for (std::size_t i = 0; i < n; ++i) f.at(i, fiber.offset(0)) = 1.0;
  return f;
}

ForwardResult iterative_forward(const Var& x0, const toy::Interactions& a, const BoundParams& params,
                                const ModelConfig& config, GeometryMode mode) {
  config.validate();
  const Tensor& xv = x0.value();
  if (xv.rank() != 2 || xv.cols() != 3) throw ArgumentError("forward: positions must be n x 3, got " + xv.shape_string());
  const std::size_t n = xv.rows();
  const int K = config.neighbors(static_cast<int>(n));
  if (K < 1 || K > static_cast<int>(n) - 1)
    throw ConfigError("forward: K = " + std::to_string(K) + " is not valid for " + std::to_string(n) + " nodes");

  Tape& tape = x0.tape();
  const Fiber fiber = config.hidden_fiber();
  const so3::BasisLayout layout(fiber, fiber);

  ForwardResult res;
  Var x = diff::sub(x0, diff::scale(diff::sum(x0, 0), 1.0 / static_cast<double>(n)));
  Var f = tape.constant(input_features(n, fiber));
  res.positions.push_back(x);
  for (int b = 0; b < config.n_blocks; ++b) {
    Var geo = x;
    if (b > 0 && mode == GeometryMode::stopped) geo = diff::stop_gradient(x);
    if (b > 0 && mode == GeometryMode::constant) geo = tape.constant(x.value());
    const BlockGeometry g = build_geometry(geo, a, static_cast<std::size_t>(K), layout);
    std::vector<LayerParams> layers;
    for (int l = 0; l < config.layers_per_block; ++l) layers.push_back(layer_params(params, b, l, config));
    const BlockOutput out = transformer_block(g, f, layers, fiber, layout);
    f = out.features;
    x = diff::add(x, out.delta);
    res.positions.push_back(x);
    res.deltas.push_back(out.delta);
    res.features.push_back(out.features);
    res.attention.insert(res.attention.end(), out.attention.begin(), out.attention.end());
    res.neighborhoods.push_back(g.neighborhoods);
  }
  res.energy = toy::total_energy(x, a);
  return res;
}

ForwardResult iterative_forward(Tape& tape, const toy::ProblemInstance& inst, const BoundParams& params,
                                const ModelConfig& config) {
  const Var x0 = tape.constant(Tensor::from_matrix(inst.positions));
  return iterative_forward(x0, inst.a, params, config, default_mode(config));
}

diff::RowMatrix rotate_features(const Eigen::Ref<const diff::RowMatrix>& f, const Fiber& fiber, const so3::Rotation& R) {
  if (f.cols() != static_cast<Eigen::Index>(fiber.dim()))
    throw ArgumentError("rotate_features: width does not match fiber " + fiber.to_string());
  diff::RowMatrix out = f;
  for (const auto& [l, m] : fiber.types()) {
    const so3::Matrix D = so3::wigner_d(l, R);
    const int d = 2 * l + 1;
    for (Eigen::Index i = 0; i < f.rows(); ++i)
      for (int c = 0; c < m; ++c) {
        const Eigen::Index off = static_cast<Eigen::Index>(fiber.offset(l)) + c * d;
        out.row(i).segment(off, d) = (D * f.row(i).segment(off, d).transpose()).transpose();
      }
  }
  return out;
}

}  // namespace ise3::net
