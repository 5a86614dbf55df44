#include "ise3/diff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ise3/errors.hpp"

namespace ise3::diff {

// ---------------------------------------------------------------- Tensor

namespace {

std::size_t product(const Tensor::Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(product(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(values.begin(), values.end()) {
  if (values_.size() != product(shape_))
    throw ArgumentError("tensor: " + std::to_string(values_.size()) + " values for shape " + shape_string());
}

Tensor Tensor::from_matrix(const Eigen::Ref<const RowMatrix>& m) {
  Tensor t = matrix(m.rows(), m.cols());
  t.mat() = m;
  return t;
}

std::size_t Tensor::rows() const {
  switch (rank()) {
    case 0:
    case 1:
      return 1;
    case 2:
      return shape_[0];
    default:
      throw ArgumentError("tensor: no matrix view for shape " + shape_string());
  }
}

std::size_t Tensor::cols() const {
  switch (rank()) {
    case 0:
      return 1;
    case 1:
      return shape_[0];
    case 2:
      return shape_[1];
    default:
      throw ArgumentError("tensor: no matrix view for shape " + shape_string());
  }
}

double Tensor::item() const {
  if (size() != 1) throw ArgumentError("tensor: item() on shape " + shape_string());
  return values_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(values_.begin(), values_.end(), v); }

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? ", " : "") << shape_[i];
  os << ')';
  return os.str();
}

// ---------------------------------------------------------------- Tape

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Tensor* GradSink::operator[](std::size_t k) {
  const NodeId p = parents_[k];
  if (!tape_.requires_grad(p)) return nullptr;
  auto& slot = grads_[p];
  if (!slot) slot.emplace(tape_.value(p).shape(), 0.0);
  return &*slot;
}

const Tensor* Gradients::find(const Var& v) const {
  if (v.id() >= grads_.size() || !grads_[v.id()]) return nullptr;
  return &*grads_[v.id()];
}

Tensor Gradients::of(const Var& v) const {
  if (const Tensor* g = find(v)) return *g;
  return Tensor(v.value().shape(), 0.0);
}

Var Tape::push(const char* op, Tensor value, std::vector<NodeId> parents, BackwardFn fn, bool requires_grad) {
  if (checked_ && !value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  const auto id = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(Node{op, std::move(value), std::move(parents), requires_grad ? std::move(fn) : BackwardFn{},
                        requires_grad});
  return Var(this, id);
}

Var Tape::constant(Tensor value) { return push("constant", std::move(value), {}, {}, false); }

Var Tape::leaf(Tensor value) { return push("leaf", std::move(value), {}, {}, true); }

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> parents, BackwardFn fn) {
  return record(op, std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> parents, BackwardFn fn) {
  std::vector<NodeId> ids;
  ids.reserve(parents.size());
  bool rg = false;
  for (const Var& p : parents) {
    if (&p.tape() != this) throw ArgumentError(std::string(op) + ": operand recorded on another tape");
    ids.push_back(p.id());
    rg = rg || requires_grad(p.id());
  }
  return push(op, std::move(value), std::move(ids), std::move(fn), rg);
}

Gradients Tape::backward(const Var& root) const {
  if (&root.tape() != this) throw ArgumentError("backward: root recorded on another tape");
  if (root.value().size() != 1) throw ArgumentError("backward: root must be scalar, got shape " + root.value().shape_string());
  Gradients out;
  out.grads_.resize(nodes_.size());
  if (!requires_grad(root.id())) return out;
  out.grads_[root.id()].emplace(root.value().shape(), 1.0);
  for (NodeId id = root.id() + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!n.backward || !out.grads_[id]) continue;
    GradSink sink(*this, n.parents, out.grads_);
    n.backward(*out.grads_[id], sink);
  }
  return out;
}

// ---------------------------------------------------------------- primitives

namespace {

enum class Bcast { Same, Scalar, Row, Col };

Bcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.same_shape(b)) return Bcast::Same;
  if (b.size() == 1) return Bcast::Scalar;
  if (a.rank() == 2 && b.rank() == 2) {
    if (b.rows() == 1 && b.cols() == a.cols()) return Bcast::Row;
    if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::Col;
  }
  throw ArgumentError(std::string(op) + ": cannot combine shapes " + a.shape_string() + " and " + b.shape_string());
}

inline std::size_t bindex(Bcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Bcast::Same:
      return i;
    case Bcast::Scalar:
      return 0;
    case Bcast::Row:
      return i % cols;
    case Bcast::Col:
      return i / cols;
  }
  return 0;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ArgumentError(std::string(op) + ": expected a rank-2 tensor, got " + t.shape_string());
}

template <class Fwd, class DA, class DB>
Var binary(const char* op, const Var& a, const Var& b, Fwd fwd, DA da, DB db) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Bcast kind = broadcast_kind(av, bv, op);
  const std::size_t cols = av.rank() == 2 ? av.cols() : 1;
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[bindex(kind, i, cols)]);
  return a.tape().record(op, std::move(out), {a, b}, [a, b, kind, cols, da, db](const Tensor& g, GradSink& s) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (Tensor* ga = s[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * da(av[i], bv[bindex(kind, i, cols)]);
    if (Tensor* gb = s[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[bindex(kind, i, cols)] += g[i] * db(av[i], bv[bindex(kind, i, cols)]);
  });
}

template <class Fwd, class D>
Var unary(const char* op, const Var& a, Fwd fwd, D d) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return a.tape().record(op, std::move(out), {a}, [a, d](const Tensor& g, GradSink& s) {
    const Tensor& av = a.value();
    if (Tensor* ga = s[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * d(av[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary("add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
                [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary("sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
                [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary("mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
                [](double x, double) { return x; });
}

Var scale(const Var& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double) { return s; });
}

Var shift(const Var& a, double c) {
  return unary("shift", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Var power(const Var& a, double p) {
  return unary("power", a, [p](double x) { return std::pow(x, p); },
               [p](double x) { return p == 0.0 ? 0.0 : p * std::pow(x, p - 1.0); });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var relu(const Var& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.cols() != bv.rows())
    throw ArgumentError("matmul: inner dimensions differ: " + av.shape_string() + " x " + bv.shape_string());
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  out.mat().noalias() = av.mat() * bv.mat();
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b](const Tensor& g, GradSink& s) {
    if (Tensor* ga = s[0]) ga->mat().noalias() += g.mat() * b.value().mat().transpose();
    if (Tensor* gb = s[1]) gb->mat().noalias() += a.value().mat().transpose() * g.mat();
  });
}

Var affine(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  require_rank2(xv, "affine");
  require_rank2(wv, "affine");
  if (xv.cols() != wv.rows())
    throw ArgumentError("affine: inner dimensions differ: " + xv.shape_string() + " x " + wv.shape_string());
  if (bv.size() != wv.cols()) throw ArgumentError("affine: bias " + bv.shape_string() + " does not match " + wv.shape_string());
  Tensor out = Tensor::matrix(xv.rows(), wv.cols());
  auto om = out.mat();
  om.noalias() = xv.mat() * wv.mat();
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data(), bv.size());
  return x.tape().record("affine", std::move(out), {x, w, b}, [x, w](const Tensor& g, GradSink& s) {
    if (Tensor* gx = s[0]) gx->mat().noalias() += g.mat() * w.value().mat().transpose();
    if (Tensor* gw = s[1]) gw->mat().noalias() += x.value().mat().transpose() * g.mat();
    if (Tensor* gb = s[2]) Eigen::Map<Eigen::RowVectorXd>(gb->data(), gb->size()) += g.mat().colwise().sum();
  });
}

Var concat(std::initializer_list<Var> parts, int axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ArgumentError("concat: no operands");
  if (axis != 0 && axis != 1) throw ArgumentError("concat: axis must be 0 or 1");
  std::size_t rows = 0, cols = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    require_rank2(v, "concat");
    if (axis == 0) {
      if (cols != 0 && v.cols() != cols) throw ArgumentError("concat: column counts differ");
      cols = v.cols();
      rows += v.rows();
    } else {
      if (rows != 0 && v.rows() != rows) throw ArgumentError("concat: row counts differ");
      rows = v.rows();
      cols += v.cols();
    }
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    offsets.push_back(off);
    if (axis == 0) out.mat().middleRows(off, v.rows()) = v.mat();
    else out.mat().middleCols(off, v.cols()) = v.mat();
    off += axis == 0 ? v.rows() : v.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts.front().tape().record("concat", std::move(out), parts, [ps, offsets, axis](const Tensor& g, GradSink& s) {
    for (std::size_t k = 0; k < ps.size(); ++k) {
      Tensor* gk = s[k];
      if (!gk) continue;
      if (axis == 0) gk->mat() += g.mat().middleRows(offsets[k], gk->rows());
      else gk->mat() += g.mat().middleCols(offsets[k], gk->cols());
    }
  });
}

Var slice(const Var& a, int axis, std::size_t begin, std::size_t end) {
  const Tensor& av = a.value();
  require_rank2(av, "slice");
  if (axis != 0 && axis != 1) throw ArgumentError("slice: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? av.rows() : av.cols();
  if (begin > end || end > extent) throw ArgumentError("slice: range out of bounds");
  const std::size_t n = end - begin;
  Tensor out = axis == 0 ? Tensor::matrix(n, av.cols()) : Tensor::matrix(av.rows(), n);
  if (axis == 0) out.mat() = av.mat().middleRows(begin, n);
  else out.mat() = av.mat().middleCols(begin, n);
  return a.tape().record("slice", std::move(out), {a}, [axis, begin, n](const Tensor& g, GradSink& s) {
    if (Tensor* ga = s[0]) {
      if (axis == 0) ga->mat().middleRows(begin, n) += g.mat();
      else ga->mat().middleCols(begin, n) += g.mat();
    }
  });
}

Var sum(const Var& a) {
  const Tensor& av = a.value();
  double total = 0.0;
  for (double v : av.values()) total += v;
  return a.tape().record("sum", Tensor::scalar(total), {a}, [](const Tensor& g, GradSink& s) {
    if (Tensor* ga = s[0])
      for (double& v : ga->values()) v += g[0];
  });
}

Var sum(const Var& a, int axis) {
  const Tensor& av = a.value();
  require_rank2(av, "sum");
  if (axis != 0 && axis != 1) throw ArgumentError("sum: axis must be 0 or 1");
  Tensor out = axis == 0 ? Tensor::matrix(1, av.cols()) : Tensor::matrix(av.rows(), 1);
  if (axis == 0) out.mat() = av.mat().colwise().sum();
  else out.mat() = av.mat().rowwise().sum();
  return a.tape().record("sum_axis", std::move(out), {a}, [axis](const Tensor& g, GradSink& s) {
    if (Tensor* ga = s[0]) {
      if (axis == 0) ga->mat().rowwise() += g.mat().row(0);
      else ga->mat().colwise() += g.mat().col(0);
    }
  });
}

Var sqrt_norm(const Var& a, double eps) {
  const Tensor& av = a.value();
  if (av.rank() != 1 && av.rank() != 2) throw ArgumentError("sqrt_norm: expected rank 1 or 2, got " + av.shape_string());
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out = av.rank() == 2 ? Tensor::matrix(rows, 1) : Tensor::scalar(0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = eps;
    for (std::size_t c = 0; c < cols; ++c) s += av.at(r, c) * av.at(r, c);
    out[r] = std::sqrt(s);
  }
  std::vector<double> norms(out.values().begin(), out.values().end());
  return a.tape().record("sqrt_norm", std::move(out), {a}, [a, norms = std::move(norms)](const Tensor& g, GradSink& s) {
    Tensor* ga = s[0];
    if (!ga) return;
    const Tensor& av = a.value();
    const std::size_t cols = av.cols();
    for (std::size_t r = 0; r < norms.size(); ++r) {
      const double inv = norms[r] > 0.0 ? g[r] / norms[r] : 0.0;
      for (std::size_t c = 0; c < cols; ++c) ga->at(r, c) += inv * av.at(r, c);
    }
  });
}

Var softmax(const Var& a, int axis) {
  const Tensor& av = a.value();
  require_rank2(av, "softmax");
  if (axis != 0 && axis != 1) throw ArgumentError("softmax: axis must be 0 or 1");
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out(av.shape());
  const std::size_t groups = axis == 1 ? rows : cols;
  const std::size_t len = axis == 1 ? cols : rows;
  auto idx = [axis, cols](std::size_t grp, std::size_t k) { return axis == 1 ? grp * cols + k : k * cols + grp; };
  for (std::size_t grp = 0; grp < groups; ++grp) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, av[idx(grp, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) z += (out[idx(grp, k)] = std::exp(av[idx(grp, k)] - mx));
    for (std::size_t k = 0; k < len; ++k) out[idx(grp, k)] /= z;
  }
  Tensor y = out;
  return a.tape().record("softmax", std::move(out), {a}, [y = std::move(y), groups, len, idx](const Tensor& g, GradSink& s) {
    Tensor* ga = s[0];
    if (!ga) return;
    for (std::size_t grp = 0; grp < groups; ++grp) {
      double dot = 0.0;
      for (std::size_t k = 0; k < len; ++k) dot += g[idx(grp, k)] * y[idx(grp, k)];
      for (std::size_t k = 0; k < len; ++k) (*ga)[idx(grp, k)] += y[idx(grp, k)] * (g[idx(grp, k)] - dot);
    }
  });
}

Var stack(std::initializer_list<Var> parts) { return stack(std::span<const Var>(parts.begin(), parts.size())); }

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw ArgumentError("stack: no operands");
  const Tensor& first = parts.front().value();
  for (const Var& p : parts)
    if (!p.value().same_shape(first)) throw ArgumentError("stack: operand shapes differ");
  Tensor::Shape shape{parts.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor out(shape);
  const std::size_t n = first.size();
  for (std::size_t k = 0; k < parts.size(); ++k)
    std::copy(parts[k].value().data(), parts[k].value().data() + n, out.data() + k * n);
  return parts.front().tape().record("stack", std::move(out), parts, [n, count = parts.size()](const Tensor& g, GradSink& s) {
    for (std::size_t k = 0; k < count; ++k)
      if (Tensor* gk = s[k])
        for (std::size_t i = 0; i < n; ++i) (*gk)[i] += g[k * n + i];
  });
}

Var stop_gradient(const Var& a) { return a.tape().constant(a.value()); }

Var gather_diff(const Var& x, std::span<const std::size_t> first, std::span<const std::size_t> second) {
  const Tensor& xv = x.value();
  require_rank2(xv, "gather_diff");
  if (first.size() != second.size()) throw ArgumentError("gather_diff: index lists differ in length");
  const std::size_t cols = xv.cols();
  for (std::size_t k = 0; k < first.size(); ++k)
    if (first[k] >= xv.rows() || second[k] >= xv.rows()) throw ArgumentError("gather_diff: row index out of range");
  Tensor out = Tensor::matrix(first.size(), cols);
  for (std::size_t k = 0; k < first.size(); ++k)
    for (std::size_t c = 0; c < cols; ++c) out.at(k, c) = xv.at(first[k], c) - xv.at(second[k], c);
  std::vector<std::size_t> fa(first.begin(), first.end()), fb(second.begin(), second.end());
  return x.tape().record("gather_diff", std::move(out), {x}, [fa, fb, cols](const Tensor& g, GradSink& s) {
    Tensor* gx = s[0];
    if (!gx) return;
    for (std::size_t k = 0; k < fa.size(); ++k)
      for (std::size_t c = 0; c < cols; ++c) {
        gx->at(fa[k], c) += g.at(k, c);
        gx->at(fb[k], c) -= g.at(k, c);
      }
  });
}

Var sph_basis(const Var& rel, const so3::BasisLayout& layout) {
  const Tensor& rv = rel.value();
  require_rank2(rv, "sph_basis");
  if (rv.cols() != 3) throw ArgumentError("sph_basis: expected E x 3 relative positions, got " + rv.shape_string());
  const std::size_t E = rv.rows();
  const std::size_t width = layout.size();
  Tape& tape = rel.tape();

  // Evaluation points after clamping; `live` marks rows with a usable direction.
  std::vector<so3::Vec3> points(E);
  std::vector<double> gain(E, 1.0);
  for (std::size_t e = 0; e < E; ++e) {
    so3::Vec3 x(rv.at(e, 0), rv.at(e, 1), rv.at(e, 2));
    const double r = x.norm();
    if (!(r >= so3::kMinRadius)) {
      tape.note_clamp();
      if (r > 0.0 && std::isfinite(r)) {
        gain[e] = r / so3::kMinRadius;
        x *= so3::kMinRadius / r;
      } else {
        gain[e] = 0.0;
        x = so3::Vec3(0.0, 0.0, so3::kMinRadius);
      }
    }
    points[e] = x;
  }
  Tensor out = Tensor::matrix(E, width);
  for (std::size_t e = 0; e < E; ++e) so3::fill_basis(layout, points[e], std::span<double>(out.data() + e * width, width));

  return tape.record("sph_basis", std::move(out), {rel},
                     [points = std::move(points), gain = std::move(gain), layout, width](const Tensor& g, GradSink& s) {
                       Tensor* gr = s[0];
                       if (!gr) return;
                       for (std::size_t e = 0; e < points.size(); ++e) {
                         if (gain[e] == 0.0) continue;
                         const so3::Vec3 d =
                             so3::basis_vjp(layout, points[e], std::span<const double>(g.data() + e * width, width));
                         // Inside the clamp radius the basis is still direction-only; the
                         // gradient is evaluated at the clamped point.
                         for (int c = 0; c < 3; ++c) gr->at(e, c) += d[c];
                       }
                     });
}

// ---------------------------------------------------------------- gradient check

GradCheckReport gradient_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double h, double floor) {
  std::vector<Tensor> work = inputs;
  auto evaluate = [&](bool with_grad, std::vector<Tensor>* grads) {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(work.size());
    for (const Tensor& t : work) vars.push_back(tape.leaf(t));
    Var y = f(tape, vars);
    if (with_grad) {
      Gradients g = tape.backward(y);
      for (const Var& v : vars) grads->push_back(g.of(v));
    }
    return y.value().item();
  };

  std::vector<Tensor> analytic;
  evaluate(true, &analytic);

  GradCheckReport rep;
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + h;
      const double fp = evaluate(false, nullptr);
      work[k][i] = orig - h;
      const double fm = evaluate(false, nullptr);
      work[k][i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), floor});
      rep.max_abs_error = std::max(rep.max_abs_error, abs_err);
      rep.max_rel_error = std::max(rep.max_rel_error, rel);
      ++rep.entries;
    }
  }
  return rep;
}

}  // namespace ise3::diff
