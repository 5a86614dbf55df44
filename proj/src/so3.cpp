#include "ise3/so3.hpp"

#include <array>
#include <cmath>
#include <map>
#include <mutex>
#include <numbers>
#include <string>
#include <tuple>

#include "ise3/errors.hpp"

namespace ise3::so3 {

namespace {

// Degrees needed internally: coupling two l <= 4 features reaches J = 8.
constexpr int kInternalDegree = 8;

using Poly = std::vector<double>;  // ascending coefficients

Poly derivative(const Poly& p) {
  if (p.size() <= 1) return {0.0};
  Poly d(p.size() - 1);
  for (std::size_t k = 1; k < p.size(); ++k) d[k - 1] = static_cast<double>(k) * p[k];
  return d;
}

// d^m P_l / dz^m and the orthonormal prefactor of every (l, m >= 0).
struct LegendreTables {
  std::array<std::array<Poly, kInternalDegree + 1>, kInternalDegree + 1> poly;
  std::array<std::array<double, kInternalDegree + 1>, kInternalDegree + 1> norm{};

  LegendreTables() {
    std::array<Poly, kInternalDegree + 1> P;
    P[0] = {1.0};
    P[1] = {0.0, 1.0};
    for (int n = 1; n < kInternalDegree; ++n) {
      // (n+1) P_{n+1} = (2n+1) z P_n - n P_{n-1}
      Poly next(n + 2, 0.0);
      for (std::size_t k = 0; k < P[n].size(); ++k) next[k + 1] += (2.0 * n + 1.0) * P[n][k];
      for (std::size_t k = 0; k < P[n - 1].size(); ++k) next[k] -= n * P[n - 1][k];
      for (double& c : next) c /= (n + 1.0);
      P[n + 1] = std::move(next);
    }
    for (int l = 0; l <= kInternalDegree; ++l) {
      Poly d = P[l];
      for (int m = 0; m <= l; ++m) {
        poly[l][m] = d;
        d = derivative(d);
        // (l-m)!/(l+m)!
        double ratio = 1.0;
        for (int k = l - m + 1; k <= l + m; ++k) ratio /= k;
        double n = std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi) * ratio);
        if (m > 0) n *= std::numbers::sqrt2;
        norm[l][m] = n;
      }
    }
  }
};

const LegendreTables& legendre() {
  static const LegendreTables t;
  return t;
}

inline void horner(const Poly& p, double z, double& value, double& slope) {
  value = 0.0;
  slope = 0.0;
  for (std::size_t k = p.size(); k-- > 0;) {
    slope = slope * z + value;
    value = value * z + p[k];
  }
}

void harmonics_unchecked(int J_max, const Vec3& x, std::span<double> values, std::span<Vec3> grads) {
  const auto& tab = legendre();
  const double r = x.norm();
  const Vec3 u = x / r;
  const bool want_grad = !grads.empty();

  // C_m + i S_m = (u_x + i u_y)^m together with their partials.
  std::array<double, kInternalDegree + 1> C{}, S{};
  C[0] = 1.0;
  S[0] = 0.0;
  for (int m = 1; m <= J_max; ++m) {
    C[m] = u.x() * C[m - 1] - u.y() * S[m - 1];
    S[m] = u.x() * S[m - 1] + u.y() * C[m - 1];
  }

  for (int J = 0; J <= J_max; ++J) {
    for (int am = 0; am <= J; ++am) {
      double q = 0.0, dq = 0.0;
      horner(tab.poly[J][am], u.z(), q, dq);
      const double n = tab.norm[J][am];
      // m = +am uses C, m = -am uses S.
      for (int sign : {+1, -1}) {
        if (am == 0 && sign < 0) continue;
        const int m = sign * am;
        const double t = sign > 0 ? C[am] : S[am];
        values[sh_index(J, m)] = n * q * t;
        if (want_grad) {
          double dtx = 0.0, dty = 0.0;
          if (am > 0) {
            if (sign > 0) {
              dtx = am * C[am - 1];
              dty = -am * S[am - 1];
            } else {
              dtx = am * S[am - 1];
              dty = am * C[am - 1];
            }
          }
          const Vec3 gu(n * q * dtx, n * q * dty, n * dq * t);
          grads[sh_index(J, m)] = (gu - u * u.dot(gu)) / r;
        }
      }
    }
  }
}

// Infinitesimal rotation generators about x, y, z.
const std::array<Mat3, 3>& cartesian_generators() {
  static const std::array<Mat3, 3> g = [] {
    std::array<Mat3, 3> out;
    out[0] << 0, 0, 0, 0, 0, -1, 0, 1, 0;
    out[1] << 0, 0, 1, 0, 0, 0, -1, 0, 0;
    out[2] << 0, -1, 0, 1, 0, 0, 0, 0, 0;
    return out;
  }();
  return g;
}

// Generators of the degree-l real representation, obtained from the action of
// the Cartesian generators on the harmonics: grad Y(u) . (G u) = X Y(u).
std::array<Eigen::MatrixXd, 3> representation_generators(int l) {
  const int d = 2 * l + 1;
  const int npts = 6 * d + 10;
  Eigen::MatrixXd Y(npts, d);
  std::array<Eigen::MatrixXd, 3> dY;
  for (auto& m : dY) m.resize(npts, d);

  std::vector<double> vals(sh_count(l));
  std::vector<Vec3> grads(sh_count(l));
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int p = 0; p < npts; ++p) {
    const double z = 1.0 - (2.0 * p + 1.0) / npts;
    const double rho = std::sqrt(1.0 - z * z);
    const Vec3 u(rho * std::cos(golden * p), rho * std::sin(golden * p), z);
    harmonics_unchecked(l, u, vals, grads);
    for (int m = -l; m <= l; ++m) {
      Y(p, m + l) = vals[sh_index(l, m)];
      for (int k = 0; k < 3; ++k) dY[k](p, m + l) = grads[sh_index(l, m)].dot(cartesian_generators()[k] * u);
    }
  }
  std::array<Eigen::MatrixXd, 3> X;
  auto qr = Y.colPivHouseholderQr();
  for (int k = 0; k < 3; ++k) X[k] = qr.solve(dY[k]).transpose();
  return X;
}

const std::array<Eigen::MatrixXd, 3>& generators(int l) {
  static std::once_flag once;
  static std::array<std::array<Eigen::MatrixXd, 3>, kInternalDegree + 1> cache;
  std::call_once(once, [] {
    for (int k = 0; k <= kInternalDegree; ++k) cache[k] = representation_generators(k);
  });
  return cache[l];
}

// Null space of the intertwining constraint Q (X_out (x) 1 + 1 (x) X_in) = X_J Q
// for all three generators.
CGTensor solve_clebsch_gordan(int l_out, int l_in, int J) {
  const int dJ = 2 * J + 1;
  const int da = 2 * l_out + 1;
  const int db = 2 * l_in + 1;
  const int dio = da * db;
  const int unknowns = dJ * dio;

  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(3 * dJ * dio, unknowns);
  for (int k = 0; k < 3; ++k) {
    const Eigen::MatrixXd& Xa = generators(l_out)[k];
    const Eigen::MatrixXd& Xb = generators(l_in)[k];
    const Eigen::MatrixXd& XJ = generators(J)[k];
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(dio, dio);
    for (int a = 0; a < da; ++a)
      for (int b = 0; b < db; ++b)
        for (int c = 0; c < da; ++c)
          for (int e = 0; e < db; ++e) {
            double v = 0.0;
            if (b == e) v += Xa(a, c);
            if (a == c) v += Xb(b, e);
            A(a * db + b, c * db + e) = v;
          }
    for (int row = 0; row < dJ; ++row)
      for (int col = 0; col < dio; ++col) {
        const int eq = (k * dJ + row) * dio + col;
        for (int c = 0; c < dio; ++c) M(eq, row * dio + c) += A(c, col);
        for (int c = 0; c < dJ; ++c) M(eq, c * dio + col) -= XJ(row, c);
      }
  }

  Eigen::BDCSVD<Eigen::MatrixXd> svd(M, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  const double smallest = sv(unknowns - 1);
  if (smallest > 1e-8 * sv(0) || (unknowns > 1 && sv(unknowns - 2) < 1e-6 * sv(0)))
    throw std::logic_error("clebsch_gordan: coupling space is not one-dimensional");

  Eigen::VectorXd q = svd.matrixV().col(unknowns - 1);
  q *= std::sqrt(static_cast<double>(dJ)) / q.norm();
  for (int i = 0; i < unknowns; ++i) {
    if (std::abs(q(i)) > 1e-9) {
      if (q(i) < 0) q = -q;
      break;
    }
  }

  CGTensor out;
  out.l_out = l_out;
  out.l_in = l_in;
  out.J = J;
  out.coeffs.assign(q.data(), q.data() + unknowns);
  return out;
}

void check_degree(int J, int limit, const char* what) {
  if (J < 0 || J > limit)
    throw ArgumentError(std::string(what) + ": degree " + std::to_string(J) + " outside [0, " +
                        std::to_string(limit) + "]");
}

}  // namespace

Rotation::Rotation(const Mat3& m) : m_(m) {
  if (!m.allFinite()) throw ArgumentError("rotation: non-finite entries");
  const double orth = (m.transpose() * m - Mat3::Identity()).cwiseAbs().maxCoeff();
  const double det = m.determinant();
  if (orth > 1e-9 || std::abs(det - 1.0) > 1e-9)
    throw ArgumentError("rotation: matrix is not a proper rotation (orthogonality error " +
                        std::to_string(orth) + ", det " + std::to_string(det) + ")");
}

Rotation Rotation::operator*(const Rotation& other) const { return Rotation(m_ * other.m_, Unchecked{}); }

Rotation Rotation::inverse() const { return Rotation(m_.transpose(), Unchecked{}); }

Rotation random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::Quaterniond q(normal(rng), normal(rng), normal(rng), normal(rng));
  q.normalize();
  return Rotation(q.toRotationMatrix());
}

double real_sph_harm(int J, int m, const Vec3& dir) {
  check_degree(J, kMaxDegree, "real_sph_harm");
  if (m < -J || m > J) throw ArgumentError("real_sph_harm: order " + std::to_string(m) + " outside [-J, J]");
  if (!dir.allFinite() || std::abs(dir.norm() - 1.0) > 1e-9)
    throw ArgumentError("real_sph_harm: direction must be a unit vector");
  std::array<double, sh_count(kMaxDegree)> vals{};
  harmonics_unchecked(J, dir, std::span<double>(vals.data(), sh_count(J)), {});
  return vals[sh_index(J, m)];
}

Vec3 sph_harm_grad(int J, int m, const Vec3& x) {
  check_degree(J, kMaxDegree, "sph_harm_grad");
  if (m < -J || m > J) throw ArgumentError("sph_harm_grad: order " + std::to_string(m) + " outside [-J, J]");
  if (!(x.norm() >= kMinRadius)) throw GeometryError("sph_harm_grad: |x| below minimum radius");
  std::array<double, sh_count(kMaxDegree)> vals{};
  std::array<Vec3, sh_count(kMaxDegree)> grads;
  harmonics_unchecked(J, x, std::span<double>(vals.data(), sh_count(J)),
                      std::span<Vec3>(grads.data(), sh_count(J)));
  return grads[sh_index(J, m)];
}

void sph_harm_all(int J_max, const Vec3& x, std::span<double> values, std::span<Vec3> grads) {
  check_degree(J_max, kInternalDegree, "sph_harm_all");
  if (values.size() < static_cast<std::size_t>(sh_count(J_max)) ||
      (!grads.empty() && grads.size() < static_cast<std::size_t>(sh_count(J_max))))
    throw ArgumentError("sph_harm_all: output buffer too small");
  harmonics_unchecked(J_max, x, values, grads);
}

Matrix CGTensor::as_matrix() const {
  Matrix m(rows(), dim_out() * dim_in());
  std::copy(coeffs.begin(), coeffs.end(), m.data());
  return m;
}

const CGTensor& clebsch_gordan(int l_out, int l_in, int J) {
  check_degree(l_out, kMaxDegree, "clebsch_gordan");
  check_degree(l_in, kMaxDegree, "clebsch_gordan");
  if (J < std::abs(l_in - l_out) || J > l_in + l_out)
    throw ArgumentError("clebsch_gordan: (" + std::to_string(l_out) + ", " + std::to_string(l_in) + ", " +
                        std::to_string(J) + ") violates the triangle inequality");
  static std::mutex mutex;
  static std::map<std::tuple<int, int, int>, CGTensor> cache;
  std::lock_guard lock(mutex);
  auto key = std::make_tuple(l_out, l_in, J);
  auto it = cache.find(key);
  if (it == cache.end()) it = cache.emplace(key, solve_clebsch_gordan(l_out, l_in, J)).first;
  return it->second;
}

Mat3 cartesian_to_type1() {
  Mat3 p;
  p << 0, 1, 0,  //
      0, 0, 1,   //
      1, 0, 0;
  return p;
}

Matrix wigner_d(int l, const Rotation& R) {
  check_degree(l, kMaxDegree, "wigner_d");
  if (l == 0) return Matrix::Ones(1, 1);
  const Mat3 P = cartesian_to_type1();
  Matrix d1 = P * R.matrix() * P.transpose();
  Matrix d = d1;
  for (int k = 2; k <= l; ++k) {
    const Matrix Q = clebsch_gordan(1, k - 1, k).as_matrix();
    const int dk = 2 * k - 1;
    Matrix kron(3 * dk, 3 * dk);
    for (int a = 0; a < 3; ++a)
      for (int c = 0; c < 3; ++c) kron.block(a * dk, c * dk, dk, dk) = d1(a, c) * d;
    d = Q * kron * Q.transpose();
  }
  return d;
}

BasisLayout::BasisLayout(const Fiber& fiber_in, const Fiber& fiber_out) : in_(fiber_in), out_(fiber_out) {
  std::size_t offset = 0;
  for (const auto& [li, mi] : in_.types()) {
    for (const auto& [lo, mo] : out_.types()) {
      KernelBlock b;
      b.l_in = li;
      b.l_out = lo;
      b.J_min = std::abs(li - lo);
      b.J_count = li + lo - b.J_min + 1;
      b.offset = offset;
      if (b.J_min + b.J_count - 1 > kMaxDegree)
        throw ArgumentError("basis: kernel " + std::to_string(li) + "->" + std::to_string(lo) +
                            " needs harmonics above the supported degree");
      for (int J = b.J_min; J < b.J_min + b.J_count; ++J) b.cg.push_back(&clebsch_gordan(lo, li, J));
      offset += b.matrix_size() * b.J_count;
      max_J_ = std::max(max_J_, b.J_min + b.J_count - 1);
      blocks_.push_back(std::move(b));
    }
  }
  size_ = offset;
}

const KernelBlock* BasisLayout::find(int l_in, int l_out) const {
  for (const auto& b : blocks_)
    if (b.l_in == l_in && b.l_out == l_out) return &b;
  return nullptr;
}

Matrix basis_from_cg(const CGTensor& cg, const Vec3& rel_pos) {
  std::array<double, sh_count(kMaxDegree)> vals{};
  harmonics_unchecked(cg.J, rel_pos, std::span<double>(vals.data(), sh_count(cg.J)), {});
  Matrix B = Matrix::Zero(cg.dim_out(), cg.dim_in());
  for (int m = -cg.J; m <= cg.J; ++m) {
    const double y = vals[sh_index(cg.J, m)];
    for (int a = 0; a < cg.dim_out(); ++a)
      for (int b = 0; b < cg.dim_in(); ++b) B(a, b) += y * cg.at(m + cg.J, a, b);
  }
  return B;
}

Matrix BasisEntry::matrix(int l_in, int l_out, int J) const {
  const KernelBlock* b = layout.find(l_in, l_out);
  if (b == nullptr || J < b->J_min || J >= b->J_min + b->J_count)
    throw ArgumentError("basis entry: no matrix for the requested (l_in, l_out, J)");
  Matrix m(b->dim_out(), b->dim_in());
  const double* src = values.data() + b->offset + (J - b->J_min) * b->matrix_size();
  std::copy(src, src + b->matrix_size(), m.data());
  return m;
}

void fill_basis(const BasisLayout& layout, const Vec3& rel_pos, std::span<double> out) {
  std::array<double, sh_count(kMaxDegree)> Y{};
  harmonics_unchecked(layout.max_degree(), rel_pos, Y, {});
  for (const KernelBlock& b : layout.blocks()) {
    const std::size_t ms = b.matrix_size();
    for (int j = 0; j < b.J_count; ++j) {
      const int J = b.J_min + j;
      const CGTensor& cg = *b.cg[j];
      double* dst = out.data() + b.offset + j * ms;
      std::fill(dst, dst + ms, 0.0);
      for (int m = -J; m <= J; ++m) {
        const double y = Y[sh_index(J, m)];
        const double* q = cg.coeffs.data() + (m + J) * ms;
        for (std::size_t k = 0; k < ms; ++k) dst[k] += y * q[k];
      }
    }
  }
}

Vec3 basis_vjp(const BasisLayout& layout, const Vec3& rel_pos, std::span<const double> grad_out) {
  std::array<double, sh_count(kMaxDegree)> Y{};
  std::array<Vec3, sh_count(kMaxDegree)> dY;
  harmonics_unchecked(layout.max_degree(), rel_pos, Y, dY);
  std::array<double, sh_count(kMaxDegree)> gY{};
  for (const KernelBlock& b : layout.blocks()) {
    const std::size_t ms = b.matrix_size();
    for (int j = 0; j < b.J_count; ++j) {
      const int J = b.J_min + j;
      const CGTensor& cg = *b.cg[j];
      const double* g = grad_out.data() + b.offset + j * ms;
      for (int m = -J; m <= J; ++m) {
        const double* q = cg.coeffs.data() + (m + J) * ms;
        double acc = 0.0;
        for (std::size_t k = 0; k < ms; ++k) acc += g[k] * q[k];
        gY[sh_index(J, m)] += acc;
      }
    }
  }
  Vec3 out = Vec3::Zero();
  for (int i = 0; i < sh_count(layout.max_degree()); ++i) out += gY[i] * dY[i];
  return out;
}

BasisEntry equivariant_basis(const Vec3& rel_pos, const Fiber& fiber_in, const Fiber& fiber_out) {
  if (!(rel_pos.norm() >= kMinRadius)) throw GeometryError("equivariant_basis: |rel_pos| below minimum radius");
  BasisEntry e{BasisLayout(fiber_in, fiber_out), {}};
  e.values.resize(e.layout.size());
  fill_basis(e.layout, rel_pos, e.values);
  return e;
}

}  // namespace ise3::so3
