#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ise3/fiber.hpp"

namespace ise3::so3 {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Largest spherical-harmonic degree exposed by the public API (2 x max feature type).
inline constexpr int kMaxDegree = 4;
/// Relative positions shorter than this have no usable direction.
inline constexpr double kMinRadius = 1e-6;

/// Proper rotation of R^3. Construction validates orthogonality and det = +1.
class Rotation {
 public:
  Rotation() : m_(Mat3::Identity()) {}
  explicit Rotation(const Mat3& m);

  static Rotation identity() { return Rotation(); }

  const Mat3& matrix() const { return m_; }
  Vec3 operator*(const Vec3& v) const { return m_ * v; }
  Rotation operator*(const Rotation& other) const;
  Rotation inverse() const;

 private:
  struct Unchecked {};
  Rotation(const Mat3& m, Unchecked) : m_(m) {}
  Mat3 m_;
};

/// Haar-uniform rotation from a normalized Gaussian quaternion.
Rotation random_rotation(std::mt19937_64& rng);

/// Flat index of (J, m) in an all-degree harmonic table: J^2 + J + m.
constexpr int sh_index(int J, int m) { return J * J + J + m; }
constexpr int sh_count(int J_max) { return (J_max + 1) * (J_max + 1); }

/// Real orthonormal spherical harmonic Y_{J,m}(dir). m < 0 are the sine-like
/// components, m > 0 the cosine-like ones; Y_{1,(-1,0,1)} is proportional to (y, z, x).
/// Requires |dir| = 1 within 1e-9 and 0 <= J <= kMaxDegree.
double real_sph_harm(int J, int m, const Vec3& dir);

/// d/dx of Y_{J,m}(x / |x|). Throws GeometryError if |x| < kMinRadius.
Vec3 sph_harm_grad(int J, int m, const Vec3& x);

/// All Y_{J,m}(x/|x|) for J <= J_max into `values` (sh_count(J_max) entries) and,
/// when `grads` is non-empty, their gradients with respect to x. No range checks
/// beyond the buffer sizes; x must be non-zero.
void sph_harm_all(int J_max, const Vec3& x, std::span<double> values, std::span<Vec3> grads);

/// Clebsch-Gordan coupling tensor of shape (2J+1, 2*l_out+1, 2*l_in+1) in the
/// real harmonic basis. Flattened over the last two axes, rows are orthonormal.
struct CGTensor {
  int l_out = 0;
  int l_in = 0;
  int J = 0;
  std::vector<double> coeffs;

  int rows() const { return 2 * J + 1; }
  int dim_out() const { return 2 * l_out + 1; }
  int dim_in() const { return 2 * l_in + 1; }
  double at(int m, int a, int b) const {
    return coeffs[(static_cast<std::size_t>(m) * dim_out() + a) * dim_in() + b];
  }
  /// (2J+1) x (dim_out * dim_in) matrix view.
  Matrix as_matrix() const;
};

/// Cached after first use; safe to call from several threads.
const CGTensor& clebsch_gordan(int l_out, int l_in, int J);

/// Real Wigner-D matrix of degree l: Y_l(R x) = D^l(R) Y_l(x).
Matrix wigner_d(int l, const Rotation& R);

/// Cartesian (x, y, z) -> real degree-1 order (m = -1, 0, 1).
Mat3 cartesian_to_type1();

/// Location of one (l_in, l_out) kernel inside a per-edge basis buffer. The
/// buffer holds, for J = J_min..J_min+J_count-1, row-major
/// (2*l_out+1) x (2*l_in+1) matrices back to back.
struct KernelBlock {
  int l_in = 0;
  int l_out = 0;
  int J_min = 0;
  int J_count = 0;
  std::size_t offset = 0;
  /// Coupling tensors for J_min.. (pointers into the global cache).
  std::vector<const CGTensor*> cg;

  int dim_in() const { return 2 * l_in + 1; }
  int dim_out() const { return 2 * l_out + 1; }
  std::size_t matrix_size() const { return static_cast<std::size_t>(dim_in()) * dim_out(); }
};

/// All kernel blocks between two fibers, ordered by (l_in, l_out).
class BasisLayout {
 public:
  BasisLayout() = default;
  BasisLayout(const Fiber& fiber_in, const Fiber& fiber_out);

  const Fiber& fiber_in() const { return in_; }
  const Fiber& fiber_out() const { return out_; }
  const std::vector<KernelBlock>& blocks() const { return blocks_; }
  /// Buffer length per edge.
  std::size_t size() const { return size_; }
  /// Largest J over all blocks.
  int max_degree() const { return max_J_; }
  const KernelBlock* find(int l_in, int l_out) const;

 private:
  Fiber in_;
  Fiber out_;
  std::vector<KernelBlock> blocks_;
  std::size_t size_ = 0;
  int max_J_ = 0;
};

/// B_J(x) = sum_m Y_{J,m}(x/|x|) Q_{J,m} for one CG tensor; result is
/// (2*l_out+1) x (2*l_in+1).
Matrix basis_from_cg(const CGTensor& cg, const Vec3& rel_pos);

/// Per-edge equivariant basis between two fibers.
struct BasisEntry {
  BasisLayout layout;
  std::vector<double> values;

  /// B_J for the (l_in, l_out) kernel.
  Matrix matrix(int l_in, int l_out, int J) const;
};

/// Throws GeometryError when |rel_pos| < kMinRadius.
BasisEntry equivariant_basis(const Vec3& rel_pos, const Fiber& fiber_in, const Fiber& fiber_out);

/// Fills `out` (layout.size() entries) with the basis for the direction of
/// `rel_pos`. No radius check; callers clamp.
void fill_basis(const BasisLayout& layout, const Vec3& rel_pos, std::span<double> out);

/// Vector-Jacobian product of fill_basis: returns sum_k grad_out[k] * d out[k] / d rel_pos.
Vec3 basis_vjp(const BasisLayout& layout, const Vec3& rel_pos, std::span<const double> grad_out);

}  // namespace ise3::so3
