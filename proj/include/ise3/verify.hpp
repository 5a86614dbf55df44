#pragma once

#include <string>
#include <vector>

namespace ise3::verify {

struct Check {
  std::string name;
  double observed = 0.0;
  double threshold = 0.0;
  /// observed < threshold, or observed <= threshold when `inclusive`.
  bool pass = false;
};

struct SuiteReport {
  std::string suite;
  std::vector<Check> checks;

  bool passed() const;
  const Check* find(const std::string& name) const;
  std::string to_string() const;
};

/// Test fixture: corrupt one coupling coefficient before the so3 checks.
struct Mutation {
  bool flip_cg_sign = false;
};

/// Harmonic orthonormality, Wigner-D composition and degree-1 equivalence,
/// coupling orthogonality and basis equivariance over `rotations` samples.
SuiteReport so3_suite(int rotations = 100, const Mutation& mutation = {});
/// Every tape primitive and fused layer op, plus the full three-block model on
/// a tiny fiber, against central differences.
SuiteReport gradcheck_suite();
/// Rotation equivariance and translation invariance of both presets.
SuiteReport equivariance_suite(int seeds = 20);
/// Stationary points of the pair potential against a bisection oracle.
SuiteReport potential_suite();
/// Stopped basis gradients against the constant-geometry reference.
SuiteReport ablation_suite();
/// Two-particle descent from s = 0 to the global well, with the operational
/// tolerance `tol` on per-node updates.
SuiteReport gd_suite(double tol);

/// The operational stopping tolerance (1e-3) halts two-particle descent about
/// 1e-2 short of the analytic well; the analytic check needs a tighter one.
inline constexpr double kAnalyticGdTol = 1e-6;

/// so3, gradcheck, equivariance, potential, ablation or gd (at kAnalyticGdTol).
/// Throws ArgumentError on unknown names.
SuiteReport run_suite(const std::string& name);
std::vector<std::string> suite_names();

}  // namespace ise3::verify
