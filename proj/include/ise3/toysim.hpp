#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ise3/diff.hpp"

namespace ise3::toy {

using Positions = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Interactions = Eigen::MatrixXd;
using Neighborhoods = std::vector<std::vector<int>>;

inline constexpr int kDefaultNodes = 10;
inline constexpr double kMinDistance = 0.05;
inline constexpr double kParamLow = 0.1;
inline constexpr double kParamHigh = 1.0;

/// Stationary points of the double well s^4 - s^2 + s/10 and the offset that
/// makes its global minimum zero.
struct PotentialSpec {
  double s_global;  // ~ -0.73091
  double s_barrier; // local maximum, ~ 0.05
  double s_local;   // second minimum, ~ 0.68051
  double p_min;     // ~ 0.32190

  static const PotentialSpec& get();
};

/// p(s) with s = r - a - 1.
double pair_potential(double r, double a);
/// dp/dr = 4 s^3 - 2 s + 0.1.
double pair_force_mag(double r, double a);

struct ProblemInstance {
  Positions positions;
  Interactions a;  // symmetric, zero diagonal
  std::uint64_t seed = 0;

  int n() const { return static_cast<int>(positions.rows()); }
};

/// Sum of pair potentials over unordered pairs.
double total_energy(const Positions& x, const Interactions& a);
/// Analytic gradient of total_energy with respect to every position.
Positions energy_gradient(const Positions& x, const Interactions& a);
/// Same energy recorded on a tape (x is n x 3).
diff::Var total_energy(const diff::Var& x, const Interactions& a);

/// a_ij ~ U[0.1, 1] for i < j, positions i.i.d. N(0, 1) with the centre of mass
/// removed, resampled until every distance is at least kMinDistance.
ProblemInstance sample_instance(int n, std::uint64_t seed);

/// Throws ArgumentError when shapes, symmetry, parameter range or minimum
/// distance are violated.
void validate(const ProblemInstance& inst);

/// For each node, the K other nodes with the largest |dp/dr|; ties go to the
/// smaller index. Lists are ordered by decreasing strength.
Neighborhoods select_neighborhoods(const Positions& x, const Interactions& a, int K);

Positions centered(const Positions& x);

// JSON-lines dataset: {"seed": u64, "n": int, "positions": [[x,y,z]...],
// "a": upper triangle, row-major}. Doubles carry 17 significant digits.
std::string to_json_line(const ProblemInstance& inst);
ProblemInstance from_json_line(const std::string& line);
void write_dataset(const std::filesystem::path& path, const std::vector<ProblemInstance>& instances);
std::vector<ProblemInstance> read_dataset(const std::filesystem::path& path);

}  // namespace ise3::toy
