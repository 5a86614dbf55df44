#include "ise3/toysim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "ise3/errors.hpp"

namespace ise3::toy {

namespace {

double well(double s) { return s * s * s * s - s * s + 0.1 * s; }

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

const PotentialSpec& PotentialSpec::get() {
  static const PotentialSpec spec = [] {
    // Stationary points solve s^3 - s/2 + 1/40 = 0 (three real roots).
    const double p = -0.5, q = 0.025;
    const double amp = 2.0 * std::sqrt(-p / 3.0);
    const double phi = std::acos(3.0 * q / (2.0 * p) * std::sqrt(-3.0 / p)) / 3.0;
    double roots[3];
    for (int k = 0; k < 3; ++k) roots[k] = amp * std::cos(phi - 2.0 * std::numbers::pi * k / 3.0);
    std::sort(roots, roots + 3);
    PotentialSpec s{};
    s.s_global = roots[0];
    s.s_barrier = roots[1];
    s.s_local = roots[2];
    s.p_min = -well(s.s_global);
    return s;
  }();
  return spec;
}

double pair_potential(double r, double a) {
  const double s = r - a - 1.0;
  return well(s) + PotentialSpec::get().p_min;
}

double pair_force_mag(double r, double a) {
  const double s = r - a - 1.0;
  return 4.0 * s * s * s - 2.0 * s + 0.1;
}

double total_energy(const Positions& x, const Interactions& a) {
  const Eigen::Index n = x.rows();
  double e = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) e += pair_potential((x.row(i) - x.row(j)).norm(), a(i, j));
  return e;
}

Positions energy_gradient(const Positions& x, const Interactions& a) {
  const Eigen::Index n = x.rows();
  Positions g = Positions::Zero(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const Eigen::RowVector3d d = x.row(i) - x.row(j);
      const double r = d.norm();
      if (r == 0.0) continue;
      const Eigen::RowVector3d f = pair_force_mag(r, a(i, j)) / r * d;
      g.row(i) += f;
      g.row(j) -= f;
    }
  return g;
}

diff::Var total_energy(const diff::Var& x, const Interactions& a) {
  const std::size_t n = x.value().rows();
  std::vector<std::size_t> first, second;
  diff::Tensor offset = diff::Tensor::matrix(n * (n - 1) / 2, 1);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j, ++k) {
      first.push_back(i);
      second.push_back(j);
      offset[k] = a(i, j) + 1.0;
    }
  diff::Tape& tape = x.tape();
  const diff::Var r = diff::sqrt_norm(diff::gather_diff(x, first, second), 0.0);
  const diff::Var s = diff::sub(r, tape.constant(std::move(offset)));
  const diff::Var p = diff::add(diff::sub(diff::power(s, 4.0), diff::power(s, 2.0)), diff::scale(s, 0.1));
  return diff::shift(diff::sum(p), static_cast<double>(k) * PotentialSpec::get().p_min);
}

Positions centered(const Positions& x) {
  Positions c = x;
  if (x.rows() > 0) c.rowwise() -= x.colwise().mean();
  return c;
}

ProblemInstance sample_instance(int n, std::uint64_t seed) {
  if (n < 2) throw ArgumentError("sample_instance: need at least two nodes");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(kParamLow, kParamHigh);
  std::normal_distribution<double> normal(0.0, 1.0);

  ProblemInstance inst;
  inst.seed = seed;
  inst.a = Interactions::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) inst.a(i, j) = inst.a(j, i) = unif(rng);

  for (int attempt = 0; attempt < 1000; ++attempt) {
    Positions x(n, 3);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 3; ++c) x(i, c) = normal(rng);
    double dmin = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j) dmin = std::min(dmin, (x.row(i) - x.row(j)).norm());
    if (dmin >= kMinDistance) {
      inst.positions = centered(x);
      return inst;
    }
  }
  throw GenerationError("sample_instance: no configuration with minimum distance " + std::to_string(kMinDistance) +
                        " after 1000 attempts (seed " + std::to_string(seed) + ")");
}

void validate(const ProblemInstance& inst) {
  const int n = inst.n();
  if (n < 2) throw ArgumentError("instance: fewer than two nodes");
  if (inst.a.rows() != n || inst.a.cols() != n) throw ArgumentError("instance: interaction matrix shape mismatch");
  if (!inst.positions.allFinite() || !inst.a.allFinite()) throw ArgumentError("instance: non-finite values");
  for (int i = 0; i < n; ++i) {
    if (inst.a(i, i) != 0.0) throw ArgumentError("instance: non-zero diagonal interaction");
    for (int j = i + 1; j < n; ++j) {
      if (inst.a(i, j) != inst.a(j, i)) throw ArgumentError("instance: interaction matrix not symmetric");
      if (inst.a(i, j) < kParamLow || inst.a(i, j) > kParamHigh)
        throw ArgumentError("instance: interaction parameter outside [0.1, 1.0]");
      if ((inst.positions.row(i) - inst.positions.row(j)).norm() < kMinDistance)
        throw ArgumentError("instance: nodes closer than the minimum distance");
    }
  }
}

Neighborhoods select_neighborhoods(const Positions& x, const Interactions& a, int K) {
  const int n = static_cast<int>(x.rows());
  if (K < 1 || K > n - 1)
    throw ArgumentError("select_neighborhoods: K = " + std::to_string(K) + " outside [1, " + std::to_string(n - 1) + "]");
  Neighborhoods out(n);
  std::vector<std::pair<double, int>> cand;
  for (int i = 0; i < n; ++i) {
    cand.clear();
    for (int j = 0; j < n; ++j)
      if (j != i) cand.emplace_back(std::abs(pair_force_mag((x.row(i) - x.row(j)).norm(), a(i, j))), j);
    std::stable_sort(cand.begin(), cand.end(), [](const auto& l, const auto& r) { return l.first > r.first; });
    for (int k = 0; k < K; ++k) out[i].push_back(cand[k].second);
  }
  return out;
}

std::string to_json_line(const ProblemInstance& inst) {
  std::ostringstream os;
  const int n = inst.n();
  os << "{\"seed\":" << inst.seed << ",\"n\":" << n << ",\"positions\":[";
  for (int i = 0; i < n; ++i) {
    os << (i ? "," : "") << '[' << fmt17(inst.positions(i, 0)) << ',' << fmt17(inst.positions(i, 1)) << ','
       << fmt17(inst.positions(i, 2)) << ']';
  }
  os << "],\"a\":[";
  bool first = true;
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      os << (first ? "" : ",") << fmt17(inst.a(i, j));
      first = false;
    }
  os << "]}";
  return os.str();
}

ProblemInstance from_json_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("dataset line: ") + e.what());
  }
  try {
    ProblemInstance inst;
    inst.seed = j.at("seed").get<std::uint64_t>();
    const int n = j.at("n").get<int>();
    const auto& pos = j.at("positions");
    const auto& tri = j.at("a");
    if (n < 2 || pos.size() != static_cast<std::size_t>(n) || tri.size() != static_cast<std::size_t>(n * (n - 1) / 2))
      throw ArgumentError("dataset line: sizes inconsistent with n = " + std::to_string(n));
    inst.positions.resize(n, 3);
    for (int i = 0; i < n; ++i) {
      if (pos[i].size() != 3) throw ArgumentError("dataset line: position without three coordinates");
      for (int c = 0; c < 3; ++c) inst.positions(i, c) = pos[i][c].get<double>();
    }
    inst.a = Interactions::Zero(n, n);
    std::size_t k = 0;
    for (int i = 0; i < n; ++i)
      for (int jj = i + 1; jj < n; ++jj) inst.a(i, jj) = inst.a(jj, i) = tri[k++].get<double>();
    validate(inst);
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("dataset line: ") + e.what());
  }
}

void write_dataset(const std::filesystem::path& path, const std::vector<ProblemInstance>& instances) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& inst : instances) out << to_json_line(inst) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<ProblemInstance> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::vector<ProblemInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(from_json_line(line));
    } catch (const ArgumentError& e) {
      throw ArgumentError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ise3::toy
