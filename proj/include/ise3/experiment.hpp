#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ise3/checkpoint.hpp"
#include "ise3/config.hpp"
#include "ise3/optim.hpp"

namespace ise3::exp {

struct ResultRow {
  std::string method;
  /// Neighborhood size; 0 is fully connected (written as FULL).
  int K = 0;
  double mean_energy = 0.0;
  std::optional<double> ci_half_width;
  std::size_t runs = 0;

  bool operator==(const ResultRow&) const = default;
};

struct ResultsTable {
  std::vector<ResultRow> rows;

  const ResultRow* find(const std::string& method, int K) const;
  bool operator==(const ResultsTable&) const = default;
};

/// Header method,K,mean_energy,ci_half_width,runs; %.17g numbers; an absent
/// interval is an empty field.
std::string to_csv(const ResultsTable& t);
/// Throws ArgumentError naming the offending line.
ResultsTable from_csv(const std::string& text);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Header epoch,lr,mean_train_energy.
std::string metrics_csv(const std::vector<optim::EpochMetrics>& m);

/// Method name of a trained model: single, iterative or no_basis_grad.
std::string model_method(const net::ModelConfig& m);

/// Trains one model, or reuses a checkpoint in `cache_dir` whose stored
/// settings match exactly. An empty cache_dir disables the cache.
struct TrainedModel {
  ckpt::Checkpoint checkpoint;
  std::vector<optim::EpochMetrics> metrics;
  bool reused = false;
};
using Log = std::function<void(const std::string&)>;
TrainedModel train_cached(const net::ModelConfig& model, const optim::TrainConfig& train,
                          const std::filesystem::path& cache_dir, const Log& log = {});

struct Verdict {
  std::string claim;
  bool holds = false;
  double p_value = 1.0;
  /// Informational claims are reported but never fail a run.
  bool binding = true;
};

struct Reproduction {
  ResultsTable table;
  /// Per-run mean energies keyed by "method@K".
  std::map<std::string, std::vector<double>> per_run;
  std::vector<Verdict> verdicts;
  std::string summary;
};

enum class Scale { desk, full };

/// Published value for a (method, K) cell of tables 1-2, if it has one.
std::optional<double> published_value(const std::string& method, int K);

/// Trains and evaluates every column of table 1 or 2. `config` supplies the
/// training/GD/experiment settings (already scaled); per-run training seeds
/// are config.train.seed + run.
Reproduction reproduce(int table, const cfg::RunConfig& config, Scale scale, const std::filesystem::path& cache_dir,
                       const Log& log = {});

/// Significance level of the ordering verdicts.
inline constexpr double kAlpha = 0.05;
/// Soft tolerance on absolute means at full scale.
inline constexpr double kSoftTolerance = 0.02;

}  // namespace ise3::exp
