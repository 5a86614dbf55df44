#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ise3/diff.hpp"
#include "ise3/equinet.hpp"
#include "ise3/toysim.hpp"

namespace ise3::optim {

struct TrainConfig {
  int epochs = 100;
  int examples_per_epoch = 5000;
  int batch_size = 32;
  double lr_start = 1e-3;
  double lr_end = 1e-4;
  std::uint64_t seed = 0;
  int n_nodes = toy::kDefaultNodes;
  /// Worker threads for per-example tapes; results do not depend on it.
  int threads = 1;

  /// Throws ConfigError.
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct GDConfig {
  double step = 0.02;
  double update_norm_tol = 1e-3;
  int max_iters = 100000;
  /// Halve the step (for that iteration only) while it would raise the energy.
  bool halving = true;
  int max_halvings = 20;

  void validate() const;
  bool operator==(const GDConfig&) const = default;
};

/// Streams of per-instance seeds. Training and test instances come from
/// different streams so they never coincide.
enum class SeedStream : std::uint64_t { train = 1, test = 2, init = 3 };
std::uint64_t derive_seed(std::uint64_t base, SeedStream stream, std::uint64_t a, std::uint64_t b = 0);

double cosine_lr(int epoch, const TrainConfig& config);

class Adam {
 public:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  /// One bias-corrected step over matching lists of parameters and gradients.
  /// Throws ArgumentError on shape mismatch.
  void step(std::span<diff::Tensor> params, std::span<const diff::Tensor> grads, double lr);
  long steps() const { return t_; }

 private:
  std::vector<diff::Tensor> m_, v_;
  long t_ = 0;
};

// Reported energies are per pair: total energy / (n(n-1)/2). The loss itself
// is the total energy.
struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double mean_train_energy = 0.0;
};

/// Energy and parameter gradients of one instance, positions taken as constants.
struct ExampleResult {
  double energy = 0.0;
  std::vector<diff::Tensor> grads;
};
ExampleResult example_gradient(const net::ModelParams& params, const net::ModelConfig& model,
                               const toy::ProblemInstance& inst);

struct TrainResult {
  net::ModelParams params;
  std::vector<EpochMetrics> metrics;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Adam on the batch-mean final energy with cosine learning-rate decay. Fresh
/// instances every epoch. Throws NumericError naming the instance seed when an
/// energy or gradient is not finite.
TrainResult train(const net::ModelConfig& model, const TrainConfig& config, const EpochCallback& on_epoch = {});

struct GDResult {
  toy::Positions positions;
  double energy = 0.0;
  int iterations = 0;
  bool converged = false;
  /// Iterations that needed the halving fallback.
  int halved_steps = 0;
};

/// x <- x - step * grad E(x) until every per-node update is shorter than the
/// tolerance. Hitting max_iters is reported through `converged`, not thrown.
GDResult gd_refine(const toy::Positions& x, const toy::Interactions& a, const GDConfig& config);

/// Final positions of the model for one instance (centred frame).
toy::Positions model_positions(const net::ModelParams& params, const net::ModelConfig& model,
                               const toy::ProblemInstance& inst);

/// Test instances for one evaluation run.
std::vector<toy::ProblemInstance> test_set(std::uint64_t base_seed, int run, int count, int n_nodes);

enum class Method { gd, model, model_gd };

/// Mean final per-pair energy over the instances. `params`/`model` are ignored for Method::gd.
double mean_energy(Method method, const net::ModelParams* params, const net::ModelConfig* model,
                   std::span<const toy::ProblemInstance> instances, const GDConfig& gd);

}  // namespace ise3::optim
