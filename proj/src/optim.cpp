#include "ise3/optim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <thread>

#include "ise3/errors.hpp"

namespace ise3::optim {

using diff::Tape;
using diff::Tensor;
using diff::Var;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Runs body(k) for k in [0, count) on up to `threads` workers.
template <class F>
void parallel_for(std::size_t count, int threads, F&& body) {
  const std::size_t workers = std::min<std::size_t>(std::max(threads, 1), count);
  if (workers <= 1) {
    for (std::size_t k = 0; k < count; ++k) body(k);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k; (k = next.fetch_add(1)) < count;) body(k);
      } catch (...) {
        errors[w] = std::current_exception();
        next = count;
      }
    });
  pool.clear();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

double max_row_norm(const toy::Positions& u) { return u.rowwise().norm().maxCoeff(); }

double pairs(int n) { return 0.5 * n * (n - 1); }

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be at least 1");
  if (examples_per_epoch < 1) throw ConfigError("train: examples_per_epoch must be at least 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be at least 1");
  if (!(lr_end >= 0.0) || !(lr_start >= lr_end)) throw ConfigError("train: need lr_start >= lr_end >= 0");
  if (n_nodes < 2) throw ConfigError("train: n_nodes must be at least 2");
  if (threads < 1) throw ConfigError("train: threads must be at least 1");
}

void GDConfig::validate() const {
  if (!(step > 0.0)) throw ConfigError("gd: step must be positive");
  if (!(update_norm_tol > 0.0)) throw ConfigError("gd: update_norm_tol must be positive");
  if (max_iters < 0) throw ConfigError("gd: max_iters must be non-negative");
  if (max_halvings < 0) throw ConfigError("gd: max_halvings must be non-negative");
}

std::uint64_t derive_seed(std::uint64_t base, SeedStream stream, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = splitmix(base);
  h = splitmix(h ^ static_cast<std::uint64_t>(stream));
  h = splitmix(h ^ a);
  return splitmix(h ^ b);
}

double cosine_lr(int epoch, const TrainConfig& config) {
  if (epoch < 0 || epoch >= config.epochs)
    throw ArgumentError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(config.epochs) + ")");
  if (config.epochs == 1) return config.lr_start;
  const double t = static_cast<double>(epoch) / (config.epochs - 1);
  return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + std::cos(std::numbers::pi * t));
}

void Adam::step(std::span<Tensor> params, std::span<const Tensor> grads, double lr) {
  if (params.size() != grads.size()) throw ArgumentError("adam: parameter and gradient counts differ");
  if (m_.empty()) {
    for (const Tensor& p : params) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }
  if (m_.size() != params.size()) throw ArgumentError("adam: parameter count changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k)
    if (!params[k].same_shape(grads[k]) || !params[k].same_shape(m_[k]))
      throw ArgumentError("adam: shape mismatch at entry " + std::to_string(k) + ": " + params[k].shape_string() +
                          " vs " + grads[k].shape_string());
  ++t_;
  const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    double* p = params[k].data();
    const double* g = grads[k].data();
    double* m = m_[k].data();
    double* v = v_[k].data();
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
      v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
    }
  }
}

ExampleResult example_gradient(const net::ModelParams& params, const net::ModelConfig& model,
                               const toy::ProblemInstance& inst) {
  Tape tape;
  const net::BoundParams bp(tape, params, true);
  const net::ForwardResult fr = net::iterative_forward(tape, inst, bp, model);
  ExampleResult r;
  r.energy = fr.energy.value().item();
  if (!std::isfinite(r.energy)) return r;
  r.grads = bp.gradients(tape.backward(fr.energy));
  return r;
}

TrainResult train(const net::ModelConfig& model, const TrainConfig& config, const EpochCallback& on_epoch) {
  model.validate();
  config.validate();
  TrainResult res;
  res.params = net::init_params(model, derive_seed(config.seed, SeedStream::init, 0));
  Adam adam;

  std::vector<Tensor> params_view;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, config);
    double energy_sum = 0.0;
    for (int start = 0; start < config.examples_per_epoch; start += config.batch_size) {
      const int count = std::min(config.batch_size, config.examples_per_epoch - start);
      std::vector<toy::ProblemInstance> batch;
      batch.reserve(count);
      for (int k = 0; k < count; ++k)
        batch.push_back(toy::sample_instance(config.n_nodes, derive_seed(config.seed, SeedStream::train, epoch, start + k)));

      std::vector<ExampleResult> results(count);
      parallel_for(count, config.threads,
                   [&](std::size_t k) { results[k] = example_gradient(res.params, model, batch[k]); });

      std::vector<Tensor> grads;
      for (int k = 0; k < count; ++k) {
        const ExampleResult& r = results[k];
        bool finite = std::isfinite(r.energy);
        for (const Tensor& g : r.grads) finite = finite && g.all_finite();
        if (!finite) {
          std::ostringstream os;
          os << "train: non-finite loss or gradient at epoch " << epoch << " on instance seed " << batch[k].seed
             << " (energy " << r.energy << ")";
          throw NumericError(os.str());
        }
        energy_sum += r.energy / pairs(config.n_nodes);
        if (grads.empty()) {
          grads = r.grads;
        } else {
          for (std::size_t p = 0; p < grads.size(); ++p) grads[p].mat() += r.grads[p].mat();
        }
      }
      for (Tensor& g : grads) g.mat() /= static_cast<double>(count);

      params_view.clear();
      for (auto& e : res.params.entries()) params_view.push_back(std::move(e.value));
      adam.step(params_view, grads, lr);
      for (std::size_t p = 0; p < params_view.size(); ++p) res.params.entries()[p].value = std::move(params_view[p]);
    }
    const EpochMetrics m{epoch, lr, energy_sum / config.examples_per_epoch};
    res.metrics.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return res;
}

GDResult gd_refine(const toy::Positions& x0, const toy::Interactions& a, const GDConfig& config) {
  config.validate();
  GDResult r;
  r.positions = x0;
  r.energy = toy::total_energy(x0, a);
  for (; r.iterations < config.max_iters;) {
    const toy::Positions g = toy::energy_gradient(r.positions, a);
    double step = config.step;
    if (max_row_norm(step * g) < config.update_norm_tol) {
      r.converged = true;
      return r;
    }
    toy::Positions next = r.positions - step * g;
    double e = toy::total_energy(next, a);
    if (config.halving && !(e <= r.energy)) {
      int h = 0;
      while (!(e <= r.energy) && h < config.max_halvings) {
        step *= 0.5;
        next = r.positions - step * g;
        e = toy::total_energy(next, a);
        ++h;
      }
      ++r.halved_steps;
      // No descent even at the smallest step: the point is stationary to
      // working precision.
      if (!(e <= r.energy)) return r;
    }
    r.positions = std::move(next);
    r.energy = e;
    ++r.iterations;
  }
  return r;
}

toy::Positions model_positions(const net::ModelParams& params, const net::ModelConfig& model,
                               const toy::ProblemInstance& inst) {
  Tape tape;
  const net::BoundParams bp(tape, params, false);
  const net::ForwardResult fr = net::iterative_forward(tape, inst, bp, model);
  const Tensor& x = fr.positions.back().value();
  return toy::Positions(Eigen::Map<const diff::RowMatrix>(x.data(), x.rows(), 3));
}

std::vector<toy::ProblemInstance> test_set(std::uint64_t base_seed, int run, int count, int n_nodes) {
  std::vector<toy::ProblemInstance> out;
  out.reserve(count);
  for (int k = 0; k < count; ++k) out.push_back(toy::sample_instance(n_nodes, derive_seed(base_seed, SeedStream::test, run, k)));
  return out;
}

double mean_energy(Method method, const net::ModelParams* params, const net::ModelConfig* model,
                   std::span<const toy::ProblemInstance> instances, const GDConfig& gd) {
  if (method != Method::gd && (!params || !model)) throw ArgumentError("mean_energy: model method without parameters");
  if (instances.empty()) throw ArgumentError("mean_energy: empty instance set");
  double sum = 0.0;
  for (const auto& inst : instances) {
    const double per_pair = 1.0 / pairs(inst.n());
    switch (method) {
      case Method::gd:
        sum += per_pair * gd_refine(inst.positions, inst.a, gd).energy;
        break;
      case Method::model:
        sum += per_pair * toy::total_energy(model_positions(*params, *model, inst), inst.a);
        break;
      case Method::model_gd:
        sum += per_pair * gd_refine(model_positions(*params, *model, inst), inst.a, gd).energy;
        break;
    }
  }
  return sum / static_cast<double>(instances.size());
}

}  // namespace ise3::optim
