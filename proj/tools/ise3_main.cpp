// ise3: dataset generation, training, evaluation, table reproduction and
// verification suites.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ise3/checkpoint.hpp"
#include "ise3/config.hpp"
#include "ise3/errors.hpp"
#include "ise3/experiment.hpp"
#include "ise3/optim.hpp"
#include "ise3/stats.hpp"
#include "ise3/toysim.hpp"
#include "ise3/verify.hpp"

using namespace ise3;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitUsage = 2;
constexpr int kExitVerify = 3;
constexpr int kExitNumeric = 4;

struct Global {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string config;
};

void log_err(const std::string& s) { std::cerr << s << std::endl; }

// Config file (if any) over `defaults`, then the global flags.
cfg::RunConfig run_config(const Global& g, const cfg::RunConfig& defaults) {
  cfg::RunConfig c = g.config.empty() ? defaults : cfg::load(g.config, defaults);
  if (g.seed) c.train.seed = *g.seed;
  if (g.threads) c.train.threads = *g.threads;
  c.validate();
  return c;
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty() || out == "-")
    std::cout << text;
  else
    exp::write_text(out, text);
}

struct GenArgs {
  int n = toy::kDefaultNodes;
  int count = 512;
  std::string out;
};

// Instance k of `gen --seed s` is instance k of run 0 of the test stream with base seed s.
int cmd_gen(const GenArgs& a, const Global& g) {
  if (a.n < 2) throw ArgumentError("gen: --n must be at least 2");
  if (a.count < 0) throw ArgumentError("gen: --count must be non-negative");
  const std::uint64_t seed = g.seed.value_or(0);
  toy::write_dataset(a.out, optim::test_set(seed, 0, a.count, a.n));
  return kExitOk;
}

struct TrainArgs {
  std::string preset;
  bool no_basis_grad = false;
  std::optional<int> K;
  std::optional<int> epochs;
  std::optional<int> examples;
  std::string out_checkpoint;
  std::string metrics;
};

int cmd_train(const TrainArgs& a, const Global& g) {
  cfg::RunConfig c = run_config(g, cfg::RunConfig::full());
  net::ModelConfig m = c.model;
  if (a.preset == "single" || a.preset == "iterative") {
    const net::ModelConfig p = a.preset == "single" ? net::ModelConfig::single_pass() : net::ModelConfig::iterative();
    m.n_blocks = p.n_blocks;
    m.layers_per_block = p.layers_per_block;
  } else if (!a.preset.empty()) {
    throw ArgumentError("train: --preset must be single or iterative");
  }
  if (a.no_basis_grad) m.basis_gradients = false;
  if (a.K) m.K = *a.K;
  if (a.epochs) c.train.epochs = *a.epochs;
  if (a.examples) c.train.examples_per_epoch = *a.examples;
  m.validate();
  c.train.validate();

  const std::size_t count = net::parameter_count(m);
  std::printf("model %s: %d block(s) x %d layer(s), K %s, %zu parameters\n", exp::model_method(m).c_str(), m.n_blocks,
              m.layers_per_block, m.K == 0 ? "FULL" : std::to_string(m.K).c_str(), count);
  std::fflush(stdout);

  const exp::TrainedModel t = exp::train_cached(m, c.train, {}, log_err);
  ckpt::save(a.out_checkpoint, t.checkpoint);
  const std::string metrics = a.metrics.empty() ? a.out_checkpoint + ".metrics.csv" : a.metrics;
  exp::write_text(metrics, exp::metrics_csv(t.metrics));
  std::printf("wrote %s and %s\n", a.out_checkpoint.c_str(), metrics.c_str());
  return kExitOk;
}

struct EvalArgs {
  std::vector<std::string> checkpoints;
  std::string testset;
  bool gd_post = false;
  std::optional<int> K;
  std::string out;
};

int cmd_eval(const EvalArgs& a, const Global& g) {
  const cfg::RunConfig c = run_config(g, cfg::RunConfig::full());
  const auto tests = toy::read_dataset(a.testset);
  if (tests.empty()) throw ArgumentError("eval: " + a.testset + " holds no instances");

  exp::ResultsTable table;
  if (a.checkpoints.empty()) {
    const double e = optim::mean_energy(optim::Method::gd, nullptr, nullptr, tests, c.gd);
    table.rows.push_back({"gd", a.K.value_or(0), e, std::nullopt, 1});
  } else {
    // One row per (method, K); checkpoints of the same kind are independent runs.
    std::vector<std::pair<std::string, int>> order;
    std::map<std::pair<std::string, int>, std::vector<double>> values;
    for (const auto& path : a.checkpoints) {
      const ckpt::Checkpoint ck = ckpt::load(path);
      if (a.K && ck.config.K != *a.K)
        throw ConfigError("eval: " + path + " was trained with K = " + std::to_string(ck.config.K) + ", not " +
                          std::to_string(*a.K));
      for (const auto& inst : tests)
        if (ck.config.K != 0 && ck.config.K > inst.n() - 1)
          throw ConfigError("eval: " + path + " needs at least " + std::to_string(ck.config.K + 1) + " nodes");
      const std::string method = exp::model_method(ck.config) + (a.gd_post ? "_gd" : "");
      const auto kind = std::pair{method, ck.config.K};
      if (!values.count(kind)) order.push_back(kind);
      values[kind].push_back(optim::mean_energy(a.gd_post ? optim::Method::model_gd : optim::Method::model, &ck.params,
                                                &ck.config, tests, c.gd));
    }
    for (const auto& kind : order) {
      const stats::Interval iv = stats::t_interval(values[kind]);
      table.rows.push_back({kind.first, kind.second, iv.mean, iv.half_width, iv.runs});
    }
  }
  emit(exp::to_csv(table), a.out);
  return kExitOk;
}

struct ReproduceArgs {
  int table = 1;
  std::string scale = "desk";
  std::string cache_dir = "ise3_cache";
  std::string out;
  std::string summary;
  bool strict = false;
};

int cmd_reproduce(const ReproduceArgs& a, const Global& g) {
  const bool desk = a.scale == "desk";
  const cfg::RunConfig c = run_config(g, desk ? cfg::RunConfig::desk() : cfg::RunConfig::full());
  const exp::Reproduction r =
      exp::reproduce(a.table, c, desk ? exp::Scale::desk : exp::Scale::full, a.cache_dir, log_err);
  emit(exp::to_csv(r.table), a.out);
  if (!a.summary.empty()) exp::write_text(a.summary, r.summary);
  std::cerr << r.summary;
  if (a.strict)
    for (const auto& v : r.verdicts)
      if (v.binding && !v.holds) return kExitVerify;
  return kExitOk;
}

int cmd_verify(const std::string& suite) {
  std::vector<std::string> names = suite == "all" ? verify::suite_names() : std::vector<std::string>{suite};
  bool ok = true;
  for (const auto& name : names) {
    const verify::SuiteReport rep = verify::run_suite(name);
    std::cout << rep.to_string() << std::flush;
    ok = ok && rep.passed();
  }
  return ok ? kExitOk : kExitVerify;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Iterative SE(3)-equivariant refinement on a double-well toy problem"};
  app.require_subcommand(1);
  app.fallthrough();

  Global g;
  app.add_option("--seed", g.seed, "Base seed (overrides the config)");
  app.add_option("--threads", g.threads, "Worker threads for training")->check(CLI::PositiveNumber);
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Write random problem instances as JSON lines");
  gen_cmd->add_option("--n", gen.n, "Nodes per instance");
  gen_cmd->add_option("--count", gen.count, "Number of instances");
  gen_cmd->add_option("--out", gen.out, "Output path")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint plus metrics CSV");
  train_cmd->add_option("--preset", train.preset, "single or iterative (default: the config's model)");
  train_cmd->add_flag("--no-basis-grad", train.no_basis_grad, "Stop gradients through recomputed geometry");
  train_cmd->add_option("--K", train.K, "Neighborhood size, 0 for fully connected");
  train_cmd->add_option("--epochs", train.epochs, "Override train.epochs");
  train_cmd->add_option("--examples", train.examples, "Override train.examples_per_epoch");
  train_cmd->add_option("--out-checkpoint", train.out_checkpoint, "Checkpoint path")->required();
  train_cmd->add_option("--metrics", train.metrics, "Metrics CSV path (default <checkpoint>.metrics.csv)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Mean final energy of checkpoints (or plain GD) on a test set");
  eval_cmd->add_option("--checkpoints", ev.checkpoints, "Checkpoint files");
  eval_cmd->add_option("--testset", ev.testset, "JSON-lines test set")->required();
  eval_cmd->add_flag("--gd-post", ev.gd_post, "Refine model outputs with gradient descent");
  eval_cmd->add_option("--K", ev.K, "Expected neighborhood size; checkpoints must match");
  eval_cmd->add_option("--out", ev.out, "Results CSV path (default stdout)");

  ReproduceArgs rep;
  auto* rep_cmd = app.add_subcommand("reproduce", "Train and evaluate every column of table 1 or 2");
  rep_cmd->add_option("--table", rep.table, "1 or 2")->check(CLI::IsMember({1, 2}));
  rep_cmd->add_option("--scale", rep.scale, "desk or full")->check(CLI::IsMember({"desk", "full"}));
  rep_cmd->add_option("--cache-dir", rep.cache_dir, "Trained-model cache ('' disables)");
  rep_cmd->add_option("--out", rep.out, "Results CSV path (default stdout)");
  rep_cmd->add_option("--summary", rep.summary, "Human-readable summary path");
  rep_cmd->add_flag("--strict", rep.strict, "Exit 3 when a binding ordering fails");

  std::string suite = "all";
  auto* verify_cmd = app.add_subcommand("verify", "Run verification suites");
  std::vector<std::string> suites = verify::suite_names();
  suites.push_back("all");
  verify_cmd->add_option("--suite", suite, "Suite name or all")->check(CLI::IsMember(suites));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen(gen, g);
    if (*train_cmd) return cmd_train(train, g);
    if (*eval_cmd) return cmd_eval(ev, g);
    if (*rep_cmd) return cmd_reproduce(rep, g);
    if (*verify_cmd) return cmd_verify(suite);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitUsage;
}
