#include "ise3/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "ise3/errors.hpp"

namespace ise3::cfg {

using nlohmann::json;

namespace {

// Reads known keys of one object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: " + name_ + " must be an object");
  }

  void read(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      const auto x = v->get<std::int64_t>();
      if (x < INT32_MIN || x > INT32_MAX) fail(key, "a 32-bit integer");
      out = static_cast<int>(x);
    }
  }
  void read(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  const json* section(const char* key) { return take(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("config: unknown key " + name_ + "." + k);
  }

 private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("config: " + name_ + "." + key + " must be " + what);
  }

  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

}  // namespace

void ExperimentConfig::validate() const {
  if (test_instances < 1) throw ConfigError("experiment: test_instances must be at least 1");
  if (runs < 1) throw ConfigError("experiment: runs must be at least 1");
  if (n_nodes < 2) throw ConfigError("experiment: n_nodes must be at least 2");
}

RunConfig RunConfig::full() { return RunConfig{}; }

RunConfig RunConfig::desk() {
  RunConfig c;
  c.train.epochs = 30;
  c.train.examples_per_epoch = 1000;
  c.experiment.runs = 5;
  return c;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  gd.validate();
  experiment.validate();
  if (train.n_nodes != experiment.n_nodes) throw ConfigError("config: train.n_nodes and experiment.n_nodes differ");
}

json to_json(const RunConfig& c) {
  json j;
  j["model"] = {{"n_blocks", c.model.n_blocks},
                {"layers_per_block", c.model.layers_per_block},
                {"max_type", c.model.max_type},
                {"channels", c.model.channels},
                {"heads", c.model.heads},
                {"radial_hidden", c.model.radial_hidden},
                {"K", c.model.K},
                {"basis_gradients", c.model.basis_gradients}};
  j["train"] = {{"epochs", c.train.epochs},
                {"examples_per_epoch", c.train.examples_per_epoch},
                {"batch_size", c.train.batch_size},
                {"lr_start", c.train.lr_start},
                {"lr_end", c.train.lr_end},
                {"seed", c.train.seed},
                {"n_nodes", c.train.n_nodes},
                {"threads", c.train.threads}};
  j["gd"] = {{"step", c.gd.step},
             {"update_norm_tol", c.gd.update_norm_tol},
             {"max_iters", c.gd.max_iters},
             {"halving", c.gd.halving},
             {"max_halvings", c.gd.max_halvings}};
  j["experiment"] = {{"test_instances", c.experiment.test_instances},
                     {"runs", c.experiment.runs},
                     {"test_seed", c.experiment.test_seed},
                     {"n_nodes", c.experiment.n_nodes}};
  return j;
}

RunConfig from_json(const json& j, const RunConfig& defaults) {
  RunConfig c = defaults;
  Section top(j, "config");
  if (const json* m = top.section("model")) {
    Section s(*m, "model");
    s.read("n_blocks", c.model.n_blocks);
    s.read("layers_per_block", c.model.layers_per_block);
    s.read("max_type", c.model.max_type);
    s.read("channels", c.model.channels);
    s.read("heads", c.model.heads);
    s.read("radial_hidden", c.model.radial_hidden);
    s.read("K", c.model.K);
    s.read("basis_gradients", c.model.basis_gradients);
    s.finish();
  }
  if (const json* t = top.section("train")) {
    Section s(*t, "train");
    s.read("epochs", c.train.epochs);
    s.read("examples_per_epoch", c.train.examples_per_epoch);
    s.read("batch_size", c.train.batch_size);
    s.read("lr_start", c.train.lr_start);
    s.read("lr_end", c.train.lr_end);
    s.read("seed", c.train.seed);
    s.read("n_nodes", c.train.n_nodes);
    s.read("threads", c.train.threads);
    s.finish();
  }
  if (const json* g = top.section("gd")) {
    Section s(*g, "gd");
    s.read("step", c.gd.step);
    s.read("update_norm_tol", c.gd.update_norm_tol);
    s.read("max_iters", c.gd.max_iters);
    s.read("halving", c.gd.halving);
    s.read("max_halvings", c.gd.max_halvings);
    s.finish();
  }
  if (const json* e = top.section("experiment")) {
    Section s(*e, "experiment");
    s.read("test_instances", c.experiment.test_instances);
    s.read("runs", c.experiment.runs);
    s.read("test_seed", c.experiment.test_seed);
    s.read("n_nodes", c.experiment.n_nodes);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig load(const std::filesystem::path& path, const RunConfig& defaults) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  try {
    return from_json(j, defaults);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void save(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << to_json(c).dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace ise3::cfg
