#include "ise3/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "ise3/errors.hpp"
#include "ise3/stats.hpp"

namespace ise3::exp {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string k_label(int K) { return K == 0 ? "FULL" : std::to_string(K); }
std::string key(const std::string& method, int K) { return method + "@" + k_label(K); }

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw ArgumentError(where + ": not a number: '" + s + "'");
  return v;
}

std::map<std::string, double> train_extras(const optim::TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"examples_per_epoch", t.examples_per_epoch},
          {"batch_size", t.batch_size},
          {"lr_start", t.lr_start},
          {"lr_end", t.lr_end},
          {"seed", static_cast<double>(t.seed)},
          {"n_nodes", t.n_nodes}};
}

std::vector<optim::EpochMetrics> parse_metrics(const std::string& text) {
  std::vector<optim::EpochMetrics> out;
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 3) throw ArgumentError("metrics: malformed line '" + line + "'");
    out.push_back({static_cast<int>(parse_double(f[0], "metrics")), parse_double(f[1], "metrics"),
                   parse_double(f[2], "metrics")});
  }
  return out;
}

Verdict less_than(const Reproduction& r, const std::string& a, const std::string& b, bool binding) {
  const auto& va = r.per_run.at(a);
  const auto& vb = r.per_run.at(b);
  Verdict v;
  v.binding = binding;
  v.claim = "mean(" + a + ") < mean(" + b + ")";
  if (va.size() < 2 || vb.size() < 2) {
    v.p_value = std::numeric_limits<double>::quiet_NaN();
    v.holds = false;
    v.claim += " [needs at least two runs]";
    return v;
  }
  v.p_value = stats::welch_less(va, vb).p_less;
  v.holds = v.p_value < kAlpha;
  return v;
}

}  // namespace

const ResultRow* ResultsTable::find(const std::string& method, int K) const {
  for (const auto& r : rows)
    if (r.method == method && r.K == K) return &r;
  return nullptr;
}

std::string to_csv(const ResultsTable& t) {
  std::string out = "method,K,mean_energy,ci_half_width,runs\n";
  for (const auto& r : t.rows) {
    out += r.method + "," + k_label(r.K) + "," + fmt17(r.mean_energy) + "," +
           (r.ci_half_width ? fmt17(*r.ci_half_width) : std::string()) + "," + std::to_string(r.runs) + "\n";
  }
  return out;
}

ResultsTable from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "method,K,mean_energy,ci_half_width,runs")
    throw ArgumentError("results: missing header");
  ResultsTable t;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = "results line " + std::to_string(lineno);
    const auto f = split(line, ',');
    if (f.size() != 5) throw ArgumentError(where + ": expected 5 fields");
    ResultRow r;
    r.method = f[0];
    if (r.method.empty()) throw ArgumentError(where + ": empty method");
    if (f[1] == "FULL") {
      r.K = 0;
    } else {
      const double k = parse_double(f[1], where);
      if (k < 1 || k != std::floor(k)) throw ArgumentError(where + ": bad K '" + f[1] + "'");
      r.K = static_cast<int>(k);
    }
    r.mean_energy = parse_double(f[2], where);
    if (!f[3].empty()) {
      r.ci_half_width = parse_double(f[3], where);
      if (*r.ci_half_width < 0) throw ArgumentError(where + ": negative interval");
    }
    const double runs = parse_double(f[4], where);
    if (runs < 1 || runs != std::floor(runs)) throw ArgumentError(where + ": bad run count");
    r.runs = static_cast<std::size_t>(runs);
    t.rows.push_back(std::move(r));
  }
  return t;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string metrics_csv(const std::vector<optim::EpochMetrics>& m) {
  std::string out = "epoch,lr,mean_train_energy\n";
  for (const auto& e : m) out += std::to_string(e.epoch) + "," + fmt17(e.lr) + "," + fmt17(e.mean_train_energy) + "\n";
  return out;
}

std::string model_method(const net::ModelConfig& m) {
  if (m.n_blocks == 1) return "single";
  return m.basis_gradients ? "iterative" : "no_basis_grad";
}

TrainedModel train_cached(const net::ModelConfig& model, const optim::TrainConfig& train,
                          const std::filesystem::path& cache_dir, const Log& log) {
  const auto extras = train_extras(train);
  std::filesystem::path ckpt_path, metrics_path;
  if (!cache_dir.empty()) {
    std::filesystem::create_directories(cache_dir);
    const std::string stem = model_method(model) + "_K" + k_label(model.K) + "_b" + std::to_string(model.n_blocks) +
                             "x" + std::to_string(model.layers_per_block) + "_s" + std::to_string(train.seed) + "_" +
                             std::to_string(train.epochs) + "x" + std::to_string(train.examples_per_epoch);
    ckpt_path = cache_dir / (stem + ".ise3");
    metrics_path = cache_dir / (stem + ".metrics.csv");
    if (std::filesystem::exists(ckpt_path) && std::filesystem::exists(metrics_path)) {
      try {
        TrainedModel t;
        t.checkpoint = ckpt::load(ckpt_path);
        if (t.checkpoint.config == model && t.checkpoint.extra == extras) {
          t.metrics = parse_metrics(read_text(metrics_path));
          t.reused = true;
          if (log) log("reusing " + ckpt_path.string());
          return t;
        }
      } catch (const std::exception& e) {
        if (log) log("ignoring unreadable cache entry " + ckpt_path.string() + ": " + e.what());
      }
    }
  }
  if (log) log("training " + model_method(model) + " K=" + k_label(model.K) + " seed " + std::to_string(train.seed));
  optim::TrainResult res = optim::train(model, train, [&](const optim::EpochMetrics& m) {
    if (log) {
      char buf[120];
      std::snprintf(buf, sizeof buf, "  epoch %d lr %.3e mean train energy %.6f", m.epoch, m.lr, m.mean_train_energy);
      log(buf);
    }
  });
  TrainedModel t;
  t.checkpoint.config = model;
  t.checkpoint.params = std::move(res.params);
  t.checkpoint.extra = extras;
  t.metrics = std::move(res.metrics);
  if (!cache_dir.empty()) {
    ckpt::save(ckpt_path, t.checkpoint);
    write_text(metrics_path, metrics_csv(t.metrics));
  }
  return t;
}

std::optional<double> published_value(const std::string& method, int K) {
  static const std::map<std::string, double> values = {
      {"gd@FULL", 0.0619},        {"single@FULL", 0.0942}, {"no_basis_grad@FULL", 0.0704},
      {"iterative@FULL", 0.0592}, {"iterative_gd@FULL", 0.0410}, {"single@5", 0.1321},
      {"iterative@5", 0.0759},    {"single@3", 0.1527},    {"iterative@3", 0.0922}};
  auto it = values.find(key(method, K));
  if (it == values.end()) return std::nullopt;
  return it->second;
}

Reproduction reproduce(int table, const cfg::RunConfig& config, Scale scale, const std::filesystem::path& cache_dir,
                       const Log& log) {
  if (table != 1 && table != 2) throw ArgumentError("reproduce: table must be 1 or 2");
  config.validate();

  auto with = [&](net::ModelConfig m, int K, bool basis_gradients) {
    m.max_type = config.model.max_type;
    m.channels = config.model.channels;
    m.radial_hidden = config.model.radial_hidden;
    m.K = K;
    m.basis_gradients = basis_gradients;
    return m;
  };
  std::vector<net::ModelConfig> columns;
  if (table == 1) {
    columns = {with(net::ModelConfig::single_pass(), 0, true), with(net::ModelConfig::iterative(), 0, false),
               with(net::ModelConfig::iterative(), 0, true)};
  } else {
    for (int K : {0, 5, 3}) {
      columns.push_back(with(net::ModelConfig::single_pass(), K, true));
      columns.push_back(with(net::ModelConfig::iterative(), K, true));
    }
  }
  for (const auto& c : columns)
    if (c.K != 0 && c.K > config.experiment.n_nodes - 1)
      throw ConfigError("reproduce: K = " + std::to_string(c.K) + " needs more than " +
                        std::to_string(config.experiment.n_nodes) + " nodes");

  Reproduction rep;
  std::vector<std::string> order;
  auto record = [&](const std::string& method, int K, double v) {
    const std::string k = key(method, K);
    if (!rep.per_run.count(k)) order.push_back(k);
    rep.per_run[k].push_back(v);
  };

  for (int run = 0; run < config.experiment.runs; ++run) {
    optim::TrainConfig tc = config.train;
    tc.seed = config.train.seed + static_cast<std::uint64_t>(run);
    tc.n_nodes = config.experiment.n_nodes;
    const auto tests =
        optim::test_set(config.experiment.test_seed, run, config.experiment.test_instances, config.experiment.n_nodes);
    if (log) log("run " + std::to_string(run + 1) + "/" + std::to_string(config.experiment.runs));
    if (table == 1) record("gd", 0, optim::mean_energy(optim::Method::gd, nullptr, nullptr, tests, config.gd));
    for (const auto& c : columns) {
      const TrainedModel t = train_cached(c, tc, cache_dir, log);
      const auto& p = t.checkpoint.params;
      const std::string method = model_method(c);
      record(method, c.K, optim::mean_energy(optim::Method::model, &p, &c, tests, config.gd));
      if (table == 1 && method == "iterative")
        record("iterative_gd", 0, optim::mean_energy(optim::Method::model_gd, &p, &c, tests, config.gd));
    }
  }

  for (const std::string& k : order) {
    const auto at = k.find('@');
    const std::string method = k.substr(0, at), label = k.substr(at + 1);
    const int K = label == "FULL" ? 0 : std::stoi(label);
    const stats::Interval iv = stats::t_interval(rep.per_run[k]);
    rep.table.rows.push_back({method, K, iv.mean, iv.half_width, iv.runs});
  }

  if (table == 1) {
    rep.verdicts.push_back(less_than(rep, "iterative@FULL", "single@FULL", true));
    rep.verdicts.push_back(less_than(rep, "iterative_gd@FULL", "gd@FULL", true));
    rep.verdicts.push_back(less_than(rep, "iterative@FULL", "no_basis_grad@FULL", false));
  } else {
    for (const char* K : {"FULL", "5", "3"})
      rep.verdicts.push_back(less_than(rep, std::string("iterative@") + K, std::string("single@") + K, true));
    rep.verdicts.push_back(less_than(rep, "iterative@3", "single@FULL", true));
  }
  if (scale == Scale::full) {
    for (const auto& r : rep.table.rows) {
      const auto target = published_value(r.method, r.K);
      if (!target) continue;
      Verdict v;
      v.binding = false;
      v.p_value = std::numeric_limits<double>::quiet_NaN();
      v.claim = "|mean(" + key(r.method, r.K) + ") - " + fmt17(*target) + "| <= " + fmt17(kSoftTolerance);
      v.holds = std::abs(r.mean_energy - *target) <= kSoftTolerance;
      rep.verdicts.push_back(v);
    }
  }

  std::ostringstream s;
  char buf[200];
  s << "Table " << table << " (" << (scale == Scale::desk ? "desk" : "full") << " scale, " << config.experiment.runs
    << " runs, " << config.train.epochs << " epochs x " << config.train.examples_per_epoch << " examples, "
    << config.experiment.test_instances << " test instances per run)\n";
  std::snprintf(buf, sizeof buf, "%-16s %-5s %-10s %-10s %-6s %s\n", "method", "K", "energy", "sigma", "runs", "published");
  s << buf;
  for (const auto& r : rep.table.rows) {
    const auto target = published_value(r.method, r.K);
    std::snprintf(buf, sizeof buf, "%-16s %-5s %-10.4f %-10s %-6zu %s\n", r.method.c_str(), k_label(r.K).c_str(),
                  r.mean_energy, r.ci_half_width ? ("+-" + std::to_string(*r.ci_half_width).substr(0, 6)).c_str() : "-",
                  r.runs, target ? std::to_string(*target).substr(0, 6).c_str() : "-");
    s << buf;
  }
  for (const auto& v : rep.verdicts) {
    std::snprintf(buf, sizeof buf, "%s %s%s (p = %.3g)\n", v.holds ? "HOLDS " : "FAILS ", v.claim.c_str(),
                  v.binding ? "" : " [informational]", v.p_value);
    s << buf;
  }
  rep.summary = s.str();
  return rep;
}

}  // namespace ise3::exp
