#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "ise3/equinet.hpp"
#include "ise3/optim.hpp"

namespace ise3::cfg {

struct ExperimentConfig {
  int test_instances = 512;
  /// Runs per method (independent training seeds and test sets).
  int runs = 15;
  std::uint64_t test_seed = 7001;
  int n_nodes = toy::kDefaultNodes;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

struct RunConfig {
  net::ModelConfig model = net::ModelConfig::iterative();
  optim::TrainConfig train;
  optim::GDConfig gd;
  ExperimentConfig experiment;

  /// Full-scale settings: 100 x 5000 examples, 15 runs.
  static RunConfig full();
  /// 30 epochs x 1000 examples, 5 runs.
  static RunConfig desk();

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep their defaults; unknown keys and wrong types throw ConfigError.
RunConfig from_json(const nlohmann::json& j, const RunConfig& defaults = RunConfig::full());

RunConfig load(const std::filesystem::path& path, const RunConfig& defaults = RunConfig::full());
void save(const std::filesystem::path& path, const RunConfig& c);

}  // namespace ise3::cfg
