#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "ise3/equinet.hpp"

namespace ise3::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

/// Model parameters plus the configuration they were trained under. The
/// configuration travels as rank-0 "meta/<field>" records ahead of the
/// parameters, so the file is a flat list of named tensors.
struct Checkpoint {
  net::ModelConfig config;
  net::ModelParams params;
  /// Extra numeric metadata (seed, epochs, ...), written as meta/extra/<key>.
  std::map<std::string, double> extra;
};

/// Layout: "ISE3", u32 version, u64 record count; per record u64 name length,
/// name bytes, u64 rank, u64 dims, little-endian f64 values.
std::string encode(const Checkpoint& c);
/// Throws IoError on malformed input and ConfigError when the parameters do
/// not match the layout implied by the stored configuration.
Checkpoint decode(const std::string& bytes);

void save(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint load(const std::filesystem::path& path);

}  // namespace ise3::ckpt
