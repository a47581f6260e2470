#pragma once

#include <map>
#include <string>

#include "json.hpp"

namespace zoneseg {

inline constexpr const char* kToolVersion = "0.1.0";

/// Self-describing record of a run: enough to reproduce it bit-for-bit in
/// deterministic mode.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  uint64_t seed = 0;
  std::map<std::string, std::string> input_hashes;
  std::string started_at;
  std::string finished_at;

  void write(const std::string& path) const;
};

/// FNV-1a 64-bit content hash, hex encoded.
std::string file_hash_hex(const std::string& path);

std::string now_iso8601();

}  // namespace zoneseg
