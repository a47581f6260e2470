#include "zoneseg/manifest.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>

#include "zoneseg/errors.hpp"

namespace zoneseg {

void RunManifest::write(const std::string& path) const {
  nlohmann::json j;
  j["command"] = command;
  j["config"] = config;
  j["seed"] = seed;
  j["input_hashes"] = input_hashes;
  j["tool_version"] = kToolVersion;
  j["started_at"] = started_at;
  j["finished_at"] = finished_at;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write manifest " + path);
  f << j.dump(2) << "\n";
}

std::string file_hash_hex(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot hash " + path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    const std::streamsize n = f.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= uint8_t(buf[i]);
      h *= 0x100000001b3ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", (unsigned long long)h);
  return out;
}

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace zoneseg
