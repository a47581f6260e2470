#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "zoneseg/losses.hpp"
#include "zoneseg/volume.hpp"

namespace testutil {

using namespace zoneseg;

/// Random per-voxel categorical distributions for each branch (with optional
/// recon grids), suitable as hand-rolled network output.
inline BranchGrids random_branch_grids(Shape3 s, std::mt19937_64& rng, bool with_recon) {
  BranchGrids g;
  g.shape = s;
  const size_t n = size_t(s.numel());
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int b = 0; b < kNumBranches; ++b) {
    for (auto& grid : g.probs[size_t(b)]) grid.assign(n, 0.0);
    for (size_t i = 0; i < n; ++i) {
      double sum = 0.0;
      std::array<double, kNumZones> raw;
      for (auto& r : raw) {
        r = uni(rng) + 1e-3;
        sum += r;
      }
      for (int c = 0; c < kNumZones; ++c) g.probs[size_t(b)][size_t(c)][i] = raw[size_t(c)] / sum;
    }
    if (with_recon) {
      g.recon[size_t(b)].resize(n);
      for (auto& v : g.recon[size_t(b)]) v = uni(rng);
    }
  }
  return g;
}

inline GridD random_grid(size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  GridD g(n);
  for (auto& v : g) v = uni(rng);
  return g;
}

inline LabelMap random_labels(Shape3 s, std::mt19937_64& rng) {
  LabelMap lm;
  lm.shape = s;
  lm.labels.resize(size_t(s.numel()));
  std::uniform_int_distribution<int> cls(0, kNumZones - 1);
  for (auto& l : lm.labels) l = uint8_t(cls(rng));
  return lm;
}

/// Scratch directory unique per test binary run.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = (std::filesystem::temp_directory_path() / ("zoneseg_test_" + tag)).string();
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace testutil
