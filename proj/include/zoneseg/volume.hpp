#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "zoneseg/errors.hpp"

namespace zoneseg {

/// The five-class zone set. Enum order is the canonical class order used
/// for argmax tie-breaking and everywhere a fixed order is required.
enum class ZoneLabel : uint8_t { Background = 0, PZ = 1, TZ = 2, DPU = 3, AFS = 4 };

constexpr int kNumZones = 5;

const char* zone_name(ZoneLabel z);
ZoneLabel zone_from_name(const std::string& name);

inline const std::array<ZoneLabel, kNumZones> kAllZones = {
    ZoneLabel::Background, ZoneLabel::PZ, ZoneLabel::TZ, ZoneLabel::DPU, ZoneLabel::AFS};

/// Foreground zones in canonical order (everything except Background).
inline const std::array<ZoneLabel, 4> kForegroundZones = {
    ZoneLabel::PZ, ZoneLabel::TZ, ZoneLabel::DPU, ZoneLabel::AFS};

struct Shape3 {
  int d = 0, h = 0, w = 0;

  int64_t numel() const { return int64_t(d) * h * w; }
  bool operator==(const Shape3&) const = default;
  int64_t index(int z, int y, int x) const { return (int64_t(z) * h + y) * w + x; }
};

using Spacing = std::array<double, 3>;  // mm per axis, (d, h, w) order

/// 3D scalar intensity grid. Raw units on load; [0,1] after preprocess().
struct Volume {
  Shape3 shape;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> data;  // row-major, x fastest

  static Volume zeros(Shape3 s, Spacing sp = {1.0, 1.0, 1.0});
  float& at(int z, int y, int x) { return data[shape.index(z, y, x)]; }
  float at(int z, int y, int x) const { return data[shape.index(z, y, x)]; }
};

/// 3D grid of ZoneLabel, mutually exclusive classes, paired with a Volume.
struct LabelMap {
  Shape3 shape;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<uint8_t> labels;

  static LabelMap filled(Shape3 s, ZoneLabel z, Spacing sp = {1.0, 1.0, 1.0});
  ZoneLabel at(int z, int y, int x) const {
    return static_cast<ZoneLabel>(labels[shape.index(z, y, x)]);
  }
  void set(int z, int y, int x, ZoneLabel l) {
    labels[shape.index(z, y, x)] = static_cast<uint8_t>(l);
  }
};

struct DatasetSplit {
  std::vector<std::string> train;
  std::vector<std::string> validation;
  std::vector<std::string> test;
};

/// Linear-interpolation percentile on the sorted voxel multiset, q in [0,100].
double percentile(std::vector<float> values, double q);

using WarnFn = std::function<void(const std::string&)>;

/// Clip intensities to the volume's own [p1, p99] and map that range to [0,1].
/// A constant-like volume (p1 == p99) maps to all zeros and emits a warning.
Volume preprocess(const Volume& v, const WarnFn& warn = nullptr);

/// Per-class binary grids; per voxel exactly one grid holds 1.
std::array<std::vector<float>, kNumZones> one_hot(const LabelMap& lm);

// File I/O. Format chosen by extension: .raw (+ sidecar .json header),
// .nii, .nii.gz. The raw format round-trips bit-exactly.
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);
void save_labels(const LabelMap& lm, const std::string& path);
LabelMap load_labels(const std::string& path);

void save_split(const DatasetSplit& split, const std::string& path);
DatasetSplit load_split(const std::string& path);

}  // namespace zoneseg
