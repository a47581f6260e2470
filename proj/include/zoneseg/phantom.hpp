#pragma once

#include <cstdint>
#include <string>
#include <utility>

#include "zoneseg/volume.hpp"

namespace zoneseg {

/// Deterministic synthetic prostate-like phantom. Generation is a pure
/// function of the spec: same spec, same bits.
struct PhantomSpec {
  Shape3 shape{32, 64, 64};
  Spacing spacing{3.0, 0.5, 0.5};
  uint64_t seed = 0;
  // Target volume fraction per foreground zone (DPU < AFS < PZ < TZ).
  double frac_tz = 0.10;
  double frac_pz = 0.05;
  double frac_afs = 0.006;
  double frac_dpu = 0.002;
  double noise_level = 0.02;
  double boundary_blur = 0.6;  // gaussian sigma in voxels

  void validate() const;
};

/// Intensity volume + label map with the zone topology guarantees:
/// DPU is a tube adjacent only to PZ, AFS touches only TZ and Background,
/// each foreground zone is one 6-connected component.
std::pair<Volume, LabelMap> generate_case(const PhantomSpec& spec);

/// Writes n_cases phantom cases (raw format) plus a split JSON under
/// out_dir; returns the split (train:validation:test ≈ 58:20:20).
DatasetSplit generate_dataset(int n_cases, const PhantomSpec& base_spec,
                              const std::string& out_dir);

/// id of the k-th case of a dataset ("case_000", ...).
std::string case_id(int index);

/// Largest-remainder apportionment of n into the 58:20:20 split ratio.
std::array<int, 3> split_sizes(int n);

}  // namespace zoneseg
