#pragma once

#include <cstdint>
#include <vector>

#include "zoneseg/volume.hpp"

namespace zoneseg {

inline constexpr int kNeighborOffsets[6][3] = {
    {-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};

/// 6-connected component labeling of a boolean mask. Returns component ids
/// (0 = not in mask, 1..n otherwise) and per-component voxel counts in
/// counts[1..n]. Components are numbered in raster-scan order of their
/// lexicographically smallest (z,y,x) voxel.
struct Components {
  std::vector<int32_t> ids;
  std::vector<int64_t> counts;  // counts[0] unused
  int num() const { return int(counts.size()) - 1; }
};

Components label_components(const std::vector<uint8_t>& mask, Shape3 shape);

}  // namespace zoneseg
