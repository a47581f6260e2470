#pragma once

#include <cstdint>
#include <vector>

#include "zoneseg/volume.hpp"

namespace zoneseg {

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// mask voxel, anisotropy-aware via spacing. Distances are between voxel
/// centers. Voxels inside the mask get 0; if the mask is empty, +inf.
std::vector<double> edt_squared(const std::vector<uint8_t>& mask, Shape3 shape,
                                const Spacing& spacing);

}  // namespace zoneseg
