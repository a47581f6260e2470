#pragma once

#include <array>
#include <vector>

#include "zoneseg/losses.hpp"
#include "zoneseg/nets.hpp"
#include "zoneseg/volume.hpp"

namespace zoneseg {

/// Per-class probability grids after branch fusion; per-voxel sum is 1.
struct FusedPrediction {
  Shape3 shape;
  std::array<std::vector<float>, kNumZones> probs;
};

/// Label grid where voxels may be unassigned (-1) after component removal.
struct PartialLabelMap {
  Shape3 shape;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<int8_t> labels;  // -1 = unassigned, else ZoneLabel value
};

/// For each class takes the probability grid from its relevant branch and
/// renormalizes the five collected values per voxel to sum to 1. A voxel
/// whose collected sum is 0 becomes uniform 1/5.
FusedPrediction fuse_branches(const DualBranchOutput& out, const BranchAssignment& assign);

/// Per-voxel argmax; ties broken by class order Background < PZ < TZ < DPU < AFS.
LabelMap argmax_label(const FusedPrediction& fp, const Spacing& spacing = {1.0, 1.0, 1.0});

/// Keeps only the largest 6-connected component of each foreground zone;
/// discarded voxels become unassigned. Size ties keep the component with the
/// smallest lexicographic (z,y,x) seed voxel. Background is exempt.
PartialLabelMap largest_component_filter(const LabelMap& lm);

/// Assigns every unassigned voxel the label whose signed Euclidean distance
/// field (negative inside, positive outside, spacing-aware) is minimal;
/// ties broken by class order.
LabelMap edt_hole_fill(const PartialLabelMap& partial);

/// fuse -> argmax -> largest-component filter -> EDT hole fill.
LabelMap postprocess_pipeline(const DualBranchOutput& out, const BranchAssignment& assign,
                              const Spacing& spacing);

/// Binary round trip of a model's raw branch outputs, so post-processing can
/// run as a separate step.
void save_dual_output(const DualBranchOutput& out, const Spacing& spacing,
                      const std::string& path);
std::pair<DualBranchOutput, Spacing> load_dual_output(const std::string& path);

}  // namespace zoneseg
