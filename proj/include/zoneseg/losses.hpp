#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "zoneseg/volume.hpp"

namespace zoneseg {

enum class BranchId : int { BranchI = 0, BranchII = 1 };
constexpr int kNumBranches = 2;

/// class -> branch relevance map realizing the supervised-loss mask.
struct BranchAssignment {
  std::array<BranchId, kNumZones> relevant;

  BranchId of(ZoneLabel z) const { return relevant[size_t(z)]; }

  /// PZ, DPU, Background -> Branch-I; TZ, AFS -> Branch-II.
  static BranchAssignment defaults() {
    return {{BranchId::BranchI, BranchId::BranchI, BranchId::BranchII, BranchId::BranchI,
             BranchId::BranchII}};
  }
};

using GridD = std::vector<double>;

/// Per-branch, per-class probability grids plus optional reconstructions,
/// in double precision (loss arithmetic runs in double throughout).
struct BranchGrids {
  Shape3 shape;
  std::array<std::array<GridD, kNumZones>, kNumBranches> probs;
  std::array<GridD, kNumBranches> recon;  // empty when the recon head is off

  bool has_recon() const { return !recon[0].empty() && !recon[1].empty(); }
};

/// Gradients w.r.t. BranchGrids, same layout. Grids are allocated lazily;
/// an empty grid means zero gradient.
struct BranchGradients {
  std::array<std::array<GridD, kNumZones>, kNumBranches> d_probs;
  std::array<GridD, kNumBranches> d_recon;

  GridD& probs(BranchId b, ZoneLabel z, size_t n) {
    auto& g = d_probs[size_t(b)][size_t(z)];
    if (g.empty()) g.assign(n, 0.0);
    return g;
  }
  GridD& recon(BranchId b, size_t n) {
    auto& g = d_recon[size_t(b)];
    if (g.empty()) g.assign(n, 0.0);
    return g;
  }
};

struct SsimConfig {
  int window = 7;          // cubic local window edge length (odd)
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

struct LossConfig {
  double epsilon = 1e-5;  // smoothing added to Dice-style denominators
  SsimConfig ssim;
  double weight_dsc = 1.0;
  double weight_recon = 1.0;
  double weight_unsup = 1.0;
};

enum class TrainStage { I = 1, II = 2 };

struct LossBreakdown {
  double dsc = 0.0;
  double recon = 0.0;
  double unsup = 0.0;
  double supervised_total = 0.0;
  double grand_total = 0.0;
  std::array<double, kNumZones> per_zone_dsc_terms{};
  std::array<double, kNumZones> per_zone_unsup_terms{};
};

struct DiceResult {
  double total = 0.0;
  std::array<double, kNumZones> per_zone{};
};

/// Masked supervised Dice loss: per zone z the probabilities come from the
/// branch assign[z]; term_z = 1 - 2*sum(p*y) / (sum(p^2) + sum(y^2) + eps).
/// Gradients (if requested) accumulate only into the relevant branch.
DiceResult masked_dice_loss(const BranchGrids& out,
                            const std::array<std::vector<float>, kNumZones>& y_onehot,
                            const BranchAssignment& assign, double epsilon,
                            BranchGradients* grads = nullptr, double grad_scale = 1.0);

/// Mean local SSIM between two grids, uniform window clamped at the volume
/// border (window-volume intersection, normalized by the actual count).
/// d_a, if non-null, receives d(mean SSIM)/d(a).
double ssim_mean(const GridD& a, const GridD& b, Shape3 shape, const SsimConfig& cfg,
                 GridD* d_a = nullptr);

/// Reconstruction loss: sum over branches of (1 - SSIM(recon_b, x)).
double ssim_recon_loss(const BranchGrids& out, const GridD& x, const SsimConfig& cfg,
                       BranchGradients* grads = nullptr, double grad_scale = 1.0);

/// Inter-branch unsupervised consistency loss over all five classes;
/// term_z = 1 - 2*sum(p'p'') / (sum(p'^2) + sum(p''^2) + eps).
DiceResult unsupervised_consistency_loss(const BranchGrids& out, double epsilon,
                                         BranchGradients* grads = nullptr,
                                         double grad_scale = 1.0);

/// Stage-aware total: Stage-I optimizes dsc + recon; Stage-II adds the
/// unsupervised term. Without recon heads the recon term is 0.
LossBreakdown total_loss(const BranchGrids& out,
                         const std::array<std::vector<float>, kNumZones>& y_onehot,
                         const GridD& x, const BranchAssignment& assign, TrainStage stage,
                         const LossConfig& cfg, BranchGradients* grads = nullptr);

}  // namespace zoneseg
