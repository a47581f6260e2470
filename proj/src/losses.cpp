#include "zoneseg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace zoneseg {

namespace {

GridD box_sum(const GridD& in, Shape3 s, int radius) {
  GridD a = in, b(in.size());
  // x axis: contiguous rows; sliding sum over a window clamped at borders
  {
    const int64_t rows = int64_t(s.d) * s.h;
    for (int64_t r = 0; r < rows; ++r) {
      const int64_t base = r * s.w;
      double acc = 0.0;
      for (int i = 0; i <= std::min(radius, s.w - 1); ++i) acc += a[size_t(base + i)];
      for (int i = 0; i < s.w; ++i) {
        b[size_t(base + i)] = acc;
        const int add = i + radius + 1, sub = i - radius;
        if (add < s.w) acc += a[size_t(base + add)];
        if (sub >= 0) acc -= a[size_t(base + sub)];
      }
    }
    std::swap(a, b);
  }
  // y axis: for each z-slab, columns with stride w
  {
    for (int z = 0; z < s.d; ++z) {
      const int64_t slab = int64_t(z) * s.h * s.w;
      for (int x = 0; x < s.w; ++x) {
        const int64_t base = slab + x;
        double acc = 0.0;
        for (int i = 0; i <= std::min(radius, s.h - 1); ++i) acc += a[size_t(base + i * s.w)];
        for (int i = 0; i < s.h; ++i) {
          b[size_t(base + int64_t(i) * s.w)] = acc;
          const int add = i + radius + 1, sub = i - radius;
          if (add < s.h) acc += a[size_t(base + int64_t(add) * s.w)];
          if (sub >= 0) acc -= a[size_t(base + int64_t(sub) * s.w)];
        }
      }
    }
    std::swap(a, b);
  }
  // z axis
  {
    const int64_t plane = int64_t(s.h) * s.w;
    for (int64_t p = 0; p < plane; ++p) {
      double acc = 0.0;
      for (int i = 0; i <= std::min(radius, s.d - 1); ++i) acc += a[size_t(p + i * plane)];
      for (int i = 0; i < s.d; ++i) {
        b[size_t(p + int64_t(i) * plane)] = acc;
        const int add = i + radius + 1, sub = i - radius;
        if (add < s.d) acc += a[size_t(p + int64_t(add) * plane)];
        if (sub >= 0) acc -= a[size_t(p + int64_t(sub) * plane)];
      }
    }
    std::swap(a, b);
  }
  return a;
}

inline int axis_count(int i, int n, int radius) {
  return std::min(i + radius, n - 1) - std::max(i - radius, 0) + 1;
}

// term_z and gradient of the generalized Dice-style ratio
// 1 - 2A/B with A = sum(p*q), B = sum(p^2) + sum(q^2) + eps.
template <typename P, typename Q>
double dice_style_term(const P& p, const Q& q, double epsilon, double& A_out, double& B_out) {
  double A = 0.0, B = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    // Order the operands so the reduction is bit-identical under argument
    // swap even when the compiler contracts multiply-adds.
    const double lo = std::min(double(p[i]), double(q[i]));
    const double hi = std::max(double(p[i]), double(q[i]));
    A += lo * hi;
    B += lo * lo + hi * hi;
  }
  B += epsilon;
  A_out = A;
  B_out = B;
  return 1.0 - 2.0 * A / B;
}

}  // namespace

DiceResult masked_dice_loss(const BranchGrids& out,
                            const std::array<std::vector<float>, kNumZones>& y_onehot,
                            const BranchAssignment& assign, double epsilon,
                            BranchGradients* grads, double grad_scale) {
  const size_t n = size_t(out.shape.numel());
  DiceResult res;
  for (ZoneLabel zl : kAllZones) {
    const size_t z = size_t(zl);
    const BranchId b = assign.of(zl);
    const GridD& p = out.probs[size_t(b)][z];
    const auto& y = y_onehot[z];
    if (p.size() != n || y.size() != n)
      throw ShapeError("masked_dice_loss: grid size mismatch for zone " +
                       std::string(zone_name(zl)));
    double A, B;
    res.per_zone[z] = dice_style_term(p, y, epsilon, A, B);
    res.total += res.per_zone[z];
    if (grads) {
      GridD& g = grads->probs(b, zl, n);
      const double invB = 1.0 / B, invB2 = invB * invB;
      for (size_t i = 0; i < n; ++i)
        g[i] += grad_scale * (-2.0 * double(y[i]) * B + 4.0 * A * p[i]) * invB2;
    }
  }
  return res;
}

double ssim_mean(const GridD& a, const GridD& b, Shape3 shape, const SsimConfig& cfg,
                 GridD* d_a) {
  const size_t n = size_t(shape.numel());
  if (a.size() != n || b.size() != n) throw ShapeError("ssim_mean: grid size mismatch");
  if (cfg.window < 1 || cfg.window % 2 == 0) throw ConfigError("ssim window must be odd and >= 1");
  const int radius = cfg.window / 2;
  const double C1 = (cfg.k1 * cfg.dynamic_range) * (cfg.k1 * cfg.dynamic_range);
  const double C2 = (cfg.k2 * cfg.dynamic_range) * (cfg.k2 * cfg.dynamic_range);

  GridD aa(n), bb(n), ab(n);
  for (size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const GridD S1 = box_sum(a, shape, radius);
  const GridD S2 = box_sum(b, shape, radius);
  const GridD S11 = box_sum(aa, shape, radius);
  const GridD S22 = box_sum(bb, shape, radius);
  const GridD S12 = box_sum(ab, shape, radius);

  GridD alpha, beta, gamma;
  if (d_a) {
    alpha.assign(n, 0.0);
    beta.assign(n, 0.0);
    gamma.assign(n, 0.0);
  }

  double total = 0.0;
  size_t idx = 0;
  for (int z = 0; z < shape.d; ++z) {
    const int cz = axis_count(z, shape.d, radius);
    for (int y = 0; y < shape.h; ++y) {
      const int cy = axis_count(y, shape.h, radius);
      const double czy = double(cz) * cy;
      for (int x = 0; x < shape.w; ++x, ++idx) {
        const double cnt = czy * axis_count(x, shape.w, radius);
        const double inv = 1.0 / cnt;
        const double mu_a = S1[idx] * inv, mu_b = S2[idx] * inv;
        const double var_a = S11[idx] * inv - mu_a * mu_a;
        const double var_b = S22[idx] * inv - mu_b * mu_b;
        const double cov = S12[idx] * inv - mu_a * mu_b;
        const double A1 = 2.0 * mu_a * mu_b + C1;
        const double A2 = 2.0 * cov + C2;
        const double B1 = mu_a * mu_a + mu_b * mu_b + C1;
        const double B2 = var_a + var_b + C2;
        total += (A1 * A2) / (B1 * B2);
        if (d_a) {
          const double dS_dmu = 2.0 * A2 * (mu_b * B1 - mu_a * A1) / (B1 * B1 * B2);
          const double dS_dvar = -A1 * A2 / (B1 * B2 * B2);
          const double dS_dcov = 2.0 * A1 / (B1 * B2);
          alpha[idx] = (dS_dmu - 2.0 * mu_a * dS_dvar - mu_b * dS_dcov) * inv;
          beta[idx] = 2.0 * dS_dvar * inv;
          gamma[idx] = dS_dcov * inv;
        }
      }
    }
  }
  const double mean = total / double(n);
  if (d_a) {
    // Adjoint of window membership: the clamped window is symmetric, so
    // summing per-center coefficients over the same box gives the per-voxel
    // gradient.
    const GridD As = box_sum(alpha, shape, radius);
    const GridD Bs = box_sum(beta, shape, radius);
    const GridD Gs = box_sum(gamma, shape, radius);
    d_a->assign(n, 0.0);
    for (size_t i = 0; i < n; ++i)
      (*d_a)[i] = (As[i] + a[i] * Bs[i] + b[i] * Gs[i]) / double(n);
  }
  return mean;
}

double ssim_recon_loss(const BranchGrids& out, const GridD& x, const SsimConfig& cfg,
                       BranchGradients* grads, double grad_scale) {
  if (!out.has_recon())
    throw ConfigError(
        "reconstruction head absent: ssim_recon_loss requires a *_reco variant "
        "(or disable MTL)");
  const size_t n = size_t(out.shape.numel());
  double loss = 0.0;
  for (int b = 0; b < kNumBranches; ++b) {
    GridD d;
    const double s =
        ssim_mean(out.recon[size_t(b)], x, out.shape, cfg, grads ? &d : nullptr);
    loss += 1.0 - s;
    if (grads) {
      GridD& g = grads->recon(BranchId(b), n);
      for (size_t i = 0; i < n; ++i) g[i] += grad_scale * (-d[i]);
    }
  }
  return loss;
}

DiceResult unsupervised_consistency_loss(const BranchGrids& out, double epsilon,
                                         BranchGradients* grads, double grad_scale) {
  const size_t n = size_t(out.shape.numel());
  DiceResult res;
  for (ZoneLabel zl : kAllZones) {
    const size_t z = size_t(zl);
    const GridD& p1 = out.probs[0][z];
    const GridD& p2 = out.probs[1][z];
    if (p1.size() != n || p2.size() != n)
      throw ShapeError("unsupervised_consistency_loss: grid size mismatch for zone " +
                       std::string(zone_name(zl)));
    double A, B;
    res.per_zone[z] = dice_style_term(p1, p2, epsilon, A, B);
    res.total += res.per_zone[z];
    if (grads) {
      GridD& g1 = grads->probs(BranchId::BranchI, zl, n);
      GridD& g2 = grads->probs(BranchId::BranchII, zl, n);
      const double invB2 = 1.0 / (B * B);
      for (size_t i = 0; i < n; ++i) {
        g1[i] += grad_scale * (-2.0 * p2[i] * B + 4.0 * A * p1[i]) * invB2;
        g2[i] += grad_scale * (-2.0 * p1[i] * B + 4.0 * A * p2[i]) * invB2;
      }
    }
  }
  return res;
}

LossBreakdown total_loss(const BranchGrids& out,
                         const std::array<std::vector<float>, kNumZones>& y_onehot,
                         const GridD& x, const BranchAssignment& assign, TrainStage stage,
                         const LossConfig& cfg, BranchGradients* grads) {
  LossBreakdown bd;
  const DiceResult dice =
      masked_dice_loss(out, y_onehot, assign, cfg.epsilon, grads, cfg.weight_dsc);
  bd.dsc = cfg.weight_dsc * dice.total;
  bd.per_zone_dsc_terms = dice.per_zone;

  if (out.has_recon())
    bd.recon = cfg.weight_recon * ssim_recon_loss(out, x, cfg.ssim, grads, cfg.weight_recon);

  bd.supervised_total = bd.dsc + bd.recon;
  if (stage == TrainStage::II) {
    const DiceResult unsup =
        unsupervised_consistency_loss(out, cfg.epsilon, grads, cfg.weight_unsup);
    bd.unsup = cfg.weight_unsup * unsup.total;
    bd.per_zone_unsup_terms = unsup.per_zone;
  }
  bd.grand_total = bd.supervised_total + bd.unsup;
  return bd;
}

}  // namespace zoneseg
