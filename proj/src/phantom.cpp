#include "zoneseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <random>

#include "zoneseg/connectivity.hpp"

namespace zoneseg {

Components label_components(const std::vector<uint8_t>& mask, Shape3 s) {
  Components comp;
  comp.ids.assign(mask.size(), 0);
  comp.counts.assign(1, 0);
  std::deque<std::array<int, 3>> queue;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const int64_t i = s.index(z, y, x);
        if (!mask[i] || comp.ids[i] != 0) continue;
        const int32_t id = comp.num() + 1;
        comp.counts.push_back(0);
        comp.ids[i] = id;
        queue.push_back({z, y, x});
        while (!queue.empty()) {
          auto [cz, cy, cx] = queue.front();
          queue.pop_front();
          ++comp.counts[id];
          for (const auto& o : kNeighborOffsets) {
            const int nz = cz + o[0], ny = cy + o[1], nx = cx + o[2];
            if (nz < 0 || nz >= s.d || ny < 0 || ny >= s.h || nx < 0 || nx >= s.w) continue;
            const int64_t ni = s.index(nz, ny, nx);
            if (mask[ni] && comp.ids[ni] == 0) {
              comp.ids[ni] = id;
              queue.push_back({nz, ny, nx});
            }
          }
        }
      }
  return comp;
}

namespace {

constexpr double kSuperellipsoidExp = 2.5;

struct Perturbation {
  // Low-frequency angular radius modulation, amplitude-bounded.
  std::array<double, 3> freq_a, freq_b, phase;
  double amplitude = 0.0;

  double scale(double dz, double dy, double dx) const {
    double p = 0.0;
    for (int k = 0; k < 3; ++k)
      p += std::sin(freq_a[k] * dy + freq_b[k] * dx + 1.7 * dz * freq_a[k] + phase[k]);
    return 1.0 + amplitude * p / 3.0;
  }
};

Perturbation draw_perturbation(std::mt19937_64& rng, double amplitude) {
  std::uniform_real_distribution<double> freq(1.0, 3.0), ph(0.0, 2.0 * M_PI);
  Perturbation p;
  for (int k = 0; k < 3; ++k) {
    p.freq_a[k] = freq(rng);
    p.freq_b[k] = freq(rng);
    p.phase[k] = ph(rng);
  }
  p.amplitude = amplitude;
  return p;
}

struct Superellipsoid {
  std::array<double, 3> center;  // normalized (z,y,x)
  std::array<double, 3> radii;   // normalized per-axis
  Perturbation perturb;

  bool contains(double uz, double uy, double ux) const {
    const double dz = uz - center[0], dy = uy - center[1], dx = ux - center[2];
    const double s = perturb.scale(dz / radii[0], dy / radii[1], dx / radii[2]);
    const double az = std::abs(dz / (radii[0] * s));
    const double ay = std::abs(dy / (radii[1] * s));
    const double ax = std::abs(dx / (radii[2] * s));
    return std::pow(az, kSuperellipsoidExp) + std::pow(ay, kSuperellipsoidExp) +
               std::pow(ax, kSuperellipsoidExp) <=
           1.0;
  }
};

// Volume of the unit-coefficient superellipsoid relative to its bounding box.
// For exponent n it is (Gamma(1+1/n))^3 / Gamma(1+3/n) per octant.
double superellipsoid_fill_factor() {
  const double g1 = std::tgamma(1.0 + 1.0 / kSuperellipsoidExp);
  const double g3 = std::tgamma(1.0 + 3.0 / kSuperellipsoidExp);
  return 8.0 * g1 * g1 * g1 / g3;
}

constexpr float kZoneIntensity[kNumZones] = {0.20f, 0.60f, 0.40f, 0.85f, 0.75f};

void gaussian_blur_inplace(std::vector<float>& v, Shape3 s, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(size_t(2 * radius + 1));
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[size_t(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    ksum += kernel[size_t(i + radius)];
  }
  for (auto& k : kernel) k /= ksum;

  std::vector<float> tmp(v.size());
  const int dims[3] = {s.d, s.h, s.w};
  const int64_t strides[3] = {int64_t(s.h) * s.w, s.w, 1};
  for (int axis = 0; axis < 3; ++axis) {
    const int n = dims[axis];
    const int64_t stride = strides[axis];
    for (int z = 0; z < s.d; ++z)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          const int pos[3] = {z, y, x};
          const int64_t i = s.index(z, y, x);
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            int p = std::clamp(pos[axis] + k, 0, n - 1);
            acc += kernel[size_t(k + radius)] * v[size_t(i + (p - pos[axis]) * stride)];
          }
          tmp[size_t(i)] = float(acc);
        }
    v.swap(tmp);
  }
}

// Demote any voxel of `zone` whose 6-neighborhood is not contained in
// `allowed`; repeats until stable. Out-of-grid neighbors count as Background.
void enforce_adjacency(LabelMap& lm, ZoneLabel zone, const std::array<bool, kNumZones>& allowed,
                       ZoneLabel demote_to) {
  const Shape3 s = lm.shape;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int z = 0; z < s.d; ++z)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
          if (lm.at(z, y, x) != zone) continue;
          bool ok = true;
          for (const auto& o : kNeighborOffsets) {
            const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
            ZoneLabel nl = ZoneLabel::Background;
            if (nz >= 0 && nz < s.d && ny >= 0 && ny < s.h && nx >= 0 && nx < s.w)
              nl = lm.at(nz, ny, nx);
            if (nl != zone && !allowed[size_t(nl)]) {
              ok = false;
              break;
            }
          }
          if (!ok) {
            lm.set(z, y, x, demote_to);
            changed = true;
          }
        }
  }
}

void keep_largest_component(LabelMap& lm, ZoneLabel zone, ZoneLabel demote_to) {
  const Shape3 s = lm.shape;
  std::vector<uint8_t> mask(size_t(s.numel()), 0);
  for (int64_t i = 0; i < s.numel(); ++i)
    mask[size_t(i)] = lm.labels[size_t(i)] == uint8_t(zone);
  Components comp = label_components(mask, s);
  if (comp.num() <= 1) return;
  int best = 1;
  for (int c = 2; c <= comp.num(); ++c)
    if (comp.counts[c] > comp.counts[best]) best = c;
  for (int64_t i = 0; i < s.numel(); ++i)
    if (comp.ids[size_t(i)] != 0 && comp.ids[size_t(i)] != best)
      lm.labels[size_t(i)] = uint8_t(demote_to);
}

}  // namespace

void PhantomSpec::validate() const {
  if (shape.d < 8 || shape.h < 16 || shape.w < 16)
    throw GenerationError("phantom shape too small, need at least (8,16,16)");
  for (double sp : spacing)
    if (!(sp > 0)) throw GenerationError("spacing must be positive");
  const double fracs[4] = {frac_tz, frac_pz, frac_afs, frac_dpu};
  double sum = 0.0;
  for (double f : fracs) {
    if (!(f > 0.0 && f < 1.0)) throw GenerationError("zone fractions must lie in (0,1)");
    sum += f;
  }
  if (sum >= 1.0) throw GenerationError("foreground fractions must sum below 1");
  if (!(frac_dpu < frac_afs && frac_afs < frac_pz && frac_pz < frac_tz))
    throw GenerationError("zone fractions must satisfy DPU < AFS < PZ < TZ");
  if (noise_level < 0 || boundary_blur < 0)
    throw GenerationError("noise_level and boundary_blur must be >= 0");
}

std::pair<Volume, LabelMap> generate_case(const PhantomSpec& spec) {
  spec.validate();
  const Shape3 s = spec.shape;
  std::mt19937_64 rng(spec.seed);

  const double fill = superellipsoid_fill_factor();

  // TZ superellipsoid; slightly anisotropic, centered, shifted anterior
  // (toward -y) so its anterior pole breaches the gland surface.
  const double tz_cbrt = std::cbrt(spec.frac_tz / fill);
  Superellipsoid tz;
  tz.radii = {tz_cbrt * 0.95, tz_cbrt * 1.00, tz_cbrt * 1.05};
  tz.perturb = draw_perturbation(rng, 0.05);

  // Gland: TZ plus the PZ shell. Calibrated so that gland-minus-TZ lands
  // near the PZ target; ~88% of TZ sits inside the gland.
  const double gland_vol = spec.frac_pz + 0.88 * spec.frac_tz;
  const double g_cbrt = std::cbrt(gland_vol / fill);
  Superellipsoid gland;
  gland.center = {0.5, 0.54, 0.5};
  gland.radii = {g_cbrt * 0.95, g_cbrt * 1.0, g_cbrt * 1.05};
  gland.perturb = draw_perturbation(rng, 0.04);

  // Anterior offset puts the TZ pole just outside the gland.
  const double anterior_offset = (gland.radii[1] - tz.radii[1]) + 0.25 * tz.radii[1];
  tz.center = {0.5, gland.center[1] - anterior_offset, 0.5};

  // AFS: a small cap sitting on the exposed anterior TZ pole, outside the
  // gland. Oversized; clipped against gland and TZ.
  const double afs_cbrt = std::cbrt(2.4 * spec.frac_afs / fill);
  Superellipsoid afs;
  afs.center = {0.5, tz.center[1] - tz.radii[1] * 0.98, 0.5};
  afs.radii = {afs_cbrt * 1.1, afs_cbrt * 0.8, afs_cbrt * 1.2};
  afs.perturb = draw_perturbation(rng, 0.05);

  // DPU: a z-axis tube in the posterior PZ shell, between the TZ back face
  // and the gland back face.
  const double post_tz = tz.center[1] + tz.radii[1];
  const double post_gland = gland.center[1] + gland.radii[1];
  const double dpu_y = 0.5 * (post_tz + post_gland);
  const double dpu_half_len = 0.22;  // normalized z half-length
  const double tube_len_vox = 2.0 * dpu_half_len * s.d;
  const double dpu_radius_vox =
      std::sqrt(spec.frac_dpu * double(s.numel()) / (M_PI * tube_len_vox));

  LabelMap lm = LabelMap::filled(s, ZoneLabel::Background, spec.spacing);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const double uz = (z + 0.5) / s.d;
        const double uy = (y + 0.5) / s.h;
        const double ux = (x + 0.5) / s.w;
        const bool in_tz = tz.contains(uz, uy, ux);
        const bool in_gland = gland.contains(uz, uy, ux);
        ZoneLabel l = ZoneLabel::Background;
        if (in_tz)
          l = ZoneLabel::TZ;
        else if (in_gland)
          l = ZoneLabel::PZ;
        else if (afs.contains(uz, uy, ux))
          l = ZoneLabel::AFS;
        if (l == ZoneLabel::PZ) {
          const double ry = (uy - dpu_y) * s.h;
          const double rx = (ux - 0.5) * s.w;
          if (std::abs(uz - 0.5) <= dpu_half_len &&
              ry * ry + rx * rx <= dpu_radius_vox * dpu_radius_vox)
            l = ZoneLabel::DPU;
        }
        lm.set(z, y, x, l);
      }

  // Topology repair. Order matters: DPU may only touch PZ; AFS only TZ and
  // Background.
  enforce_adjacency(lm, ZoneLabel::DPU, {false, true, false, false, false}, ZoneLabel::PZ);
  enforce_adjacency(lm, ZoneLabel::AFS, {true, false, true, false, false}, ZoneLabel::Background);
  keep_largest_component(lm, ZoneLabel::DPU, ZoneLabel::PZ);
  keep_largest_component(lm, ZoneLabel::AFS, ZoneLabel::Background);
  keep_largest_component(lm, ZoneLabel::TZ, ZoneLabel::Background);
  keep_largest_component(lm, ZoneLabel::PZ, ZoneLabel::Background);

  for (ZoneLabel z : kForegroundZones) {
    const int64_t n =
        std::count(lm.labels.begin(), lm.labels.end(), uint8_t(z));
    if (n == 0)
      throw GenerationError(std::string("zone ") + zone_name(z) +
                            " empty at the requested shape/fractions");
  }

  Volume v = Volume::zeros(s, spec.spacing);
  for (int64_t i = 0; i < s.numel(); ++i)
    v.data[size_t(i)] = kZoneIntensity[lm.labels[size_t(i)]];
  gaussian_blur_inplace(v.data, s, spec.boundary_blur);
  if (spec.noise_level > 0) {
    std::normal_distribution<float> noise(0.0f, float(spec.noise_level));
    for (auto& x : v.data) x += noise(rng);
  }
  return {std::move(v), std::move(lm)};
}

std::string case_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "case_%03d", index);
  return buf;
}

std::array<int, 3> split_sizes(int n) {
  const double weights[3] = {58.0 / 98.0, 20.0 / 98.0, 20.0 / 98.0};
  std::array<int, 3> sizes{};
  std::array<double, 3> remainder{};
  int assigned = 0;
  for (int i = 0; i < 3; ++i) {
    const double q = n * weights[i];
    sizes[i] = int(std::floor(q));
    remainder[i] = q - sizes[i];
    assigned += sizes[i];
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
      if (remainder[i] > remainder[best]) best = i;
    ++sizes[best];
    remainder[best] = -1.0;
    ++assigned;
  }
  return sizes;
}

DatasetSplit generate_dataset(int n_cases, const PhantomSpec& base_spec,
                              const std::string& out_dir) {
  if (n_cases < 5) throw GenerationError("generate_dataset requires n_cases >= 5");
  base_spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir + ": " + ec.message());

  std::vector<std::string> ids;
  for (int i = 0; i < n_cases; ++i) {
    PhantomSpec spec = base_spec;
    spec.seed = base_spec.seed + uint64_t(i);
    auto [vol, lab] = generate_case(spec);
    const std::string id = case_id(i);
    save_volume(vol, out_dir + "/" + id + "_img.raw");
    save_labels(lab, out_dir + "/" + id + "_lab.raw");
    ids.push_back(id);
  }

  const auto sizes = split_sizes(n_cases);
  DatasetSplit split;
  split.train.assign(ids.begin(), ids.begin() + sizes[0]);
  split.validation.assign(ids.begin() + sizes[0], ids.begin() + sizes[0] + sizes[1]);
  split.test.assign(ids.begin() + sizes[0] + sizes[1], ids.end());
  save_split(split, out_dir + "/split.json");
  return split;
}

}  // namespace zoneseg
