#include "zoneseg/postprocess.hpp"

#include <cstring>
#include <fstream>
#include <limits>

#include "json.hpp"

#include "zoneseg/connectivity.hpp"
#include "zoneseg/edt.hpp"

namespace zoneseg {

FusedPrediction fuse_branches(const DualBranchOutput& out, const BranchAssignment& assign) {
  const int64_t n = out.shape.numel();
  FusedPrediction fp;
  fp.shape = out.shape;
  for (ZoneLabel zl : kAllZones) {
    const size_t z = size_t(zl);
    const Tensor& t = out.probs[size_t(assign.of(zl))];
    if (t.s != out.shape || t.c != kNumZones) throw ShapeError("fuse_branches: bad branch output");
    fp.probs[z].assign(t.ch(int(z)), t.ch(int(z)) + n);
  }
  for (int64_t i = 0; i < n; ++i) {
    float sum = 0.0f;
    for (auto& g : fp.probs) sum += g[size_t(i)];
    if (sum <= 0.0f) {
      for (auto& g : fp.probs) g[size_t(i)] = 1.0f / kNumZones;
    } else {
      const float inv = 1.0f / sum;
      for (auto& g : fp.probs) g[size_t(i)] *= inv;
    }
  }
  return fp;
}

LabelMap argmax_label(const FusedPrediction& fp, const Spacing& spacing) {
  LabelMap lm = LabelMap::filled(fp.shape, ZoneLabel::Background, spacing);
  const int64_t n = fp.shape.numel();
  for (int64_t i = 0; i < n; ++i) {
    int best = 0;
    float bv = fp.probs[0][size_t(i)];
    for (int z = 1; z < kNumZones; ++z)
      if (fp.probs[size_t(z)][size_t(i)] > bv) {
        bv = fp.probs[size_t(z)][size_t(i)];
        best = z;
      }
    lm.labels[size_t(i)] = uint8_t(best);
  }
  return lm;
}

PartialLabelMap largest_component_filter(const LabelMap& lm) {
  const Shape3 s = lm.shape;
  PartialLabelMap out;
  out.shape = s;
  out.spacing = lm.spacing;
  out.labels.assign(lm.labels.begin(), lm.labels.end());
  for (ZoneLabel zl : kForegroundZones) {
    std::vector<uint8_t> mask(size_t(s.numel()), 0);
    for (int64_t i = 0; i < s.numel(); ++i)
      mask[size_t(i)] = lm.labels[size_t(i)] == uint8_t(zl);
    Components comp = label_components(mask, s);
    if (comp.num() <= 1) continue;
    // Components are numbered in raster order of their seed voxel, so
    // keeping the first strict maximum realizes the lexicographic tie-break.
    int best = 1;
    for (int c = 2; c <= comp.num(); ++c)
      if (comp.counts[c] > comp.counts[best]) best = c;
    for (int64_t i = 0; i < s.numel(); ++i)
      if (comp.ids[size_t(i)] != 0 && comp.ids[size_t(i)] != best) out.labels[size_t(i)] = -1;
  }
  return out;
}

LabelMap edt_hole_fill(const PartialLabelMap& partial) {
  const Shape3 s = partial.shape;
  const int64_t n = s.numel();
  bool any_assigned = false, any_hole = false;
  for (int64_t i = 0; i < n; ++i) {
    if (partial.labels[size_t(i)] >= 0)
      any_assigned = true;
    else
      any_hole = true;
  }
  if (!any_assigned) throw ShapeError("edt_hole_fill: all voxels unassigned");

  LabelMap out;
  out.shape = s;
  out.spacing = partial.spacing;
  out.labels.assign(size_t(n), 0);
  for (int64_t i = 0; i < n; ++i)
    if (partial.labels[size_t(i)] >= 0) out.labels[size_t(i)] = uint8_t(partial.labels[size_t(i)]);
  if (!any_hole) return out;

  std::vector<double> best_dist(size_t(n), std::numeric_limits<double>::infinity());
  std::vector<uint8_t> best_label(size_t(n), 0);
  std::vector<uint8_t> mask(static_cast<size_t>(n));
  for (ZoneLabel zl : kAllZones) {
    bool present = false;
    for (int64_t i = 0; i < n; ++i) {
      mask[size_t(i)] = partial.labels[size_t(i)] == int8_t(zl);
      present |= mask[size_t(i)] != 0;
    }
    if (!present) continue;
    // Query voxels are unassigned, hence outside every retained set; the
    // signed field is positive there and equals the plain distance to the set.
    const std::vector<double> d = edt_squared(mask, s, partial.spacing);
    for (int64_t i = 0; i < n; ++i) {
      if (partial.labels[size_t(i)] >= 0) continue;
      if (d[size_t(i)] < best_dist[size_t(i)]) {
        best_dist[size_t(i)] = d[size_t(i)];
        best_label[size_t(i)] = uint8_t(zl);
      }
    }
  }
  for (int64_t i = 0; i < n; ++i)
    if (partial.labels[size_t(i)] < 0) out.labels[size_t(i)] = best_label[size_t(i)];
  return out;
}

LabelMap postprocess_pipeline(const DualBranchOutput& out, const BranchAssignment& assign,
                              const Spacing& spacing) {
  const FusedPrediction fp = fuse_branches(out, assign);
  LabelMap lm = argmax_label(fp, spacing);
  // Filling holes by nearest class can occasionally deposit a small second
  // component of a zone; iterate filter + fill to a fixed point so every
  // foreground zone ends up as a single component.
  for (int pass = 0; pass < 32; ++pass) {
    const PartialLabelMap filtered = largest_component_filter(lm);
    LabelMap next = edt_hole_fill(filtered);
    const bool stable = next.labels == lm.labels;
    lm = std::move(next);
    if (stable) break;
  }
  return lm;
}

namespace {
constexpr char kProbMagic[8] = {'Z', 'S', 'E', 'G', 'P', 'R', 'B', '1'};
}

void save_dual_output(const DualBranchOutput& out, const Spacing& spacing,
                      const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  nlohmann::json header;
  header["shape"] = {out.shape.d, out.shape.h, out.shape.w};
  header["spacing"] = {spacing[0], spacing[1], spacing[2]};
  header["has_recon"] = out.has_recon();
  const std::string hs = header.dump();
  const uint64_t hlen = hs.size();
  f.write(kProbMagic, sizeof(kProbMagic));
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(hs.data(), std::streamsize(hlen));
  for (const Tensor& t : out.probs)
    f.write(reinterpret_cast<const char*>(t.v.data()), std::streamsize(t.v.size() * 4));
  if (out.has_recon())
    for (const Tensor& t : out.recon)
      f.write(reinterpret_cast<const char*>(t.v.data()), std::streamsize(t.v.size() * 4));
  if (!f) throw IoError("write failed: " + path);
}

std::pair<DualBranchOutput, Spacing> load_dual_output(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kProbMagic, sizeof(magic)) != 0)
    throw FormatError("not a branch-output file: " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  f.read(hs.data(), std::streamsize(hlen));
  if (!f) throw FormatError("truncated header: " + path);
  const nlohmann::json header = nlohmann::json::parse(hs);
  DualBranchOutput out;
  out.shape = Shape3{header["shape"][0].get<int>(), header["shape"][1].get<int>(),
                     header["shape"][2].get<int>()};
  Spacing spacing{header["spacing"][0].get<double>(), header["spacing"][1].get<double>(),
                  header["spacing"][2].get<double>()};
  const bool has_recon = header["has_recon"].get<bool>();
  auto read_tensor = [&](int c) {
    Tensor t = Tensor::zeros(c, out.shape);
    f.read(reinterpret_cast<char*>(t.v.data()), std::streamsize(t.v.size() * 4));
    return t;
  };
  for (auto& t : out.probs) t = read_tensor(kNumZones);
  if (has_recon)
    for (auto& t : out.recon) t = read_tensor(1);
  if (!f) throw FormatError("truncated data: " + path);
  return {std::move(out), spacing};
}

}  // namespace zoneseg
