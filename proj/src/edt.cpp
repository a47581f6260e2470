#include "zoneseg/edt.hpp"

#include <limits>

namespace zoneseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1D squared distance transform (lower envelope of parabolas) with sample
// positions i * spacing.
void dt_line(const double* f, double* out, int n, double spacing, int* v, double* z) {
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  auto sq = [](double x) { return x * x; };
  for (int q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (f[v[k]] == kInf) {
      v[k] = q;
      continue;
    }
    double s;
    while (true) {
      const double xq = q * spacing, xp = v[k] * spacing;
      s = ((f[q] + sq(xq)) - (f[v[k]] + sq(xp))) / (2.0 * xq - 2.0 * xp);
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (f[v[0]] == kInf) {
    for (int q = 0; q < n; ++q) out[q] = kInf;
    return;
  }
  k = 0;
  auto sq2 = [](double x) { return x * x; };
  for (int q = 0; q < n; ++q) {
    const double xq = q * spacing;
    while (z[k + 1] < xq) ++k;
    out[q] = sq2(xq - v[k] * spacing) + f[v[k]];
  }
}

}  // namespace

std::vector<double> edt_squared(const std::vector<uint8_t>& mask, Shape3 s,
                                const Spacing& spacing) {
  std::vector<double> d(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) d[i] = mask[i] ? 0.0 : kInf;

  const int maxdim = std::max({s.d, s.h, s.w});
  const size_t n = size_t(maxdim);
  std::vector<double> f(n), out(n), z(n + 1);
  std::vector<int> v(n);

  // x axis
  for (int zz = 0; zz < s.d; ++zz)
    for (int yy = 0; yy < s.h; ++yy) {
      const int64_t base = s.index(zz, yy, 0);
      for (int x = 0; x < s.w; ++x) f[size_t(x)] = d[size_t(base + x)];
      dt_line(f.data(), out.data(), s.w, spacing[2], v.data(), z.data());
      for (int x = 0; x < s.w; ++x) d[size_t(base + x)] = out[size_t(x)];
    }
  // y axis
  for (int zz = 0; zz < s.d; ++zz)
    for (int x = 0; x < s.w; ++x) {
      const int64_t base = s.index(zz, 0, x);
      for (int y = 0; y < s.h; ++y) f[size_t(y)] = d[size_t(base + int64_t(y) * s.w)];
      dt_line(f.data(), out.data(), s.h, spacing[1], v.data(), z.data());
      for (int y = 0; y < s.h; ++y) d[size_t(base + int64_t(y) * s.w)] = out[size_t(y)];
    }
  // z axis
  const int64_t plane = int64_t(s.h) * s.w;
  for (int64_t p = 0; p < plane; ++p) {
    for (int zz = 0; zz < s.d; ++zz) f[size_t(zz)] = d[size_t(p + zz * plane)];
    dt_line(f.data(), out.data(), s.d, spacing[0], v.data(), z.data());
    for (int zz = 0; zz < s.d; ++zz) d[size_t(p + zz * plane)] = out[size_t(zz)];
  }
  return d;
}

}  // namespace zoneseg
