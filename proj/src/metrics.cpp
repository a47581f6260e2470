#include "zoneseg/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "zoneseg/connectivity.hpp"
#include "zoneseg/edt.hpp"

namespace zoneseg {

using nlohmann::json;

double dsc(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  if (pred.size() != gt.size()) throw ShapeError("dsc: size mismatch");
  int64_t np = 0, ng = 0, ni = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    np += pred[i] != 0;
    ng += gt[i] != 0;
    ni += (pred[i] != 0) && (gt[i] != 0);
  }
  if (np + ng == 0) return 1.0;  // both empty, declared convention
  return 2.0 * double(ni) / double(np + ng);
}

namespace {

// Voxels of the set with a 6-neighbor outside the set (out-of-grid counts
// as outside).
std::vector<uint8_t> boundary(const std::vector<uint8_t>& set, Shape3 s) {
  std::vector<uint8_t> b(set.size(), 0);
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        const int64_t i = s.index(z, y, x);
        if (!set[size_t(i)]) continue;
        for (const auto& o : kNeighborOffsets) {
          const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
          if (nz < 0 || nz >= s.d || ny < 0 || ny >= s.h || nx < 0 || nx >= s.w ||
              !set[size_t(s.index(nz, ny, nx))]) {
            b[size_t(i)] = 1;
            break;
          }
        }
      }
  return b;
}

// Regularized incomplete beta via Lentz continued fraction.
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-14, kFpMin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) break;
  }
  return h;
}

double betai(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double bt = std::exp(std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                             a * std::log(x) + b * std::log(1.0 - x));
  if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
  return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

}  // namespace

std::optional<double> mad(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt,
                          Shape3 shape, const Spacing& spacing) {
  if (pred.size() != gt.size() || int64_t(pred.size()) != shape.numel())
    throw ShapeError("mad: size mismatch");
  bool any_p = false, any_g = false;
  for (size_t i = 0; i < pred.size(); ++i) {
    any_p |= pred[i] != 0;
    any_g |= gt[i] != 0;
  }
  if (!any_p || !any_g) return std::nullopt;

  const std::vector<uint8_t> bp = boundary(pred, shape);
  const std::vector<uint8_t> bg = boundary(gt, shape);
  const std::vector<double> dist_to_bg = edt_squared(bg, shape, spacing);
  const std::vector<double> dist_to_bp = edt_squared(bp, shape, spacing);
  double total = 0.0;
  int64_t count = 0;
  for (size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]) {
      total += std::sqrt(dist_to_bg[i]);
      ++count;
    }
    if (bg[i]) {
      total += std::sqrt(dist_to_bp[i]);
      ++count;
    }
  }
  return total / double(count);
}

double t_upper_tail(double t, int dof) {
  if (dof < 1) throw ConfigError("t_upper_tail: dof must be >= 1");
  const double v = double(dof);
  const double x = v / (v + t * t);
  const double half = 0.5 * betai(0.5 * v, 0.5, x);
  return t >= 0.0 ? half : 1.0 - half;
}

TTestResult paired_t_test_one_sided(const std::vector<double>& a, const std::vector<double>& b,
                                    double alpha) {
  if (a.size() != b.size()) throw ShapeError("paired t-test: length mismatch");
  const int n = int(a.size());
  if (n < 2) throw ConfigError("paired t-test requires n >= 2");
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += a[size_t(i)] - b[size_t(i)];
  mean /= n;
  double ss = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = a[size_t(i)] - b[size_t(i)] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / (n - 1));

  TTestResult res;
  res.dof = n - 1;
  if (sd == 0.0) {
    res.degenerate = true;
    res.t_statistic = mean > 0 ? std::numeric_limits<double>::infinity()
                    : mean < 0 ? -std::numeric_limits<double>::infinity()
                               : 0.0;
    res.p_value = mean > 0 ? 0.0 : mean < 0 ? 1.0 : 0.5;
  } else {
    res.t_statistic = mean / (sd / std::sqrt(double(n)));
    res.p_value = t_upper_tail(res.t_statistic, res.dof);
  }
  res.significant = res.p_value < alpha;
  return res;
}

Aggregate aggregate(const std::vector<double>& values, int absent) {
  Aggregate agg;
  agg.n = int(values.size());
  agg.absent = absent;
  if (values.empty()) return agg;
  for (double v : values) agg.mean += v;
  agg.mean /= double(values.size());
  if (values.size() >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - agg.mean) * (v - agg.mean);
    agg.sd = std::sqrt(ss / double(values.size() - 1));
  }
  return agg;
}

MetricsReport build_report(const std::vector<EvalCase>& cases, const Spacing& spacing) {
  MetricsReport rep;
  std::array<std::vector<double>, kNumZones> dsc_vals, mad_vals;
  std::array<int, kNumZones> dsc_absent{}, mad_absent{};

  for (const auto& ec : cases) {
    if (!ec.prediction || !ec.ground_truth) throw ConfigError("missing case: " + ec.id);
    const Shape3 s = ec.ground_truth->shape;
    if (ec.prediction->shape != s) throw ShapeError("prediction/gt shape mismatch for " + ec.id);
    auto& row = rep.per_case[ec.id];
    for (ZoneLabel zl : kAllZones) {
      const size_t z = size_t(zl);
      std::vector<uint8_t> p(size_t(s.numel())), g(size_t(s.numel()));
      for (int64_t i = 0; i < s.numel(); ++i) {
        p[size_t(i)] = ec.prediction->labels[size_t(i)] == uint8_t(zl);
        g[size_t(i)] = ec.ground_truth->labels[size_t(i)] == uint8_t(zl);
      }
      row[z].dsc = dsc(p, g);
      dsc_vals[z].push_back(*row[z].dsc);
      row[z].mad_mm = mad(p, g, s, spacing);
      if (row[z].mad_mm)
        mad_vals[z].push_back(*row[z].mad_mm);
      else
        ++mad_absent[z];
    }
  }
  std::vector<double> zone_dsc_means, zone_mad_means;
  for (ZoneLabel zl : kAllZones) {
    const size_t z = size_t(zl);
    rep.dsc_aggregate[z] = aggregate(dsc_vals[z], dsc_absent[z]);
    rep.mad_aggregate[z] = aggregate(mad_vals[z], mad_absent[z]);
  }
  for (ZoneLabel zl : kForegroundZones) {
    const size_t z = size_t(zl);
    if (rep.dsc_aggregate[z].n > 0) zone_dsc_means.push_back(rep.dsc_aggregate[z].mean);
    if (rep.mad_aggregate[z].n > 0) zone_mad_means.push_back(rep.mad_aggregate[z].mean);
  }
  rep.zones_avg_dsc = aggregate(zone_dsc_means);
  rep.zones_avg_mad = aggregate(zone_mad_means);
  return rep;
}

namespace {

json agg_to_json(const Aggregate& a) {
  return json{{"mean", a.mean}, {"sd", a.sd}, {"n", a.n}, {"absent", a.absent}};
}

Aggregate agg_from_json(const json& j) {
  Aggregate a;
  a.mean = j.at("mean").get<double>();
  a.sd = j.at("sd").get<double>();
  a.n = j.at("n").get<int>();
  a.absent = j.at("absent").get<int>();
  return a;
}

}  // namespace

std::string report_to_json(const MetricsReport& rep) {
  json j;
  for (const auto& [id, row] : rep.per_case) {
    json jr;
    for (ZoneLabel zl : kAllZones) {
      const auto& zs = row[size_t(zl)];
      json jz;
      jz["dsc"] = zs.dsc ? json(*zs.dsc) : json(nullptr);
      jz["mad"] = zs.mad_mm ? json(*zs.mad_mm) : json(nullptr);
      jr[zone_name(zl)] = jz;
    }
    j["per_case"][id] = jr;
  }
  for (ZoneLabel zl : kAllZones) {
    j["aggregate"][zone_name(zl)]["dsc"] = agg_to_json(rep.dsc_aggregate[size_t(zl)]);
    j["aggregate"][zone_name(zl)]["mad"] = agg_to_json(rep.mad_aggregate[size_t(zl)]);
  }
  j["zones_avg"]["dsc"] = agg_to_json(rep.zones_avg_dsc);
  j["zones_avg"]["mad"] = agg_to_json(rep.zones_avg_mad);
  return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("bad report JSON: " + std::string(e.what()));
  }
  MetricsReport rep;
  if (j.contains("per_case"))
    for (const auto& [id, jr] : j["per_case"].items()) {
      auto& row = rep.per_case[id];
      for (ZoneLabel zl : kAllZones) {
        const json& jz = jr.at(zone_name(zl));
        if (!jz.at("dsc").is_null()) row[size_t(zl)].dsc = jz["dsc"].get<double>();
        if (!jz.at("mad").is_null()) row[size_t(zl)].mad_mm = jz["mad"].get<double>();
      }
    }
  for (ZoneLabel zl : kAllZones) {
    rep.dsc_aggregate[size_t(zl)] = agg_from_json(j.at("aggregate").at(zone_name(zl)).at("dsc"));
    rep.mad_aggregate[size_t(zl)] = agg_from_json(j.at("aggregate").at(zone_name(zl)).at("mad"));
  }
  rep.zones_avg_dsc = agg_from_json(j.at("zones_avg").at("dsc"));
  rep.zones_avg_mad = agg_from_json(j.at("zones_avg").at("mad"));
  return rep;
}

std::string render_table(const MetricsReport& rep, const std::string& row_label) {
  std::ostringstream os;
  char buf[64];
  os << "Model";
  for (ZoneLabel zl : kForegroundZones)
    os << " | " << zone_name(zl) << " DSC(%) | " << zone_name(zl) << " MAD";
  os << " | Zones Avg. DSC(%) | Zones Avg. MAD\n";
  os << row_label;
  for (ZoneLabel zl : kForegroundZones) {
    const auto& d = rep.dsc_aggregate[size_t(zl)];
    const auto& m = rep.mad_aggregate[size_t(zl)];
    std::snprintf(buf, sizeof(buf), " | %.2f ± %.2f", d.mean * 100.0, d.sd * 100.0);
    os << buf;
    if (m.n > 0) {
      std::snprintf(buf, sizeof(buf), " | %.2f ± %.2f", m.mean, m.sd);
      os << buf;
    } else {
      os << " | n/a";
    }
  }
  std::snprintf(buf, sizeof(buf), " | %.2f | ", rep.zones_avg_dsc.mean * 100.0);
  os << buf;
  if (rep.zones_avg_mad.n > 0) {
    std::snprintf(buf, sizeof(buf), "%.2f", rep.zones_avg_mad.mean);
    os << buf;
  } else {
    os << "n/a";
  }
  os << "\n";
  return os.str();
}

}  // namespace zoneseg
