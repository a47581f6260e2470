#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "zoneseg/connectivity.hpp"
#include "zoneseg/metrics.hpp"

using namespace zoneseg;

namespace {

// Brute-force surface distance: extract 6-neighborhood boundary voxels, then
// all-pairs nearest distances. Independent of the transform-based code path.
std::vector<std::array<int, 3>> boundary_voxels(const std::vector<uint8_t>& m, Shape3 s) {
  std::vector<std::array<int, 3>> out;
  for (int z = 0; z < s.d; ++z)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        if (!m[size_t(s.index(z, y, x))]) continue;
        bool edge = false;
        for (const auto& off : kNeighborOffsets) {
          const int nz = z + off[0], ny = y + off[1], nx = x + off[2];
          if (nz < 0 || ny < 0 || nx < 0 || nz >= s.d || ny >= s.h || nx >= s.w ||
              !m[size_t(s.index(nz, ny, nx))]) {
            edge = true;
            break;
          }
        }
        if (edge) out.push_back({z, y, x});
      }
  return out;
}

double mad_oracle(const std::vector<uint8_t>& p, const std::vector<uint8_t>& g, Shape3 s,
                  const Spacing& sp) {
  const auto bp = boundary_voxels(p, s);
  const auto bg = boundary_voxels(g, s);
  auto nearest = [&](const std::array<int, 3>& a, const std::vector<std::array<int, 3>>& set) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : set) {
      double d2 = 0.0;
      for (int ax = 0; ax < 3; ++ax) {
        const double d = (a[size_t(ax)] - b[size_t(ax)]) * sp[size_t(ax)];
        d2 += d * d;
      }
      best = std::min(best, d2);
    }
    return std::sqrt(best);
  };
  double sum = 0.0;
  for (const auto& a : bp) sum += nearest(a, bg);
  for (const auto& b : bg) sum += nearest(b, bp);
  return sum / double(bp.size() + bg.size());
}

// Upper tail of Student's t by Simpson integration of the density, an
// arithmetic path with nothing in common with the incomplete-beta route.
double t_tail_oracle(double t, int dof) {
  // P(T > t) = 1/2 - integral_0^t pdf for t >= 0; symmetry handles t < 0.
  // Simpson on the finite interval avoids truncating the heavy tails.
  const double v = double(dof);
  auto pdf = [&](double x) {
    return std::exp(std::lgamma((v + 1) / 2) - std::lgamma(v / 2)) /
           std::sqrt(v * M_PI) * std::pow(1.0 + x * x / v, -(v + 1) / 2);
  };
  const double a = std::abs(t);
  const int steps = 200000;
  const double h = a / steps;
  double acc = pdf(0.0) + pdf(a);
  for (int i = 1; i < steps; ++i) acc += pdf(i * h) * (i % 2 ? 4.0 : 2.0);
  const double body = acc * h / 3.0;
  return t >= 0.0 ? 0.5 - body : 0.5 + body;
}

}  // namespace

TEST_CASE("dice counting") {
  CHECK(dsc({1, 1, 1, 0}, {1, 1, 1, 0}) == doctest::Approx(1.0));
  CHECK(dsc({1, 1, 0, 0}, {0, 0, 1, 1}) == doctest::Approx(0.0));
  CHECK(dsc({1, 1, 0, 0}, {1, 0, 0, 0}) == doctest::Approx(2.0 / 3.0));
  CHECK(dsc({0, 0}, {0, 0}) == doctest::Approx(1.0));  // both empty
  // Symmetry.
  CHECK(dsc({1, 1, 0, 0}, {1, 0, 0, 0}) == dsc({1, 0, 0, 0}, {1, 1, 0, 0}));
}

TEST_CASE("identical masks have zero surface distance") {
  const Shape3 s{4, 4, 4};
  std::vector<uint8_t> m(64, 0);
  for (int i = 20; i < 40; ++i) m[size_t(i)] = 1;
  const auto d = mad(m, m, s, {1.0, 1.0, 1.0});
  REQUIRE(d.has_value());
  CHECK(*d == doctest::Approx(0.0));
}

TEST_CASE("parallel plates are three millimeters apart") {
  const Shape3 s{8, 8, 8};
  std::vector<uint8_t> p(size_t(s.numel()), 0), g(size_t(s.numel()), 0);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) {
      p[size_t(s.index(2, y, x))] = 1;
      g[size_t(s.index(5, y, x))] = 1;  // 3 voxels away along z
    }
  const auto d1 = mad(p, g, s, {1.0, 1.0, 1.0});
  REQUIRE(d1.has_value());
  CHECK(*d1 == doctest::Approx(3.0).epsilon(1e-9));
  CHECK(*d1 == doctest::Approx(mad_oracle(p, g, s, {1.0, 1.0, 1.0})).epsilon(1e-9));

  const auto d2 = mad(p, g, s, {2.0, 1.0, 1.0});
  REQUIRE(d2.has_value());
  CHECK(*d2 == doctest::Approx(6.0).epsilon(1e-9));
}

TEST_CASE("surface distance matches the all-pairs oracle on random masks") {
  std::mt19937_64 rng(1);
  const Shape3 s{6, 6, 6};
  const Spacing sp{3.0, 0.5, 0.5};
  std::bernoulli_distribution coin(0.3);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<uint8_t> p(size_t(s.numel())), g(size_t(s.numel()));
    for (auto& v : p) v = coin(rng);
    for (auto& v : g) v = coin(rng);
    const auto d = mad(p, g, s, sp);
    REQUIRE(d.has_value());
    CHECK(*d == doctest::Approx(mad_oracle(p, g, s, sp)).epsilon(1e-9));
  }
}

TEST_CASE("an empty mask yields no distance value") {
  const Shape3 s{2, 2, 2};
  std::vector<uint8_t> empty(8, 0), full(8, 1);
  CHECK(!mad(empty, full, s, {1, 1, 1}).has_value());
  CHECK(!mad(full, empty, s, {1, 1, 1}).has_value());
}

TEST_CASE("the paired one-sided t-test on differences one to four") {
  const std::vector<double> a = {2, 4, 6, 8};
  const std::vector<double> b = {1, 2, 3, 4};  // differences (1, 2, 3, 4)
  const TTestResult r = paired_t_test_one_sided(a, b, 0.05);
  CHECK(r.dof == 3);
  CHECK(r.t_statistic == doctest::Approx(2.5 / (1.2909944487 / 2.0)).epsilon(1e-6));
  CHECK(r.p_value == doctest::Approx(0.0152).epsilon(0.05));
  CHECK(std::abs(r.p_value - t_tail_oracle(r.t_statistic, 3)) < 1e-3);
  CHECK(r.significant);
  CHECK(!r.degenerate);
}

TEST_CASE("t tail matches numerical integration across a grid of values") {
  for (int dof : {1, 2, 3, 5, 10, 30})
    for (double t : {-2.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0})
      CHECK(std::abs(t_upper_tail(t, dof) - t_tail_oracle(t, dof)) < 1e-6);
}

TEST_CASE("degenerate t-test inputs are flagged") {
  const TTestResult equal = paired_t_test_one_sided({1, 2, 3}, {1, 2, 3}, 0.05);
  CHECK(equal.degenerate);
  CHECK(equal.p_value == doctest::Approx(0.5));

  const TTestResult shifted = paired_t_test_one_sided({2, 3, 4}, {1, 2, 3}, 0.05);
  CHECK(shifted.degenerate);
  CHECK(shifted.p_value == doctest::Approx(0.0));
}

TEST_CASE("swapping the samples negates the statistic") {
  const std::vector<double> a = {2.0, 4.1, 5.9, 8.2};
  const std::vector<double> b = {1.0, 2.5, 3.1, 4.0};
  const TTestResult fwd = paired_t_test_one_sided(a, b, 0.05);
  const TTestResult rev = paired_t_test_one_sided(b, a, 0.05);
  CHECK(fwd.t_statistic == doctest::Approx(-rev.t_statistic).epsilon(1e-12));
}

TEST_CASE("significance tracks the declared alpha") {
  const TTestResult r = paired_t_test_one_sided({2, 4, 6, 8}, {1, 2, 3, 4}, 0.05);
  CHECK(r.significant == (r.p_value < 0.05));
  const TTestResult strict = paired_t_test_one_sided({2, 4, 6, 8}, {1, 2, 3, 4}, 0.001);
  CHECK(!strict.significant);
}

TEST_CASE("the report pipeline on identical inputs") {
  std::mt19937_64 rng(2);
  const Shape3 s{4, 4, 4};
  LabelMap lm;
  lm.shape = s;
  lm.labels.resize(size_t(s.numel()));
  for (size_t i = 0; i < lm.labels.size(); ++i) lm.labels[i] = uint8_t(i % kNumZones);
  const std::vector<EvalCase> cases = {{"c0", &lm, &lm}, {"c1", &lm, &lm}};
  const MetricsReport rep = build_report(cases, {1, 1, 1});
  for (ZoneLabel zl : kForegroundZones) {
    CHECK(rep.dsc_aggregate[size_t(zl)].mean == doctest::Approx(1.0));
    CHECK(rep.mad_aggregate[size_t(zl)].mean == doctest::Approx(0.0));
  }
  CHECK(rep.zones_avg_dsc.mean == doctest::Approx(1.0));
}

TEST_CASE("aggregates use the sample standard deviation") {
  const Aggregate agg = aggregate({0.5, 0.7});
  CHECK(agg.mean == doctest::Approx(0.6));
  CHECK(agg.sd == doctest::Approx(std::sqrt(0.02)).epsilon(1e-9));
}

TEST_CASE("reports survive a json round trip") {
  std::mt19937_64 rng(3);
  const Shape3 s{4, 4, 4};
  LabelMap gt, pred;
  gt.shape = pred.shape = s;
  gt.labels.resize(size_t(s.numel()));
  pred.labels.resize(size_t(s.numel()));
  std::uniform_int_distribution<int> cls(0, kNumZones - 1);
  for (auto& l : gt.labels) l = uint8_t(cls(rng));
  for (auto& l : pred.labels) l = uint8_t(cls(rng));
  const std::vector<EvalCase> cases = {{"c0", &pred, &gt}};
  const MetricsReport rep = build_report(cases, {3.0, 0.5, 0.5});
  const MetricsReport back = report_from_json(report_to_json(rep));
  REQUIRE(back.per_case.size() == rep.per_case.size());
  for (const auto& [id, zones] : rep.per_case) {
    const auto& bz = back.per_case.at(id);
    for (size_t z = 0; z < kNumZones; ++z) {
      CHECK(zones[z].dsc.has_value() == bz[z].dsc.has_value());
      if (zones[z].dsc)
        CHECK(*zones[z].dsc == doctest::Approx(*bz[z].dsc).epsilon(1e-12));
      CHECK(zones[z].mad_mm.has_value() == bz[z].mad_mm.has_value());
      if (zones[z].mad_mm)
        CHECK(*zones[z].mad_mm == doctest::Approx(*bz[z].mad_mm).epsilon(1e-12));
    }
  }
  for (size_t z = 0; z < kNumZones; ++z) {
    CHECK(back.dsc_aggregate[z].mean == doctest::Approx(rep.dsc_aggregate[z].mean));
    CHECK(back.mad_aggregate[z].n == rep.mad_aggregate[z].n);
  }
  // The rendered table mentions every foreground zone.
  const std::string table = render_table(rep, "unit");
  for (ZoneLabel zl : kForegroundZones) CHECK(table.find(zone_name(zl)) != std::string::npos);
}
