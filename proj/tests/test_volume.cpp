#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "zoneseg/errors.hpp"
#include "zoneseg/phantom.hpp"
#include "zoneseg/volume.hpp"

using namespace zoneseg;
using testutil::TempDir;

namespace {

// Percentile definition written out directly from first principles: linear
// interpolation on the sorted multiset, independent of the library code.
double sorted_percentile_oracle(std::vector<float> v, double q) {
  std::sort(v.begin(), v.end());
  const double rank = q / 100.0 * double(v.size() - 1);
  const size_t lo = size_t(std::floor(rank));
  const size_t hi = size_t(std::ceil(rank));
  const double frac = rank - double(lo);
  return double(v[lo]) * (1.0 - frac) + double(v[hi]) * frac;
}

}  // namespace

TEST_CASE("raw round trip is bit exact for volumes and labels") {
  TempDir tmp("volume_roundtrip");
  std::mt19937_64 rng(1);
  Volume v = Volume::zeros({3, 4, 5}, {3.0, 0.5, 0.5});
  std::uniform_real_distribution<float> uni(-10.0f, 10.0f);
  for (auto& x : v.data) x = uni(rng);

  save_volume(v, tmp.path() + "/v.raw");
  const Volume r = load_volume(tmp.path() + "/v.raw");
  CHECK(r.shape == v.shape);
  CHECK(r.spacing == v.spacing);
  REQUIRE(r.data.size() == v.data.size());
  CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * 4) == 0);

  LabelMap lm = testutil::random_labels({3, 4, 5}, rng);
  lm.spacing = {3.0, 0.5, 0.5};
  save_labels(lm, tmp.path() + "/l.raw");
  const LabelMap rl = load_labels(tmp.path() + "/l.raw");
  CHECK(rl.shape == lm.shape);
  CHECK(rl.labels == lm.labels);
}

TEST_CASE("nifti round trip preserves data, shape and spacing") {
  TempDir tmp("volume_nifti");
  std::mt19937_64 rng(2);
  Volume v = Volume::zeros({4, 6, 8}, {3.0, 0.5, 0.5});
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  for (auto& x : v.data) x = uni(rng);

  for (const char* name : {"/v.nii", "/v.nii.gz"}) {
    save_volume(v, tmp.path() + name);
    const Volume r = load_volume(tmp.path() + name);
    CHECK(r.shape == v.shape);
    for (int i = 0; i < 3; ++i) CHECK(r.spacing[i] == doctest::Approx(v.spacing[i]).epsilon(1e-6));
    CHECK(std::memcmp(r.data.data(), v.data.data(), v.data.size() * 4) == 0);
  }

  LabelMap lm = testutil::random_labels({4, 6, 8}, rng);
  save_labels(lm, tmp.path() + "/l.nii.gz");
  CHECK(load_labels(tmp.path() + "/l.nii.gz").labels == lm.labels);
}

TEST_CASE("a four-dimensional payload is rejected") {
  TempDir tmp("volume_4d");
  // Hand-written 348-byte header with dim[0] = 4 and a nontrivial 4th axis.
  std::vector<char> hdr(352, 0);
  const int32_t sizeof_hdr = 348;
  std::memcpy(hdr.data(), &sizeof_hdr, 4);
  int16_t dim[8] = {4, 2, 2, 2, 2, 1, 1, 1};
  std::memcpy(hdr.data() + 40, dim, sizeof(dim));
  const int16_t datatype = 16, bitpix = 32;  // float32
  std::memcpy(hdr.data() + 70, &datatype, 2);
  std::memcpy(hdr.data() + 72, &bitpix, 2);
  float pixdim[8] = {1, 1, 1, 1, 1, 0, 0, 0};
  std::memcpy(hdr.data() + 76, pixdim, sizeof(pixdim));
  const float vox_offset = 352.0f;
  std::memcpy(hdr.data() + 108, &vox_offset, 4);
  std::memcpy(hdr.data() + 344, "n+1\0", 4);

  const std::string path = tmp.path() + "/fourd.nii";
  std::ofstream f(path, std::ios::binary);
  f.write(hdr.data(), std::streamsize(hdr.size()));
  std::vector<float> payload(16, 0.5f);
  f.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size() * 4));
  f.close();

  CHECK_THROWS_AS(load_volume(path), FormatError);
}

TEST_CASE("phantom-written file loads with the generator's shape") {
  TempDir tmp("volume_phantom_file");
  PhantomSpec spec;
  spec.seed = 7;
  auto [v, lm] = generate_case(spec);
  save_volume(v, tmp.path() + "/c.raw");
  const Volume r = load_volume(tmp.path() + "/c.raw");
  CHECK(r.shape == Shape3{32, 64, 64});
  CHECK(r.spacing == Spacing{3.0, 0.5, 0.5});
  (void)lm;
}

TEST_CASE("percentile matches the sort-based oracle") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> uni(-5.0f, 20.0f);
  std::vector<float> v(1000);
  for (auto& x : v) x = uni(rng);
  for (double q : {0.0, 1.0, 25.0, 50.0, 99.0, 100.0})
    CHECK(percentile(v, q) == doctest::Approx(sorted_percentile_oracle(v, q)).epsilon(1e-12));
}

TEST_CASE("preprocess leaves a volume alone when its percentiles already span [0,1]") {
  // Values 0 and 1 each occur often enough that p1 = 0 and p99 = 1 exactly.
  Volume v = Volume::zeros({10, 10, 10});
  for (size_t i = 0; i < v.data.size(); ++i) {
    if (i < 20)
      v.data[i] = 0.0f;
    else if (i < 40)
      v.data[i] = 1.0f;
    else
      v.data[i] = float(i % 11) / 10.0f;
  }
  const Volume out = preprocess(v);
  for (size_t i = 0; i < v.data.size(); ++i) CHECK(out.data[i] == doctest::Approx(v.data[i]));
}

TEST_CASE("preprocess turns a constant volume into zeros and warns") {
  Volume v = Volume::zeros({4, 4, 4});
  for (auto& x : v.data) x = 5.0f;
  int warnings = 0;
  const Volume out = preprocess(v, [&](const std::string&) { ++warnings; });
  CHECK(warnings == 1);
  for (float x : out.data) CHECK(x == 0.0f);
}

TEST_CASE("preprocess clips an integer ramp at the oracle percentiles") {
  Volume v = Volume::zeros({10, 10, 10});
  for (size_t i = 0; i < v.data.size(); ++i) v.data[i] = float(i + 1);  // 1..1000
  const double p1 = sorted_percentile_oracle(v.data, 1.0);
  const double p99 = sorted_percentile_oracle(v.data, 99.0);
  const Volume out = preprocess(v);
  for (size_t i = 0; i < v.data.size(); ++i) {
    const double clipped = std::clamp(double(v.data[i]), p1, p99);
    const double expect = (clipped - p1) / (p99 - p1);
    CHECK(double(out.data[i]) == doctest::Approx(expect).epsilon(1e-6));
    CHECK(out.data[i] >= 0.0f);
    CHECK(out.data[i] <= 1.0f);
  }
}

TEST_CASE("preprocess is idempotent on its own output here") {
  std::mt19937_64 rng(4);
  Volume v = Volume::zeros({6, 6, 6});
  std::uniform_real_distribution<float> uni(3.0f, 9.0f);
  for (auto& x : v.data) x = uni(rng);
  const Volume once = preprocess(v);
  const Volume twice = preprocess(once);
  // Only guaranteed when the output's own 1st/99th percentiles are 0 and 1.
  if (percentile(once.data, 1.0) == 0.0 && percentile(once.data, 99.0) == 1.0)
    for (size_t i = 0; i < once.data.size(); ++i)
      CHECK(twice.data[i] == doctest::Approx(once.data[i]).epsilon(1e-6));
}

TEST_CASE("one_hot basics") {
  LabelMap all_bg = LabelMap::filled({2, 2, 2}, ZoneLabel::Background);
  auto grids = one_hot(all_bg);
  for (float x : grids[0]) CHECK(x == 1.0f);
  for (size_t c = 1; c < kNumZones; ++c)
    for (float x : grids[c]) CHECK(x == 0.0f);

  LabelMap one_pz = LabelMap::filled({2, 2, 2}, ZoneLabel::Background);
  one_pz.labels[0] = uint8_t(ZoneLabel::PZ);
  grids = one_hot(one_pz);
  CHECK(grids[size_t(ZoneLabel::PZ)][0] == 1.0f);
  float pz_sum = 0.0f;
  for (float x : grids[size_t(ZoneLabel::PZ)]) pz_sum += x;
  CHECK(pz_sum == 1.0f);
}

TEST_CASE("one_hot sums to one per voxel and argmax inverts it") {
  std::mt19937_64 rng(5);
  const LabelMap lm = testutil::random_labels({4, 4, 4}, rng);
  const auto grids = one_hot(lm);
  for (size_t i = 0; i < lm.labels.size(); ++i) {
    float sum = 0.0f;
    size_t arg = 0;
    for (size_t c = 0; c < kNumZones; ++c) {
      sum += grids[c][i];
      if (grids[c][i] > grids[arg][i]) arg = c;
    }
    CHECK(sum == 1.0f);
    CHECK(arg == size_t(lm.labels[i]));
  }
}

TEST_CASE("split json round trip") {
  TempDir tmp("volume_split");
  DatasetSplit s;
  s.train = {"case_000", "case_001"};
  s.validation = {"case_002"};
  s.test = {"case_003"};
  save_split(s, tmp.path() + "/split.json");
  const DatasetSplit r = load_split(tmp.path() + "/split.json");
  CHECK(r.train == s.train);
  CHECK(r.validation == s.validation);
  CHECK(r.test == s.test);
}
