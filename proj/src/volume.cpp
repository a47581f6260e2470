#include "zoneseg/volume.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include "json.hpp"

namespace zoneseg {

using nlohmann::json;

const char* zone_name(ZoneLabel z) {
  switch (z) {
    case ZoneLabel::Background: return "Background";
    case ZoneLabel::PZ: return "PZ";
    case ZoneLabel::TZ: return "TZ";
    case ZoneLabel::DPU: return "DPU";
    case ZoneLabel::AFS: return "AFS";
  }
  return "?";
}

ZoneLabel zone_from_name(const std::string& name) {
  for (ZoneLabel z : kAllZones)
    if (name == zone_name(z)) return z;
  throw ConfigError("unknown zone name: " + name);
}

Volume Volume::zeros(Shape3 s, Spacing sp) {
  Volume v;
  v.shape = s;
  v.spacing = sp;
  v.data.assign(s.numel(), 0.0f);
  return v;
}

LabelMap LabelMap::filled(Shape3 s, ZoneLabel z, Spacing sp) {
  LabelMap lm;
  lm.shape = s;
  lm.spacing = sp;
  lm.labels.assign(s.numel(), static_cast<uint8_t>(z));
  return lm;
}

double percentile(std::vector<float> values, double q) {
  if (values.empty()) throw ShapeError("percentile of empty set");
  std::sort(values.begin(), values.end());
  const double rank = q / 100.0 * double(values.size() - 1);
  const auto lo = size_t(std::floor(rank));
  const auto hi = size_t(std::ceil(rank));
  const double frac = rank - double(lo);
  return double(values[lo]) * (1.0 - frac) + double(values[hi]) * frac;
}

Volume preprocess(const Volume& v, const WarnFn& warn) {
  if (v.data.empty()) throw ShapeError("preprocess: empty volume");
  const double p1 = percentile(v.data, 1.0);
  const double p99 = percentile(v.data, 99.0);
  Volume out;
  out.shape = v.shape;
  out.spacing = v.spacing;
  out.data.resize(v.data.size());
  if (p1 == p99) {
    std::fill(out.data.begin(), out.data.end(), 0.0f);
    const std::string msg = "preprocess: degenerate volume (p1 == p99), output all zeros";
    if (warn)
      warn(msg);
    else
      std::cerr << "[zoneseg] warning: " << msg << "\n";
    return out;
  }
  const double scale = 1.0 / (p99 - p1);
  for (size_t i = 0; i < v.data.size(); ++i) {
    double x = std::clamp(double(v.data[i]), p1, p99);
    out.data[i] = float((x - p1) * scale);
  }
  return out;
}

std::array<std::vector<float>, kNumZones> one_hot(const LabelMap& lm) {
  std::array<std::vector<float>, kNumZones> grids;
  for (auto& g : grids) g.assign(lm.labels.size(), 0.0f);
  for (size_t i = 0; i < lm.labels.size(); ++i) {
    const uint8_t l = lm.labels[i];
    if (l >= kNumZones) throw FormatError("label value out of range: " + std::to_string(l));
    grids[l][i] = 1.0f;
  }
  return grids;
}

// ---------------------------------------------------------------------------
// Raw format: little-endian payload + sidecar JSON {shape, spacing, dtype}.
// ---------------------------------------------------------------------------

namespace {

bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

std::string sidecar_path(const std::string& raw_path) {
  return raw_path.substr(0, raw_path.size() - 4) + ".json";
}

void write_raw_header(const std::string& raw_path, Shape3 s, const Spacing& sp,
                      const std::string& dtype) {
  json j;
  j["shape"] = {s.d, s.h, s.w};
  j["spacing"] = {sp[0], sp[1], sp[2]};
  j["dtype"] = dtype;
  std::ofstream f(sidecar_path(raw_path));
  if (!f) throw IoError("cannot write " + sidecar_path(raw_path));
  f << j.dump(2) << "\n";
}

void read_raw_header(const std::string& raw_path, Shape3& s, Spacing& sp, std::string& dtype) {
  std::ifstream f(sidecar_path(raw_path));
  if (!f) throw IoError("cannot read sidecar header " + sidecar_path(raw_path));
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError("bad sidecar JSON: " + std::string(e.what()));
  }
  const auto& sh = j.at("shape");
  if (!sh.is_array() || sh.size() != 3)
    throw FormatError("raw sidecar: shape must have 3 entries (3D payload required)");
  s = Shape3{sh[0].get<int>(), sh[1].get<int>(), sh[2].get<int>()};
  if (s.d <= 0 || s.h <= 0 || s.w <= 0) throw FormatError("raw sidecar: non-positive shape");
  const auto& sj = j.at("spacing");
  for (int a = 0; a < 3; ++a) sp[a] = sj[a].get<double>();
  if (sp[0] <= 0 || sp[1] <= 0 || sp[2] <= 0) throw FormatError("raw sidecar: non-positive spacing");
  dtype = j.at("dtype").get<std::string>();
}

void write_bytes(const std::string& path, const void* bytes, size_t n) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(static_cast<const char*>(bytes), std::streamsize(n));
  if (!f) throw IoError("short write to " + path);
}

void read_bytes(const std::string& path, void* bytes, size_t n) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  f.read(static_cast<char*>(bytes), std::streamsize(n));
  if (size_t(f.gcount()) != n) throw FormatError("payload size mismatch in " + path);
  char extra;
  if (f.read(&extra, 1)) throw FormatError("payload size mismatch in " + path + " (trailing bytes)");
}

// ---------------------------------------------------------------------------
// Minimal NIfTI-1 support: 3D float32 / uint8, native little-endian only.
// ---------------------------------------------------------------------------

#pragma pack(push, 1)
struct NiftiHeader {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope, scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration, toffset;
  int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code, sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4], srow_y[4], srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348);

constexpr int16_t kNiftiUint8 = 2;
constexpr int16_t kNiftiFloat32 = 16;

struct GzFileCloser {
  void operator()(gzFile f) const {
    if (f) gzclose(f);
  }
};

void nifti_write(const std::string& path, Shape3 s, const Spacing& sp, int16_t datatype,
                 const void* payload, size_t payload_bytes) {
  NiftiHeader h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  // NIfTI dims are (x, y, z); our row-major layout has x fastest, so this
  // stores the same linear payload.
  h.dim[1] = int16_t(s.w);
  h.dim[2] = int16_t(s.h);
  h.dim[3] = int16_t(s.d);
  for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  h.datatype = datatype;
  h.bitpix = datatype == kNiftiFloat32 ? 32 : 8;
  h.pixdim[0] = 1.0f;
  h.pixdim[1] = float(sp[2]);
  h.pixdim[2] = float(sp[1]);
  h.pixdim[3] = float(sp[0]);
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2;  // mm
  h.sform_code = 0;
  h.qform_code = 0;
  std::memcpy(h.magic, "n+1", 4);

  const char* mode = ends_with(path, ".gz") ? "wb6" : "wbT";
  std::unique_ptr<gzFile_s, GzFileCloser> f(gzopen(path.c_str(), mode));
  if (!f) throw IoError("cannot write " + path);
  const char pad[4] = {0, 0, 0, 0};
  if (gzwrite(f.get(), &h, sizeof(h)) != int(sizeof(h)) ||
      gzwrite(f.get(), pad, 4) != 4 ||
      gzwrite(f.get(), payload, unsigned(payload_bytes)) != int(payload_bytes))
    throw IoError("short write to " + path);
}

void nifti_read(const std::string& path, Shape3& s, Spacing& sp, int16_t& datatype,
                std::vector<char>& payload) {
  std::unique_ptr<gzFile_s, GzFileCloser> f(gzopen(path.c_str(), "rb"));
  if (!f) throw IoError("cannot read " + path);
  NiftiHeader h{};
  if (gzread(f.get(), &h, sizeof(h)) != int(sizeof(h))) throw FormatError("truncated NIfTI header");
  if (h.sizeof_hdr != 348)
    throw FormatError("unsupported NIfTI header (sizeof_hdr=" + std::to_string(h.sizeof_hdr) +
                      "; byte-swapped files are not supported)");
  if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
    throw FormatError("bad NIfTI magic");
  int ndim = h.dim[0];
  for (int i = 4; i <= ndim && i < 8; ++i)
    if (h.dim[i] > 1) throw FormatError("non-3D NIfTI payload (dim[0]=" + std::to_string(ndim) + ")");
  if (ndim < 3) throw FormatError("non-3D NIfTI payload (dim[0]=" + std::to_string(ndim) + ")");
  s = Shape3{h.dim[3], h.dim[2], h.dim[1]};
  if (s.d <= 0 || s.h <= 0 || s.w <= 0) throw FormatError("non-positive NIfTI dims");
  sp = {double(h.pixdim[3]), double(h.pixdim[2]), double(h.pixdim[1])};
  for (auto& v : sp)
    if (!(v > 0)) v = 1.0;
  datatype = h.datatype;
  const int bpp = h.bitpix / 8;
  const size_t n = size_t(s.numel()) * size_t(bpp);
  const long off = long(h.vox_offset);
  if (off < 348) throw FormatError("bad vox_offset");
  std::vector<char> skip(size_t(off) - sizeof(h));
  if (!skip.empty() && gzread(f.get(), skip.data(), unsigned(skip.size())) != int(skip.size()))
    throw FormatError("truncated NIfTI file");
  payload.resize(n);
  if (gzread(f.get(), payload.data(), unsigned(n)) != int(n))
    throw FormatError("truncated NIfTI payload");
}

bool is_nifti(const std::string& path) {
  return ends_with(path, ".nii") || ends_with(path, ".nii.gz");
}

}  // namespace

void save_volume(const Volume& v, const std::string& path) {
  if (int64_t(v.data.size()) != v.shape.numel()) throw ShapeError("volume data/shape mismatch");
  if (ends_with(path, ".raw")) {
    write_raw_header(path, v.shape, v.spacing, "float32");
    write_bytes(path, v.data.data(), v.data.size() * sizeof(float));
  } else if (is_nifti(path)) {
    nifti_write(path, v.shape, v.spacing, kNiftiFloat32, v.data.data(),
                v.data.size() * sizeof(float));
  } else {
    throw FormatError("unsupported volume extension: " + path);
  }
}

Volume load_volume(const std::string& path) {
  Volume v;
  if (ends_with(path, ".raw")) {
    std::string dtype;
    read_raw_header(path, v.shape, v.spacing, dtype);
    if (dtype != "float32") throw FormatError("volume raw dtype must be float32, got " + dtype);
    v.data.resize(v.shape.numel());
    read_bytes(path, v.data.data(), v.data.size() * sizeof(float));
  } else if (is_nifti(path)) {
    int16_t dt;
    std::vector<char> payload;
    nifti_read(path, v.shape, v.spacing, dt, payload);
    v.data.resize(v.shape.numel());
    if (dt == kNiftiFloat32) {
      std::memcpy(v.data.data(), payload.data(), payload.size());
    } else if (dt == kNiftiUint8) {
      for (int64_t i = 0; i < v.shape.numel(); ++i)
        v.data[i] = float(uint8_t(payload[size_t(i)]));
    } else {
      throw FormatError("unsupported NIfTI datatype " + std::to_string(dt));
    }
  } else {
    throw FormatError("unsupported volume extension: " + path);
  }
  return v;
}

void save_labels(const LabelMap& lm, const std::string& path) {
  if (int64_t(lm.labels.size()) != lm.shape.numel()) throw ShapeError("label data/shape mismatch");
  if (ends_with(path, ".raw")) {
    write_raw_header(path, lm.shape, lm.spacing, "uint8");
    write_bytes(path, lm.labels.data(), lm.labels.size());
  } else if (is_nifti(path)) {
    nifti_write(path, lm.shape, lm.spacing, kNiftiUint8, lm.labels.data(), lm.labels.size());
  } else {
    throw FormatError("unsupported label extension: " + path);
  }
}

LabelMap load_labels(const std::string& path) {
  LabelMap lm;
  if (ends_with(path, ".raw")) {
    std::string dtype;
    read_raw_header(path, lm.shape, lm.spacing, dtype);
    if (dtype != "uint8") throw FormatError("label raw dtype must be uint8, got " + dtype);
    lm.labels.resize(lm.shape.numel());
    read_bytes(path, lm.labels.data(), lm.labels.size());
  } else if (is_nifti(path)) {
    int16_t dt;
    std::vector<char> payload;
    nifti_read(path, lm.shape, lm.spacing, dt, payload);
    if (dt != kNiftiUint8) throw FormatError("label NIfTI must be uint8");
    lm.labels.assign(payload.begin(), payload.end());
  } else {
    throw FormatError("unsupported label extension: " + path);
  }
  for (uint8_t l : lm.labels)
    if (l >= kNumZones) throw FormatError("label value out of range in " + path);
  return lm;
}

void save_split(const DatasetSplit& split, const std::string& path) {
  json j;
  j["train"] = split.train;
  j["validation"] = split.validation;
  j["test"] = split.test;
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << j.dump(2) << "\n";
}

DatasetSplit load_split(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw FormatError("bad split JSON: " + std::string(e.what()));
  }
  DatasetSplit s;
  s.train = j.at("train").get<std::vector<std::string>>();
  s.validation = j.at("validation").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

}  // namespace zoneseg
