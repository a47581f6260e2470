#include "zoneseg/layers.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstring>

namespace zoneseg {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using StridedMap = Eigen::Map<MatRM, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const MatRM, 0, Eigen::OuterStride<>>;

// Cap on the im2col buffer (floats).
constexpr int64_t kMaxColBufFloats = int64_t(16) << 20;

}  // namespace

// ---------------------------------------------------------------------------
// Conv3d
// ---------------------------------------------------------------------------

Conv3d::Conv3d(int in_c, int out_c, int k, int dilation)
    : in_c_(in_c), out_c_(out_c), k_(k), dilation_(dilation) {
  if (k % 2 == 0) throw ConfigError("Conv3d kernel size must be odd");
  const size_t rows = size_t(in_c) * k * k * k;
  w_.assign(size_t(out_c) * rows, 0.0f);
  gw_.assign(w_.size(), 0.0f);
  b_.assign(size_t(out_c), 0.0f);
  gb_.assign(b_.size(), 0.0f);
}

void Conv3d::init(std::mt19937_64& rng) {
  const double fan_in = double(in_c_) * k_ * k_ * k_;
  std::normal_distribution<float> dist(0.0f, float(std::sqrt(2.0 / fan_in)));
  for (auto& x : w_) x = dist(rng);
  std::fill(b_.begin(), b_.end(), 0.0f);
}

Tensor Conv3d::forward(const Tensor& x) {
  if (x.c != in_c_) throw ShapeError("Conv3d: channel mismatch");
  x_ = x;
  const Shape3 s = x.s;
  const int64_t spatial = s.numel();
  Tensor y = Tensor::zeros(out_c_, s);

  const int R = in_c_ * k_ * k_ * k_;
  CMapRM W(w_.data(), out_c_, R);

  if (k_ == 1) {
    CMapRM X(x.v.data(), in_c_, spatial);
    MapRM Y(y.v.data(), out_c_, spatial);
    Y.noalias() = W * X;
  } else {
    const int64_t plane = int64_t(s.h) * s.w;
    const int zchunk = std::max<int64_t>(1, kMaxColBufFloats / (int64_t(R) * plane));
    MatRM K(R, std::min<int64_t>(s.d, zchunk) * plane);
    const int r = k_ / 2;
    for (int z0 = 0; z0 < s.d; z0 += zchunk) {
      const int z1 = std::min(s.d, z0 + zchunk);
      const int64_t cols = int64_t(z1 - z0) * plane;
      // im2col
      for (int ci = 0; ci < in_c_; ++ci) {
        const float* src = x.ch(ci);
        for (int kz = 0; kz < k_; ++kz)
          for (int ky = 0; ky < k_; ++ky)
            for (int kx = 0; kx < k_; ++kx) {
              const int dz = (kz - r) * dilation_;
              const int dy = (ky - r) * dilation_;
              const int dx = (kx - r) * dilation_;
              const int row = ((ci * k_ + kz) * k_ + ky) * k_ + kx;
              float* dst = K.data() + int64_t(row) * K.cols();
              for (int z = z0; z < z1; ++z) {
                const int iz = z + dz;
                for (int y2 = 0; y2 < s.h; ++y2) {
                  const int iy = y2 + dy;
                  float* out = dst + (int64_t(z - z0) * s.h + y2) * s.w;
                  if (iz < 0 || iz >= s.d || iy < 0 || iy >= s.h) {
                    std::memset(out, 0, size_t(s.w) * sizeof(float));
                    continue;
                  }
                  const float* in = src + (int64_t(iz) * s.h + iy) * s.w + dx;
                  const int xa = std::max(0, -dx), xb = std::min(s.w, s.w - dx);
                  if (xa > 0) std::memset(out, 0, size_t(xa) * sizeof(float));
                  if (xb > xa)
                    std::memcpy(out + xa, in + xa, size_t(xb - xa) * sizeof(float));
                  if (xb < s.w) std::memset(out + xb, 0, size_t(s.w - xb) * sizeof(float));
                }
              }
            }
      }
      StridedMap Y(y.v.data() + int64_t(z0) * plane, out_c_, cols,
                   Eigen::OuterStride<>(spatial));
      Y.noalias() = W * K.leftCols(cols);
    }
  }
  for (int co = 0; co < out_c_; ++co) {
    float* yc = y.ch(co);
    const float bias = b_[size_t(co)];
    for (int64_t i = 0; i < spatial; ++i) yc[i] += bias;
  }
  return y;
}

Tensor Conv3d::backward(const Tensor& gy) {
  if (x_.v.empty()) throw TrainingError("Conv3d::backward without cached forward");
  const Shape3 s = x_.s;
  const int64_t spatial = s.numel();
  Tensor gx = Tensor::zeros(in_c_, s);

  const int R = in_c_ * k_ * k_ * k_;
  CMapRM W(w_.data(), out_c_, R);
  MapRM GW(gw_.data(), out_c_, R);

  for (int co = 0; co < out_c_; ++co) {
    const float* g = gy.ch(co);
    double acc = 0.0;
    for (int64_t i = 0; i < spatial; ++i) acc += g[i];
    gb_[size_t(co)] += float(acc);
  }

  if (k_ == 1) {
    CMapRM X(x_.v.data(), in_c_, spatial);
    CMapRM GY(gy.v.data(), out_c_, spatial);
    MapRM GX(gx.v.data(), in_c_, spatial);
    GW.noalias() += GY * X.transpose();
    GX.noalias() = W.transpose() * GY;
    return gx;
  }

  const int64_t plane = int64_t(s.h) * s.w;
  const int zchunk = std::max<int64_t>(1, kMaxColBufFloats / (int64_t(R) * plane));
  MatRM K(R, std::min<int64_t>(s.d, zchunk) * plane);
  MatRM GK(R, K.cols());
  const int r = k_ / 2;
  for (int z0 = 0; z0 < s.d; z0 += zchunk) {
    const int z1 = std::min(s.d, z0 + zchunk);
    const int64_t cols = int64_t(z1 - z0) * plane;
    // rebuild im2col for this chunk (same fill as forward)
    for (int ci = 0; ci < in_c_; ++ci) {
      const float* src = x_.ch(ci);
      for (int kz = 0; kz < k_; ++kz)
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const int dz = (kz - r) * dilation_;
            const int dy = (ky - r) * dilation_;
            const int dx = (kx - r) * dilation_;
            const int row = ((ci * k_ + kz) * k_ + ky) * k_ + kx;
            float* dst = K.data() + int64_t(row) * K.cols();
            for (int z = z0; z < z1; ++z) {
              const int iz = z + dz;
              for (int y2 = 0; y2 < s.h; ++y2) {
                const int iy = y2 + dy;
                float* out = dst + (int64_t(z - z0) * s.h + y2) * s.w;
                if (iz < 0 || iz >= s.d || iy < 0 || iy >= s.h) {
                  std::memset(out, 0, size_t(s.w) * sizeof(float));
                  continue;
                }
                const float* in = src + (int64_t(iz) * s.h + iy) * s.w + dx;
                const int xa = std::max(0, -dx), xb = std::min(s.w, s.w - dx);
                if (xa > 0) std::memset(out, 0, size_t(xa) * sizeof(float));
                if (xb > xa) std::memcpy(out + xa, in + xa, size_t(xb - xa) * sizeof(float));
                if (xb < s.w) std::memset(out + xb, 0, size_t(s.w - xb) * sizeof(float));
              }
            }
          }
    }
    CStridedMap GY(gy.v.data() + int64_t(z0) * plane, out_c_, cols,
                   Eigen::OuterStride<>(spatial));
    GW.noalias() += GY * K.leftCols(cols).transpose();
    GK.leftCols(cols).noalias() = W.transpose() * GY;
    // col2im scatter-add
    for (int ci = 0; ci < in_c_; ++ci) {
      float* dstc = gx.ch(ci);
      for (int kz = 0; kz < k_; ++kz)
        for (int ky = 0; ky < k_; ++ky)
          for (int kx = 0; kx < k_; ++kx) {
            const int dz = (kz - r) * dilation_;
            const int dy = (ky - r) * dilation_;
            const int dx = (kx - r) * dilation_;
            const int row = ((ci * k_ + kz) * k_ + ky) * k_ + kx;
            const float* gsrc = GK.data() + int64_t(row) * GK.cols();
            for (int z = z0; z < z1; ++z) {
              const int iz = z + dz;
              if (iz < 0 || iz >= s.d) continue;
              for (int y2 = 0; y2 < s.h; ++y2) {
                const int iy = y2 + dy;
                if (iy < 0 || iy >= s.h) continue;
                const float* g = gsrc + (int64_t(z - z0) * s.h + y2) * s.w;
                float* acc = dstc + (int64_t(iz) * s.h + iy) * s.w + dx;
                const int xa = std::max(0, -dx), xb = std::min(s.w, s.w - dx);
                for (int xx = xa; xx < xb; ++xx) acc[xx] += g[xx];
              }
            }
          }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// InstanceNorm
// ---------------------------------------------------------------------------

InstanceNorm::InstanceNorm(int channels, float eps) : channels_(channels), eps_(eps) {
  gamma_.assign(size_t(channels), 1.0f);
  ggamma_.assign(size_t(channels), 0.0f);
  beta_.assign(size_t(channels), 0.0f);
  gbeta_.assign(size_t(channels), 0.0f);
}

Tensor InstanceNorm::forward(const Tensor& x) {
  if (x.c != channels_) throw ShapeError("InstanceNorm: channel mismatch");
  const int64_t n = x.spatial();
  Tensor y = Tensor::zeros(x.c, x.s);
  xhat_ = Tensor::zeros(x.c, x.s);
  invstd_.assign(size_t(channels_), 0.0f);
  for (int ci = 0; ci < channels_; ++ci) {
    const float* in = x.ch(ci);
    double mean = 0.0;
    for (int64_t i = 0; i < n; ++i) mean += in[i];
    mean /= double(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double d = in[i] - mean;
      var += d * d;
    }
    var /= double(n);
    const float istd = float(1.0 / std::sqrt(var + eps_));
    invstd_[size_t(ci)] = istd;
    const float mu = float(mean), g = gamma_[size_t(ci)], bt = beta_[size_t(ci)];
    float* xh = xhat_.ch(ci);
    float* out = y.ch(ci);
    for (int64_t i = 0; i < n; ++i) {
      xh[i] = (in[i] - mu) * istd;
      out[i] = g * xh[i] + bt;
    }
  }
  return y;
}

Tensor InstanceNorm::backward(const Tensor& gy) {
  if (xhat_.v.empty()) throw TrainingError("InstanceNorm::backward without cached forward");
  const int64_t n = gy.spatial();
  Tensor gx = Tensor::zeros(gy.c, gy.s);
  for (int ci = 0; ci < channels_; ++ci) {
    const float* g = gy.ch(ci);
    const float* xh = xhat_.ch(ci);
    double sum_g = 0.0, sum_gx = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      sum_g += g[i];
      sum_gx += double(g[i]) * xh[i];
    }
    ggamma_[size_t(ci)] += float(sum_gx);
    gbeta_[size_t(ci)] += float(sum_g);
    const float gam = gamma_[size_t(ci)];
    const float istd = invstd_[size_t(ci)];
    const float mg = float(sum_g / double(n));
    const float mgx = float(sum_gx / double(n));
    float* out = gx.ch(ci);
    for (int64_t i = 0; i < n; ++i)
      out[i] = gam * istd * (g[i] - mg - xh[i] * mgx);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// ReLU / heads
// ---------------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x) {
  y_ = x;
  for (auto& v : y_.v) v = v > 0.0f ? v : 0.0f;
  return y_;
}

Tensor ReLU::backward(const Tensor& gy) {
  Tensor gx = gy;
  for (size_t i = 0; i < gx.v.size(); ++i)
    if (y_.v[i] <= 0.0f) gx.v[i] = 0.0f;
  return gx;
}

Tensor MaxPool2::forward(const Tensor& x) {
  if (x.s.d % 2 || x.s.h % 2 || x.s.w % 2)
    throw ShapeError("MaxPool2: spatial dims must be even");
  in_shape_ = x.s;
  c_ = x.c;
  const Shape3 os{x.s.d / 2, x.s.h / 2, x.s.w / 2};
  Tensor y = Tensor::zeros(x.c, os);
  argmax_.assign(size_t(y.numel()), 0);
  for (int ci = 0; ci < x.c; ++ci) {
    const float* in = x.ch(ci);
    float* out = y.ch(ci);
    int64_t oi = 0;
    for (int z = 0; z < os.d; ++z)
      for (int yy = 0; yy < os.h; ++yy)
        for (int xx = 0; xx < os.w; ++xx, ++oi) {
          float best = -std::numeric_limits<float>::infinity();
          int64_t besti = 0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const int64_t i = x.s.index(2 * z + dz, 2 * yy + dy, 2 * xx + dx);
                if (in[i] > best) {
                  best = in[i];
                  besti = i;
                }
              }
          out[oi] = best;
          argmax_[size_t(int64_t(ci) * y.spatial() + oi)] = besti;
        }
  }
  return y;
}

Tensor MaxPool2::backward(const Tensor& gy) {
  Tensor gx = Tensor::zeros(c_, in_shape_);
  const int64_t osp = gy.spatial();
  for (int ci = 0; ci < c_; ++ci) {
    const float* g = gy.ch(ci);
    float* out = gx.ch(ci);
    for (int64_t oi = 0; oi < osp; ++oi)
      out[argmax_[size_t(int64_t(ci) * osp + oi)]] += g[oi];
  }
  return gx;
}

Tensor UpsampleNearest2::forward(const Tensor& x) {
  const Shape3 os{x.s.d * 2, x.s.h * 2, x.s.w * 2};
  Tensor y = Tensor::zeros(x.c, os);
  for (int ci = 0; ci < x.c; ++ci) {
    const float* in = x.ch(ci);
    float* out = y.ch(ci);
    for (int z = 0; z < os.d; ++z)
      for (int yy = 0; yy < os.h; ++yy) {
        const float* row = in + x.s.index(z / 2, yy / 2, 0);
        float* orow = out + os.index(z, yy, 0);
        for (int xx = 0; xx < os.w; ++xx) orow[xx] = row[xx / 2];
      }
  }
  return y;
}

Tensor UpsampleNearest2::backward(const Tensor& gy) {
  const Shape3 is{gy.s.d / 2, gy.s.h / 2, gy.s.w / 2};
  Tensor gx = Tensor::zeros(gy.c, is);
  for (int ci = 0; ci < gy.c; ++ci) {
    const float* g = gy.ch(ci);
    float* out = gx.ch(ci);
    for (int z = 0; z < gy.s.d; ++z)
      for (int yy = 0; yy < gy.s.h; ++yy) {
        float* orow = out + is.index(z / 2, yy / 2, 0);
        const float* grow = g + gy.s.index(z, yy, 0);
        for (int xx = 0; xx < gy.s.w; ++xx) orow[xx / 2] += grow[xx];
      }
  }
  return gx;
}

Tensor ChannelSoftmax::forward(const Tensor& x) {
  y_ = Tensor::zeros(x.c, x.s);
  const int64_t n = x.spatial();
  for (int64_t i = 0; i < n; ++i) {
    float mx = x.v[size_t(i)];
    for (int c = 1; c < x.c; ++c)
      mx = std::max(mx, x.v[size_t(int64_t(c) * n + i)]);
    float sum = 0.0f;
    for (int c = 0; c < x.c; ++c) {
      const float e = std::exp(x.v[size_t(int64_t(c) * n + i)] - mx);
      y_.v[size_t(int64_t(c) * n + i)] = e;
      sum += e;
    }
    const float inv = 1.0f / sum;
    for (int c = 0; c < x.c; ++c) y_.v[size_t(int64_t(c) * n + i)] *= inv;
  }
  return y_;
}

Tensor ChannelSoftmax::backward(const Tensor& gy) {
  Tensor gx = Tensor::zeros(gy.c, gy.s);
  const int64_t n = gy.spatial();
  for (int64_t i = 0; i < n; ++i) {
    float dot = 0.0f;
    for (int c = 0; c < gy.c; ++c)
      dot += gy.v[size_t(int64_t(c) * n + i)] * y_.v[size_t(int64_t(c) * n + i)];
    for (int c = 0; c < gy.c; ++c) {
      const size_t idx = size_t(int64_t(c) * n + i);
      gx.v[idx] = y_.v[idx] * (gy.v[idx] - dot);
    }
  }
  return gx;
}

Tensor Sigmoid::forward(const Tensor& x) {
  y_ = x;
  for (auto& v : y_.v) v = 1.0f / (1.0f + std::exp(-v));
  return y_;
}

Tensor Sigmoid::backward(const Tensor& gy) {
  Tensor gx = gy;
  for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] *= y_.v[i] * (1.0f - y_.v[i]);
  return gx;
}

}  // namespace zoneseg
