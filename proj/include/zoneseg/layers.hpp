#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <vector>

#include "zoneseg/volume.hpp"

namespace zoneseg {

/// Dense channel-major feature grid: [c][d][h][w], x fastest.
struct Tensor {
  int c = 0;
  Shape3 s;
  std::vector<float> v;

  static Tensor zeros(int c, Shape3 s) {
    Tensor t;
    t.c = c;
    t.s = s;
    t.v.assign(size_t(c) * size_t(s.numel()), 0.0f);
    return t;
  }
  int64_t spatial() const { return s.numel(); }
  int64_t numel() const { return int64_t(c) * s.numel(); }
  float* ch(int ci) { return v.data() + int64_t(ci) * spatial(); }
  const float* ch(int ci) const { return v.data() + int64_t(ci) * spatial(); }
};

struct ParamBlock {
  std::vector<float>* w;
  std::vector<float>* g;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x) = 0;
  virtual Tensor backward(const Tensor& gy) = 0;
  virtual std::vector<ParamBlock> params() { return {}; }
  virtual void init(std::mt19937_64&) {}
  /// Drops cached activations (after an optimizer step or for eval).
  virtual void clear_cache() {}
};

/// 3D convolution, kernel k (odd), "same" zero padding, optional dilation.
/// Forward/backward run as GEMMs on an im2col buffer chunked by z-slices.
class Conv3d : public Layer {
 public:
  Conv3d(int in_c, int out_c, int k = 3, int dilation = 1);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& gy) override;
  std::vector<ParamBlock> params() override { return {{&w_, &gw_}, {&b_, &gb_}}; }
  void init(std::mt19937_64& rng) override;
  void clear_cache() override { x_ = Tensor(); }

  int64_t num_params() const { return int64_t(w_.size()) + int64_t(b_.size()); }

 private:
  int in_c_, out_c_, k_, dilation_;
  std::vector<float> w_, gw_;  // [out_c][in_c * k^3]
  std::vector<float> b_, gb_;
  Tensor x_;  // cached input
};

class InstanceNorm : public Layer {
 public:
  explicit InstanceNorm(int channels, float eps = 1e-5f);

  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& gy) override;
  std::vector<ParamBlock> params() override { return {{&gamma_, &ggamma_}, {&beta_, &gbeta_}}; }
  void clear_cache() override {
    xhat_ = Tensor();
    invstd_.clear();
  }

 private:
  int channels_;
  float eps_;
  std::vector<float> gamma_, ggamma_, beta_, gbeta_;
  Tensor xhat_;
  std::vector<float> invstd_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& gy) override;
  void clear_cache() override { y_ = Tensor(); }

 private:
  Tensor y_;
};

/// 2x2x2 max pooling, stride 2. Requires even spatial dims.
class MaxPool2 : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& gy) override;
  void clear_cache() override { argmax_.clear(); }

 private:
  Shape3 in_shape_;
  int c_ = 0;
  std::vector<int64_t> argmax_;
};

/// Nearest-neighbor 2x upsampling.
class UpsampleNearest2 : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& gy) override;
};

/// Per-voxel softmax over channels.
class ChannelSoftmax : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& gy) override;
  void clear_cache() override { y_ = Tensor(); }

 private:
  Tensor y_;
};

class Sigmoid : public Layer {
 public:
  Tensor forward(const Tensor& x) override;
  Tensor backward(const Tensor& gy) override;
  void clear_cache() override { y_ = Tensor(); }

 private:
  Tensor y_;
};

}  // namespace zoneseg
