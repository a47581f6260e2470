#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "zoneseg/layers.hpp"
#include "zoneseg/losses.hpp"
#include "zoneseg/volume.hpp"

namespace zoneseg {

enum class Variant { par, par_reco, mix, mix_reco };

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& name);
inline bool variant_has_recon(Variant v) {
  return v == Variant::par_reco || v == Variant::mix_reco;
}
inline bool variant_has_dilated(Variant v) {
  return v == Variant::mix || v == Variant::mix_reco;
}

struct ModelConfig {
  int base_filters = 8;
  int depth = 3;  // resolution levels, >= 2
  std::array<int, 3> dilation_rates{3, 6, 12};
  bool recon_head = true;
  uint64_t parameter_seed = 0;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Per-branch five-class probability grids plus optional reconstructions.
struct DualBranchOutput {
  Shape3 shape;
  std::array<Tensor, kNumBranches> probs;  // c = 5, per-voxel simplex
  std::array<Tensor, kNumBranches> recon;  // c = 1 in [0,1]; empty if off

  bool has_recon() const { return !recon[0].v.empty(); }
  /// Double-precision view for the loss module.
  BranchGrids to_grids() const;
};

/// conv3-IN-ReLU twice.
struct ConvBlock {
  ConvBlock(int in_c, int out_c);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);
  void collect(std::vector<ParamBlock>& out);
  void init(std::mt19937_64& rng);
  void clear_cache();

  Conv3d c1, c2;
  InstanceNorm n1, n2;
  ReLU r1, r2;
};

/// Three parallel dilated 3x3x3 convolutions plus a 1x1x1 path, concatenated
/// and fused by a 1x1x1 convolution; sits after the bottleneck, before the
/// first upsampling.
struct DilatedBlock {
  DilatedBlock(int channels, const std::array<int, 3>& rates);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& gy);
  void collect(std::vector<ParamBlock>& out);
  void init(std::mt19937_64& rng);
  void clear_cache();

  struct Path {
    Conv3d conv;
    InstanceNorm norm;
    ReLU relu;
  };
  std::vector<Path> paths;  // 3 dilated + 1 pointwise
  Conv3d fuse;
  InstanceNorm fuse_norm;
  ReLU fuse_relu;
};

struct BranchOutput {
  Tensor probs;
  Tensor recon;  // empty when the head is off
};

class BranchNet {
 public:
  BranchNet(const ModelConfig& cfg, bool with_dilated_block);

  BranchOutput forward(const Tensor& x);
  /// Gradients w.r.t. probs (post-softmax) and recon (post-sigmoid).
  /// Pass an empty tensor for an unused recon gradient.
  void backward(const Tensor& g_probs, const Tensor& g_recon);

  void init(std::mt19937_64& rng);
  std::vector<ParamBlock> params();
  int64_t num_params() const;
  void clear_cache();
  bool has_dilated() const { return dilated_.has_value(); }
  bool has_recon() const { return cfg_.recon_head; }

 private:
  ModelConfig cfg_;
  std::vector<ConvBlock> enc_, dec_;
  std::vector<MaxPool2> pools_;
  std::vector<UpsampleNearest2> ups_;
  std::optional<DilatedBlock> dilated_;
  Conv3d head_seg_;
  ChannelSoftmax softmax_;
  std::unique_ptr<Conv3d> head_rec_;
  Sigmoid sigmoid_;
  std::vector<int> skip_channels_;
};

class DualModel {
 public:
  DualModel(const ModelConfig& cfg, Variant variant);

  DualBranchOutput forward(const Volume& v);
  DualBranchOutput forward(const Tensor& x);
  /// Per-branch gradients of the loss w.r.t. the branch outputs.
  void backward(const std::array<Tensor, kNumBranches>& g_probs,
                const std::array<Tensor, kNumBranches>& g_recon);

  BranchNet& branch(BranchId b) { return b == BranchId::BranchI ? b1_ : b2_; }
  const ModelConfig& config() const { return cfg_; }
  Variant variant() const { return variant_; }

  std::vector<ParamBlock> params();
  int64_t num_params();
  void zero_grad();
  void clear_cache();

  std::vector<float> get_parameters();
  void set_parameters(const std::vector<float>& flat);

  void save_checkpoint(const std::string& path);
  static DualModel load_checkpoint(const std::string& path);

 private:
  ModelConfig cfg_;
  Variant variant_;
  BranchNet b1_, b2_;
};

BranchNet build_branch(const ModelConfig& cfg, bool with_dilated_block);
DualModel build_dual(const ModelConfig& cfg, Variant variant);

}  // namespace zoneseg
