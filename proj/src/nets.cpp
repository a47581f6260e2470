#include "zoneseg/nets.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace zoneseg {

using nlohmann::json;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::par: return "par";
    case Variant::par_reco: return "par_reco";
    case Variant::mix: return "mix";
    case Variant::mix_reco: return "mix_reco";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  for (Variant v : {Variant::par, Variant::par_reco, Variant::mix, Variant::mix_reco})
    if (name == variant_name(v)) return v;
  throw ConfigError("unknown variant '" + name + "'; valid: par, par_reco, mix, mix_reco");
}

void ModelConfig::validate() const {
  if (base_filters < 1) throw ConfigError("base_filters must be >= 1");
  if (depth < 2) throw ConfigError("depth must be >= 2");
  for (int r : dilation_rates)
    if (r < 1) throw ConfigError("dilation rates must be >= 1");
}

BranchGrids DualBranchOutput::to_grids() const {
  BranchGrids g;
  g.shape = shape;
  const int64_t n = shape.numel();
  for (int b = 0; b < kNumBranches; ++b) {
    for (int z = 0; z < kNumZones; ++z) {
      const float* src = probs[size_t(b)].ch(z);
      g.probs[size_t(b)][size_t(z)].assign(src, src + n);
    }
    if (!recon[size_t(b)].v.empty())
      g.recon[size_t(b)].assign(recon[size_t(b)].v.begin(), recon[size_t(b)].v.end());
  }
  return g;
}

// ---------------------------------------------------------------------------
// ConvBlock / DilatedBlock
// ---------------------------------------------------------------------------

ConvBlock::ConvBlock(int in_c, int out_c)
    : c1(in_c, out_c, 3), c2(out_c, out_c, 3), n1(out_c), n2(out_c) {}

Tensor ConvBlock::forward(const Tensor& x) {
  return r2.forward(n2.forward(c2.forward(r1.forward(n1.forward(c1.forward(x))))));
}

Tensor ConvBlock::backward(const Tensor& gy) {
  return c1.backward(n1.backward(r1.backward(c2.backward(n2.backward(r2.backward(gy))))));
}

void ConvBlock::collect(std::vector<ParamBlock>& out) {
  for (Layer* l : {(Layer*)&c1, (Layer*)&n1, (Layer*)&c2, (Layer*)&n2})
    for (auto& p : l->params()) out.push_back(p);
}

void ConvBlock::init(std::mt19937_64& rng) {
  c1.init(rng);
  c2.init(rng);
}

void ConvBlock::clear_cache() {
  for (Layer* l : {(Layer*)&c1, (Layer*)&n1, (Layer*)&r1, (Layer*)&c2, (Layer*)&n2, (Layer*)&r2})
    l->clear_cache();
}

DilatedBlock::DilatedBlock(int channels, const std::array<int, 3>& rates)
    : fuse(channels * 4, channels, 1), fuse_norm(channels) {
  for (int r : rates) paths.push_back({Conv3d(channels, channels, 3, r), InstanceNorm(channels), ReLU{}});
  paths.push_back({Conv3d(channels, channels, 1), InstanceNorm(channels), ReLU{}});
}

Tensor DilatedBlock::forward(const Tensor& x) {
  const int c = x.c;
  Tensor cat = Tensor::zeros(c * int(paths.size()), x.s);
  for (size_t p = 0; p < paths.size(); ++p) {
    Tensor t = paths[p].relu.forward(paths[p].norm.forward(paths[p].conv.forward(x)));
    std::memcpy(cat.ch(int(p) * c), t.v.data(), size_t(t.numel()) * sizeof(float));
  }
  return fuse_relu.forward(fuse_norm.forward(fuse.forward(cat)));
}

Tensor DilatedBlock::backward(const Tensor& gy) {
  Tensor gcat = fuse.backward(fuse_norm.backward(fuse_relu.backward(gy)));
  const int c = gcat.c / int(paths.size());
  Tensor gx;
  for (size_t p = 0; p < paths.size(); ++p) {
    Tensor gp = Tensor::zeros(c, gcat.s);
    std::memcpy(gp.v.data(), gcat.ch(int(p) * c), size_t(gp.numel()) * sizeof(float));
    Tensor g = paths[p].conv.backward(paths[p].norm.backward(paths[p].relu.backward(gp)));
    if (gx.v.empty())
      gx = std::move(g);
    else
      for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += g.v[i];
  }
  return gx;
}

void DilatedBlock::collect(std::vector<ParamBlock>& out) {
  for (auto& p : paths) {
    for (auto& pb : p.conv.params()) out.push_back(pb);
    for (auto& pb : p.norm.params()) out.push_back(pb);
  }
  for (auto& pb : fuse.params()) out.push_back(pb);
  for (auto& pb : fuse_norm.params()) out.push_back(pb);
}

void DilatedBlock::init(std::mt19937_64& rng) {
  for (auto& p : paths) p.conv.init(rng);
  fuse.init(rng);
}

void DilatedBlock::clear_cache() {
  for (auto& p : paths) {
    p.conv.clear_cache();
    p.norm.clear_cache();
    p.relu.clear_cache();
  }
  fuse.clear_cache();
  fuse_norm.clear_cache();
  fuse_relu.clear_cache();
}

// ---------------------------------------------------------------------------
// BranchNet
// ---------------------------------------------------------------------------

BranchNet::BranchNet(const ModelConfig& cfg, bool with_dilated_block)
    : cfg_(cfg), head_seg_(cfg.base_filters, kNumZones, 1) {
  cfg_.validate();
  const int L = cfg.depth;
  int in_c = 1;
  for (int l = 0; l < L; ++l) {
    const int c = cfg.base_filters << l;
    enc_.emplace_back(in_c, c);
    in_c = c;
    if (l < L - 1) pools_.emplace_back();
  }
  if (with_dilated_block)
    dilated_.emplace(cfg.base_filters << (L - 1), cfg.dilation_rates);
  for (int l = L - 2; l >= 0; --l) {
    const int c = cfg.base_filters << l;
    const int deeper = cfg.base_filters << (l + 1);
    ups_.emplace_back();
    dec_.emplace_back(c + deeper, c);
    skip_channels_.push_back(c);
  }
  if (cfg.recon_head) head_rec_ = std::make_unique<Conv3d>(cfg.base_filters, 1, 1);
}

void BranchNet::init(std::mt19937_64& rng) {
  for (auto& b : enc_) b.init(rng);
  if (dilated_) dilated_->init(rng);
  for (auto& b : dec_) b.init(rng);
  head_seg_.init(rng);
  if (head_rec_) head_rec_->init(rng);
}

BranchOutput BranchNet::forward(const Tensor& x) {
  const int L = cfg_.depth;
  const int div = 1 << (L - 1);
  if (x.s.d % div || x.s.h % div || x.s.w % div)
    throw ShapeError("input spatial dims must be divisible by 2^(depth-1) = " +
                     std::to_string(div));
  std::vector<Tensor> skips;
  Tensor f = x;
  for (int l = 0; l < L; ++l) {
    f = enc_[size_t(l)].forward(f);
    if (l < L - 1) {
      skips.push_back(f);
      f = pools_[size_t(l)].forward(f);
    }
  }
  if (dilated_) f = dilated_->forward(f);
  for (size_t i = 0; i < dec_.size(); ++i) {
    Tensor u = ups_[i].forward(f);
    const Tensor& skip = skips[dec_.size() - 1 - i];
    Tensor cat = Tensor::zeros(skip.c + u.c, u.s);
    std::memcpy(cat.v.data(), skip.v.data(), size_t(skip.numel()) * sizeof(float));
    std::memcpy(cat.ch(skip.c), u.v.data(), size_t(u.numel()) * sizeof(float));
    f = dec_[i].forward(cat);
  }
  BranchOutput out;
  out.probs = softmax_.forward(head_seg_.forward(f));
  if (head_rec_) out.recon = sigmoid_.forward(head_rec_->forward(f));
  return out;
}

void BranchNet::backward(const Tensor& g_probs, const Tensor& g_recon) {
  Tensor gf = head_seg_.backward(softmax_.backward(g_probs));
  if (head_rec_ && !g_recon.v.empty()) {
    Tensor gr = head_rec_->backward(sigmoid_.backward(g_recon));
    for (size_t i = 0; i < gf.v.size(); ++i) gf.v[i] += gr.v[i];
  }
  std::vector<Tensor> gskips(dec_.size());
  for (size_t i = dec_.size(); i-- > 0;) {
    Tensor gcat = dec_[i].backward(gf);
    const int skip_c = skip_channels_[i];
    const size_t level = dec_.size() - 1 - i;  // index into skips
    Tensor gskip = Tensor::zeros(skip_c, gcat.s);
    std::memcpy(gskip.v.data(), gcat.v.data(), size_t(gskip.numel()) * sizeof(float));
    gskips[level] = std::move(gskip);
    Tensor gu = Tensor::zeros(gcat.c - skip_c, gcat.s);
    std::memcpy(gu.v.data(), gcat.ch(skip_c), size_t(gu.numel()) * sizeof(float));
    gf = ups_[i].backward(gu);
  }
  if (dilated_) gf = dilated_->backward(gf);
  const int L = cfg_.depth;
  gf = enc_[size_t(L - 1)].backward(gf);
  for (int l = L - 2; l >= 0; --l) {
    Tensor g = pools_[size_t(l)].backward(gf);
    const Tensor& gs = gskips[size_t(l)];
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += gs.v[i];
    gf = enc_[size_t(l)].backward(g);
  }
}

std::vector<ParamBlock> BranchNet::params() {
  std::vector<ParamBlock> out;
  for (auto& b : enc_) b.collect(out);
  if (dilated_) dilated_->collect(out);
  for (auto& b : dec_) b.collect(out);
  for (auto& p : head_seg_.params()) out.push_back(p);
  if (head_rec_)
    for (auto& p : head_rec_->params()) out.push_back(p);
  return out;
}

int64_t BranchNet::num_params() const {
  int64_t n = 0;
  auto& self = const_cast<BranchNet&>(*this);
  for (auto& p : self.params()) n += int64_t(p.w->size());
  return n;
}

void BranchNet::clear_cache() {
  for (auto& b : enc_) b.clear_cache();
  for (auto& b : dec_) b.clear_cache();
  for (auto& p : pools_) p.clear_cache();
  if (dilated_) dilated_->clear_cache();
  head_seg_.clear_cache();
  softmax_.clear_cache();
  if (head_rec_) head_rec_->clear_cache();
  sigmoid_.clear_cache();
}

// ---------------------------------------------------------------------------
// DualModel
// ---------------------------------------------------------------------------

namespace {
ModelConfig with_recon(ModelConfig cfg, Variant v) {
  cfg.recon_head = variant_has_recon(v);
  return cfg;
}
}  // namespace

DualModel::DualModel(const ModelConfig& cfg, Variant variant)
    : cfg_(with_recon(cfg, variant)),
      variant_(variant),
      b1_(cfg_, false),
      b2_(cfg_, variant_has_dilated(variant)) {
  std::mt19937_64 rng(cfg_.parameter_seed);
  b1_.init(rng);
  b2_.init(rng);
}

DualBranchOutput DualModel::forward(const Volume& v) {
  Tensor x;
  x.c = 1;
  x.s = v.shape;
  x.v = v.data;
  return forward(x);
}

DualBranchOutput DualModel::forward(const Tensor& x) {
  DualBranchOutput out;
  out.shape = x.s;
  BranchOutput o1 = b1_.forward(x);
  BranchOutput o2 = b2_.forward(x);
  out.probs = {std::move(o1.probs), std::move(o2.probs)};
  out.recon = {std::move(o1.recon), std::move(o2.recon)};
  return out;
}

void DualModel::backward(const std::array<Tensor, kNumBranches>& g_probs,
                         const std::array<Tensor, kNumBranches>& g_recon) {
  b1_.backward(g_probs[0], g_recon[0]);
  b2_.backward(g_probs[1], g_recon[1]);
}

std::vector<ParamBlock> DualModel::params() {
  auto p = b1_.params();
  for (auto& q : b2_.params()) p.push_back(q);
  return p;
}

int64_t DualModel::num_params() { return b1_.num_params() + b2_.num_params(); }

void DualModel::zero_grad() {
  for (auto& p : params()) std::fill(p.g->begin(), p.g->end(), 0.0f);
}

void DualModel::clear_cache() {
  b1_.clear_cache();
  b2_.clear_cache();
}

std::vector<float> DualModel::get_parameters() {
  std::vector<float> flat;
  for (auto& p : params()) flat.insert(flat.end(), p.w->begin(), p.w->end());
  return flat;
}

void DualModel::set_parameters(const std::vector<float>& flat) {
  size_t off = 0;
  for (auto& p : params()) {
    if (off + p.w->size() > flat.size()) throw ConfigError("parameter vector size mismatch");
    std::copy(flat.begin() + long(off), flat.begin() + long(off + p.w->size()), p.w->begin());
    off += p.w->size();
  }
  if (off != flat.size()) throw ConfigError("parameter vector size mismatch");
}

namespace {
constexpr char kCkptMagic[8] = {'Z', 'S', 'E', 'G', 'C', 'K', 'P', '1'};
}

void DualModel::save_checkpoint(const std::string& path) {
  json hdr;
  hdr["base_filters"] = cfg_.base_filters;
  hdr["depth"] = cfg_.depth;
  hdr["dilation_rates"] = cfg_.dilation_rates;
  hdr["recon_head"] = cfg_.recon_head;
  hdr["parameter_seed"] = cfg_.parameter_seed;
  hdr["variant"] = variant_name(variant_);
  const std::string hs = hdr.dump();
  const std::vector<float> flat = get_parameters();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(kCkptMagic, 8);
  const uint64_t hlen = hs.size(), plen = flat.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), std::streamsize(hs.size()));
  f.write(reinterpret_cast<const char*>(&plen), 8);
  f.write(reinterpret_cast<const char*>(flat.data()), std::streamsize(flat.size() * 4));
  if (!f) throw IoError("short write to checkpoint " + path);
}

DualModel DualModel::load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCkptMagic, 8) != 0)
    throw FormatError("not a zoneseg checkpoint (bad magic/version): " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hs(hlen, '\0');
  f.read(hs.data(), std::streamsize(hlen));
  json hdr;
  try {
    hdr = json::parse(hs);
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint header: " + std::string(e.what()));
  }
  ModelConfig cfg;
  cfg.base_filters = hdr.at("base_filters").get<int>();
  cfg.depth = hdr.at("depth").get<int>();
  cfg.dilation_rates = hdr.at("dilation_rates").get<std::array<int, 3>>();
  cfg.recon_head = hdr.at("recon_head").get<bool>();
  cfg.parameter_seed = hdr.at("parameter_seed").get<uint64_t>();
  const Variant variant = variant_from_name(hdr.at("variant").get<std::string>());

  DualModel model(cfg, variant);
  uint64_t plen = 0;
  f.read(reinterpret_cast<char*>(&plen), 8);
  std::vector<float> flat(plen);
  f.read(reinterpret_cast<char*>(flat.data()), std::streamsize(plen * 4));
  if (!f) throw FormatError("truncated checkpoint " + path);
  if (int64_t(plen) != model.num_params())
    throw ConfigError("checkpoint/config mismatch: parameter count " + std::to_string(plen) +
                      " vs expected " + std::to_string(model.num_params()));
  model.set_parameters(flat);
  return model;
}

BranchNet build_branch(const ModelConfig& cfg, bool with_dilated_block) {
  BranchNet net(cfg, with_dilated_block);
  std::mt19937_64 rng(cfg.parameter_seed);
  net.init(rng);
  return net;
}

DualModel build_dual(const ModelConfig& cfg, Variant variant) { return DualModel(cfg, variant); }

}  // namespace zoneseg
