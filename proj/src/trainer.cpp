#include "zoneseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "json.hpp"
#include "zoneseg/postprocess.hpp"

namespace zoneseg {

using nlohmann::json;

void TrainConfig::validate() const {
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (stage1_min_epochs < 1) throw ConfigError("stage1_min_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (fold_count < 1) throw ConfigError("fold_count must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  model.validate();
}

TrainCase TrainCase::make(std::string id, Volume raw_image, LabelMap labels) {
  if (raw_image.shape != labels.shape)
    throw ShapeError("case " + id + ": image/label shape mismatch");
  TrainCase c;
  c.id = std::move(id);
  c.image = preprocess(raw_image);
  c.labels = std::move(labels);
  c.onehot = one_hot(c.labels);
  c.image_d.assign(c.image.data.begin(), c.image.data.end());
  return c;
}

void Adam::step(std::vector<ParamBlock> params) {
  if (m.empty()) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i].w->size(), 0.0f);
      v[i].assign(params[i].w->size(), 0.0f);
    }
  }
  ++t;
  const double bc1 = 1.0 - std::pow(beta1_, double(t));
  const double bc2 = 1.0 - std::pow(beta2_, double(t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& w = *params[i].w;
    auto& g = *params[i].g;
    for (size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = beta1_ * m[i][j] + (1.0 - beta1_) * gj;
      const double vj = beta2_ * v[i][j] + (1.0 - beta2_) * gj * gj;
      m[i][j] = float(mj);
      v[i][j] = float(vj);
      w[j] -= float(lr_ * (mj / bc1) / (std::sqrt(vj / bc2) + eps_));
    }
  }
}

namespace {

std::string csv_header() {
  std::ostringstream os;
  os << "step,stage,dsc,recon,unsup,total";
  for (ZoneLabel z : kAllZones) os << ",dsc_" << zone_name(z);
  for (ZoneLabel z : kAllZones) os << ",unsup_" << zone_name(z);
  return os.str();
}

}  // namespace

TrainLog::TrainLog(const std::string& path) : out_(path) {
  if (!out_) throw IoError("cannot open training log " + path);
  out_ << csv_header() << "\n";
}

void TrainLog::row(int64_t step, TrainStage stage, const LossBreakdown& bd) {
  out_ << step << "," << int(stage) << "," << bd.dsc << "," << bd.recon << "," << bd.unsup << ","
       << bd.grand_total;
  for (double v : bd.per_zone_dsc_terms) out_ << "," << v;
  for (double v : bd.per_zone_unsup_terms) out_ << "," << v;
  out_ << "\n";
  out_.flush();
}

namespace {

struct StepGrads {
  std::array<Tensor, kNumBranches> g_probs;
  std::array<Tensor, kNumBranches> g_recon;
};

StepGrads to_tensors(const BranchGradients& bg, Shape3 s, bool has_recon) {
  StepGrads sg;
  const int64_t n = s.numel();
  for (int b = 0; b < kNumBranches; ++b) {
    sg.g_probs[size_t(b)] = Tensor::zeros(kNumZones, s);
    for (int z = 0; z < kNumZones; ++z) {
      const auto& g = bg.d_probs[size_t(b)][size_t(z)];
      if (g.empty()) continue;
      float* dst = sg.g_probs[size_t(b)].ch(z);
      for (int64_t i = 0; i < n; ++i) dst[i] = float(g[size_t(i)]);
    }
    if (has_recon) {
      sg.g_recon[size_t(b)] = Tensor::zeros(1, s);
      const auto& g = bg.d_recon[size_t(b)];
      if (!g.empty())
        for (int64_t i = 0; i < n; ++i) sg.g_recon[size_t(b)].v[size_t(i)] = float(g[size_t(i)]);
    }
  }
  return sg;
}

void add_breakdown(LossBreakdown& acc, const LossBreakdown& bd) {
  acc.dsc += bd.dsc;
  acc.recon += bd.recon;
  acc.unsup += bd.unsup;
  acc.supervised_total += bd.supervised_total;
  acc.grand_total += bd.grand_total;
  for (int z = 0; z < kNumZones; ++z) {
    acc.per_zone_dsc_terms[size_t(z)] += bd.per_zone_dsc_terms[size_t(z)];
    acc.per_zone_unsup_terms[size_t(z)] += bd.per_zone_unsup_terms[size_t(z)];
  }
}

void scale_breakdown(LossBreakdown& acc, double f) {
  acc.dsc *= f;
  acc.recon *= f;
  acc.unsup *= f;
  acc.supervised_total *= f;
  acc.grand_total *= f;
  for (int z = 0; z < kNumZones; ++z) {
    acc.per_zone_dsc_terms[size_t(z)] *= f;
    acc.per_zone_unsup_terms[size_t(z)] *= f;
  }
}

TrainStage effective_stage(TrainStage stage, const TrainConfig& cfg) {
  // The Stage-II ablation drops the consistency term, reproducing Stage-I
  // dynamics.
  if (stage == TrainStage::II && cfg.disable_unsup) return TrainStage::I;
  return stage;
}

uint64_t epoch_seed(uint64_t seed, int stage, int epoch) {
  // splitmix-style mixing; batch order is a pure function of (seed, epoch).
  uint64_t x = seed + 0x9e3779b97f4a7c15ull * (uint64_t(stage) * 100003ull + uint64_t(epoch));
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x;
}

}  // namespace

LossBreakdown train_step(DualModel& model, const std::vector<const TrainCase*>& batch,
                         TrainStage stage, const TrainConfig& cfg, Adam& adam) {
  model.zero_grad();
  LossBreakdown acc;
  for (const TrainCase* c : batch) {
    DualBranchOutput out = model.forward(c->image);
    BranchGrids grids = out.to_grids();
    BranchGradients bg;
    const LossBreakdown bd =
        total_loss(grids, c->onehot, c->image_d, cfg.assign, stage, cfg.loss, &bg);
    add_breakdown(acc, bd);
    StepGrads sg = to_tensors(bg, out.shape, out.has_recon());
    model.backward(sg.g_probs, sg.g_recon);
  }
  adam.step(model.params());
  model.clear_cache();
  return acc;
}

LossBreakdown evaluate_loss(DualModel& model, const std::vector<TrainCase>& cases,
                            TrainStage stage, const TrainConfig& cfg) {
  LossBreakdown acc;
  for (const TrainCase& c : cases) {
    DualBranchOutput out = model.forward(c.image);
    BranchGrids grids = out.to_grids();
    add_breakdown(acc, total_loss(grids, c.onehot, c.image_d, cfg.assign, stage, cfg.loss));
  }
  model.clear_cache();
  if (!cases.empty()) scale_breakdown(acc, 1.0 / double(cases.size()));
  return acc;
}

TrainState train_stage(DualModel& model, TrainStage stage, const std::vector<TrainCase>& train,
                       const std::vector<TrainCase>& val, const TrainConfig& cfg, TrainLog* log,
                       Adam* resume_adam, const TrainState* resume_state) {
  cfg.validate();
  if (train.empty() || val.empty()) throw ConfigError("train and validation sets must be non-empty");
  const TrainStage eff = effective_stage(stage, cfg);
  const int min_epochs = stage == TrainStage::I ? cfg.stage1_min_epochs : 1;

  Adam local_adam(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  Adam& adam = resume_adam ? *resume_adam : local_adam;
  TrainState st;
  st.stage = stage;
  if (resume_state) st = *resume_state;
  int64_t step = st.epochs_run == 0
                     ? 0
                     : int64_t(st.epochs_run) *
                           ((int64_t(train.size()) + cfg.batch_size - 1) / cfg.batch_size);

  for (int epoch = st.epochs_run + 1; epoch <= cfg.max_epochs; ++epoch) {
    std::vector<const TrainCase*> order;
    order.reserve(train.size());
    for (const auto& c : train) order.push_back(&c);
    std::mt19937_64 rng(epoch_seed(cfg.seed, int(stage), epoch));
    std::shuffle(order.begin(), order.end(), rng);

    LossBreakdown train_acc;
    int batches = 0;
    for (size_t i = 0; i < order.size(); i += size_t(cfg.batch_size)) {
      std::vector<const TrainCase*> batch(
          order.begin() + long(i),
          order.begin() + long(std::min(order.size(), i + size_t(cfg.batch_size))));
      const LossBreakdown bd = train_step(model, batch, eff, cfg, adam);
      ++step;
      ++batches;
      if (!std::isfinite(bd.grand_total)) {
        std::ostringstream os;
        os << "non-finite loss at step " << step << " (epoch " << epoch << "): dsc=" << bd.dsc
           << " recon=" << bd.recon << " unsup=" << bd.unsup << " total=" << bd.grand_total;
        throw TrainingError(os.str());
      }
      LossBreakdown mean = bd;
      scale_breakdown(mean, 1.0 / double(batch.size()));
      add_breakdown(train_acc, mean);
      if (log) log->row(step, stage, mean);
    }
    scale_breakdown(train_acc, 1.0 / double(batches));

    const LossBreakdown val_bd = evaluate_loss(model, val, eff, cfg);
    if (!std::isfinite(val_bd.grand_total))
      throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.stage = int(stage);
    rec.train_mean = train_acc;
    rec.val_mean = val_bd;
    st.history.push_back(rec);
    st.epochs_run = epoch;

    if (val_bd.grand_total < st.best_val) {
      st.best_val = val_bd.grand_total;
      st.best_epoch = epoch;
      st.epochs_since_improvement = 0;
      st.best_params = model.get_parameters();
    } else {
      ++st.epochs_since_improvement;
    }
    if (epoch >= min_epochs && st.epochs_since_improvement >= cfg.patience) break;
  }
  if (!st.best_params.empty()) model.set_parameters(st.best_params);
  return st;
}

TrainState train_stage1(DualModel& model, const std::vector<TrainCase>& train,
                        const std::vector<TrainCase>& val, const TrainConfig& cfg, TrainLog* log) {
  return train_stage(model, TrainStage::I, train, val, cfg, log);
}

TrainState train_stage2(DualModel& model, const std::vector<TrainCase>& train,
                        const std::vector<TrainCase>& val, const TrainConfig& cfg, TrainLog* log) {
  return train_stage(model, TrainStage::II, train, val, cfg, log);
}

std::vector<std::vector<std::string>> make_folds(std::vector<std::string> ids, int fold_count,
                                                 uint64_t seed) {
  if (fold_count < 1) throw ConfigError("fold_count must be >= 1");
  if (int(ids.size()) < fold_count)
    throw ConfigError("fold_count (" + std::to_string(fold_count) + ") exceeds case count (" +
                      std::to_string(ids.size()) + ")");
  std::mt19937_64 rng(seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  std::vector<std::vector<std::string>> folds;
  folds.resize(size_t(fold_count));
  for (size_t i = 0; i < ids.size(); ++i) folds[i % size_t(fold_count)].push_back(ids[i]);
  return folds;
}

// ---------------------------------------------------------------------------
// Training checkpoint (model + optimizer + stage state)
// ---------------------------------------------------------------------------

namespace {
void write_vecf(std::ofstream& f, const std::vector<float>& v) {
  const uint64_t n = v.size();
  f.write(reinterpret_cast<const char*>(&n), 8);
  f.write(reinterpret_cast<const char*>(v.data()), std::streamsize(n * 4));
}

std::vector<float> read_vecf(std::ifstream& f) {
  uint64_t n = 0;
  f.read(reinterpret_cast<char*>(&n), 8);
  std::vector<float> v(n);
  f.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * 4));
  return v;
}
}  // namespace

void save_train_checkpoint(const std::string& path, DualModel& model, const Adam& adam,
                           const TrainState& state) {
  model.save_checkpoint(path + ".model");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  json hdr;
  hdr["stage"] = int(state.stage);
  hdr["epochs_run"] = state.epochs_run;
  hdr["best_val"] = state.best_val;
  hdr["best_epoch"] = state.best_epoch;
  hdr["since_improvement"] = state.epochs_since_improvement;
  hdr["adam_t"] = adam.t;
  json hist = json::array();
  for (const EpochRecord& r : state.history) {
    json jr;
    jr["epoch"] = r.epoch;
    jr["stage"] = r.stage;
    for (const auto& [key, bd] :
         {std::pair<const char*, const LossBreakdown*>{"train", &r.train_mean},
          {"val", &r.val_mean}}) {
      json jb;
      jb["dsc"] = bd->dsc;
      jb["recon"] = bd->recon;
      jb["unsup"] = bd->unsup;
      jb["supervised_total"] = bd->supervised_total;
      jb["grand_total"] = bd->grand_total;
      jb["per_zone_dsc"] = bd->per_zone_dsc_terms;
      jb["per_zone_unsup"] = bd->per_zone_unsup_terms;
      jr[key] = std::move(jb);
    }
    hist.push_back(std::move(jr));
  }
  hdr["history"] = std::move(hist);
  const std::string hs = hdr.dump();
  const uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), std::streamsize(hs.size()));
  write_vecf(f, state.best_params);
  const uint64_t nm = adam.m.size();
  f.write(reinterpret_cast<const char*>(&nm), 8);
  for (const auto& mv : adam.m) write_vecf(f, mv);
  for (const auto& vv : adam.v) write_vecf(f, vv);
  if (!f) throw IoError("short write to " + path);
}

void load_train_checkpoint(const std::string& path, DualModel& model, Adam& adam,
                           TrainState& state) {
  {
    DualModel loaded = DualModel::load_checkpoint(path + ".model");
    if (!(loaded.config() == model.config()) || loaded.variant() != model.variant())
      throw ConfigError("training checkpoint config mismatch");
    model.set_parameters(loaded.get_parameters());
  }
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), 8);
  std::string hs(hlen, '\0');
  f.read(hs.data(), std::streamsize(hlen));
  json hdr = json::parse(hs);
  state.stage = TrainStage(hdr.at("stage").get<int>());
  state.epochs_run = hdr.at("epochs_run").get<int>();
  state.best_val = hdr.at("best_val").get<double>();
  state.best_epoch = hdr.at("best_epoch").get<int>();
  state.epochs_since_improvement = hdr.at("since_improvement").get<int>();
  adam.t = hdr.at("adam_t").get<int64_t>();
  state.best_params = read_vecf(f);
  uint64_t nm = 0;
  f.read(reinterpret_cast<char*>(&nm), 8);
  adam.m.resize(nm);
  adam.v.resize(nm);
  for (auto& mv : adam.m) mv = read_vecf(f);
  for (auto& vv : adam.v) vv = read_vecf(f);
  if (!f) throw FormatError("truncated training checkpoint " + path);
  state.history.clear();
  for (const json& jr : hdr.at("history")) {
    EpochRecord r;
    r.epoch = jr.at("epoch").get<int>();
    r.stage = jr.at("stage").get<int>();
    for (const auto& [key, bd] :
         {std::pair<const char*, LossBreakdown*>{"train", &r.train_mean}, {"val", &r.val_mean}}) {
      const json& jb = jr.at(key);
      bd->dsc = jb.at("dsc").get<double>();
      bd->recon = jb.at("recon").get<double>();
      bd->unsup = jb.at("unsup").get<double>();
      bd->supervised_total = jb.at("supervised_total").get<double>();
      bd->grand_total = jb.at("grand_total").get<double>();
      bd->per_zone_dsc_terms = jb.at("per_zone_dsc").get<std::array<double, kNumZones>>();
      bd->per_zone_unsup_terms = jb.at("per_zone_unsup").get<std::array<double, kNumZones>>();
    }
    state.history.push_back(std::move(r));
  }
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

CrossValResult run_cross_validation(const std::vector<TrainCase>& trainval,
                                    const std::vector<TrainCase>& test, const TrainConfig& cfg,
                                    const std::string& out_dir) {
  cfg.validate();
  if (int(trainval.size()) < cfg.fold_count)
    throw ConfigError("fold_count exceeds the number of train+validation cases");
  std::filesystem::create_directories(out_dir);

  std::vector<std::string> ids;
  for (const auto& c : trainval) ids.push_back(c.id);
  const auto folds = make_folds(ids, cfg.fold_count, cfg.seed);

  auto find_case = [&](const std::string& id) -> const TrainCase& {
    for (const auto& c : trainval)
      if (c.id == id) return c;
    throw ConfigError("case id not found: " + id);
  };

  CrossValResult result;
  std::array<std::vector<double>, kNumZones> fold_dsc, fold_mad;
  for (int k = 0; k < cfg.fold_count; ++k) {
    const std::string fold_dir = out_dir + "/fold_" + std::to_string(k);
    std::filesystem::create_directories(fold_dir);

    FoldResult fr;
    fr.fold = k;
    fr.val_ids = folds[size_t(k)];
    std::vector<TrainCase> val_set, train_set;
    for (const std::string& id : fr.val_ids) val_set.push_back(find_case(id));
    for (const auto& c : trainval) {
      if (std::find(fr.val_ids.begin(), fr.val_ids.end(), c.id) == fr.val_ids.end()) {
        fr.train_ids.push_back(c.id);
        train_set.push_back(c);
      }
    }

    ModelConfig mc = cfg.model;
    mc.parameter_seed = cfg.seed + uint64_t(k);
    DualModel model(mc, cfg.variant);
    TrainLog log(fold_dir + "/log.csv");
    fr.stage1 = train_stage1(model, train_set, val_set, cfg, &log);
    if (!cfg.stage1_only) fr.stage2 = train_stage2(model, train_set, val_set, cfg, &log);
    model.save_checkpoint(fold_dir + "/best.ckpt");

    // Evaluation on the shared test set through the full pipeline.
    std::vector<LabelMap> preds;
    preds.reserve(test.size());
    for (const auto& c : test) {
      DualBranchOutput out = model.forward(c.image);
      model.clear_cache();
      preds.push_back(postprocess_pipeline(out, cfg.assign, c.image.spacing));
    }
    std::vector<EvalCase> eval_cases;
    for (size_t i = 0; i < test.size(); ++i)
      eval_cases.push_back({test[i].id, &preds[i], &test[i].labels});
    const Spacing spacing = test.empty() ? Spacing{1.0, 1.0, 1.0} : test[0].image.spacing;
    fr.report = build_report(eval_cases, spacing);

    {
      std::ofstream rf(fold_dir + "/report.json");
      rf << report_to_json(fr.report) << "\n";
      std::ofstream tf(fold_dir + "/report.txt");
      tf << render_table(fr.report, variant_name(cfg.variant) + "/fold" + std::to_string(k));
    }
    for (ZoneLabel z : kAllZones) {
      if (fr.report.dsc_aggregate[size_t(z)].n > 0)
        fold_dsc[size_t(z)].push_back(fr.report.dsc_aggregate[size_t(z)].mean);
      if (fr.report.mad_aggregate[size_t(z)].n > 0)
        fold_mad[size_t(z)].push_back(fr.report.mad_aggregate[size_t(z)].mean);
    }
    result.folds.push_back(std::move(fr));
  }
  for (ZoneLabel z : kAllZones) {
    result.dsc_across_folds[size_t(z)] = aggregate(fold_dsc[size_t(z)]);
    result.mad_across_folds[size_t(z)] = aggregate(fold_mad[size_t(z)]);
  }

  json summary;
  for (ZoneLabel z : kAllZones) {
    summary["dsc"][zone_name(z)] = {{"mean", result.dsc_across_folds[size_t(z)].mean},
                                    {"sd", result.dsc_across_folds[size_t(z)].sd}};
    summary["mad"][zone_name(z)] = {{"mean", result.mad_across_folds[size_t(z)].mean},
                                    {"sd", result.mad_across_folds[size_t(z)].sd}};
  }
  std::ofstream sf(out_dir + "/summary.json");
  sf << summary.dump(2) << "\n";
  return result;
}

}  // namespace zoneseg
