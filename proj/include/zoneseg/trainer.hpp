#pragma once

#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "zoneseg/losses.hpp"
#include "zoneseg/metrics.hpp"
#include "zoneseg/nets.hpp"
#include "zoneseg/volume.hpp"

namespace zoneseg {

struct TrainConfig {
  double learning_rate = 1e-5;
  int patience = 30;
  int stage1_min_epochs = 1;
  int max_epochs = 500;
  int batch_size = 1;  // cases per optimizer step
  int fold_count = 4;
  uint64_t seed = 0;
  Variant variant = Variant::mix_reco;
  bool disable_unsup = false;  // Stage-II ablation: drop the consistency term
  bool stage1_only = false;    // skip Stage-II entirely
  ModelConfig model;
  LossConfig loss;
  BranchAssignment assign = BranchAssignment::defaults();
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

/// A case held in memory, preprocessed and one-hot expanded once.
struct TrainCase {
  std::string id;
  Volume image;  // preprocessed, values in [0,1]
  LabelMap labels;
  std::array<std::vector<float>, kNumZones> onehot;
  GridD image_d;  // double view of image for the SSIM loss

  static TrainCase make(std::string id, Volume raw_image, LabelMap labels);
};

struct EpochRecord {
  int epoch = 0;  // 1-based within the stage
  int stage = 1;
  LossBreakdown train_mean;
  LossBreakdown val_mean;
};

struct TrainState {
  TrainStage stage = TrainStage::I;
  int epochs_run = 0;
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  int epochs_since_improvement = 0;
  std::vector<float> best_params;
  std::vector<EpochRecord> history;
};

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::vector<ParamBlock> params);

  // Exposed for exact checkpoint/resume.
  int64_t t = 0;
  std::vector<std::vector<float>> m, v;

 private:
  double lr_, beta1_, beta2_, eps_;
};

/// Per-step CSV training log.
class TrainLog {
 public:
  explicit TrainLog(const std::string& path);
  void row(int64_t step, TrainStage stage, const LossBreakdown& bd);

 private:
  std::ofstream out_;
};

/// One epoch-loop stage. Stage-I optimizes the supervised loss; Stage-II
/// additionally the inter-branch consistency term (unless disabled).
/// Early stopping: stop once the stage's minimum epoch count is reached and
/// the validation loss has not improved for cfg.patience epochs. The model
/// is left at the best-validation snapshot.
TrainState train_stage(DualModel& model, TrainStage stage, const std::vector<TrainCase>& train,
                       const std::vector<TrainCase>& val, const TrainConfig& cfg,
                       TrainLog* log = nullptr, Adam* resume_adam = nullptr,
                       const TrainState* resume_state = nullptr);

TrainState train_stage1(DualModel& model, const std::vector<TrainCase>& train,
                        const std::vector<TrainCase>& val, const TrainConfig& cfg,
                        TrainLog* log = nullptr);
TrainState train_stage2(DualModel& model, const std::vector<TrainCase>& train,
                        const std::vector<TrainCase>& val, const TrainConfig& cfg,
                        TrainLog* log = nullptr);

/// Mean loss breakdown over cases, no gradients.
LossBreakdown evaluate_loss(DualModel& model, const std::vector<TrainCase>& cases,
                            TrainStage stage, const TrainConfig& cfg);

/// Single optimization step on one batch; returns the summed breakdown.
LossBreakdown train_step(DualModel& model, const std::vector<const TrainCase*>& batch,
                         TrainStage stage, const TrainConfig& cfg, Adam& adam);

/// Deterministic validation-fold partition: shuffle ids by seed, deal
/// round-robin. Folds are pairwise disjoint and cover all ids.
std::vector<std::vector<std::string>> make_folds(std::vector<std::string> ids, int fold_count,
                                                 uint64_t seed);

// Exact training checkpoint (model + optimizer + stage state).
void save_train_checkpoint(const std::string& path, DualModel& model, const Adam& adam,
                           const TrainState& state);
void load_train_checkpoint(const std::string& path, DualModel& model, Adam& adam,
                           TrainState& state);

struct FoldResult {
  int fold = 0;
  std::vector<std::string> train_ids, val_ids;
  TrainState stage1, stage2;
  MetricsReport report;
};

struct CrossValResult {
  std::vector<FoldResult> folds;
  // mean +- sample sd across folds of each fold's per-zone mean
  std::array<Aggregate, kNumZones> dsc_across_folds;
  std::array<Aggregate, kNumZones> mad_across_folds;
};

/// Folds partition the train+validation cases only; the test set is fixed
/// and shared. Per fold: Stage-I, Stage-II, then evaluation on the test set
/// through the post-processing pipeline. Writes per-fold checkpoints, logs
/// and reports under out_dir.
CrossValResult run_cross_validation(const std::vector<TrainCase>& trainval,
                                    const std::vector<TrainCase>& test, const TrainConfig& cfg,
                                    const std::string& out_dir);

}  // namespace zoneseg
