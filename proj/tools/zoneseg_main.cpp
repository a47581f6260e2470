// zoneseg: synthetic data generation, dual-branch training, post-processing
// and evaluation for five-class prostate zone segmentation volumes.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "zoneseg/connectivity.hpp"
#include "zoneseg/errors.hpp"
#include "zoneseg/manifest.hpp"
#include "zoneseg/metrics.hpp"
#include "zoneseg/phantom.hpp"
#include "zoneseg/postprocess.hpp"
#include "zoneseg/trainer.hpp"
#include "zoneseg/volume.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace zoneseg;

namespace {

// Flags override config-file values, which override built-in defaults.
// Environment variables ZONESEG_SEED / ZONESEG_OUT fill in unset flags.
struct CommonArgs {
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
};

void apply_env(CommonArgs& common) {
  if (!common.seed_set) {
    if (const char* s = std::getenv("ZONESEG_SEED")) {
      common.seed = std::strtoull(s, nullptr, 10);
      common.seed_set = true;
    }
  }
  if (common.out_dir.empty()) {
    if (const char* s = std::getenv("ZONESEG_OUT")) common.out_dir = s;
  }
}

json load_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    f >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
  }
  return j;
}

void write_manifest(const std::string& command, const json& config, uint64_t seed,
                    const std::map<std::string, std::string>& input_hashes,
                    const std::string& started, const std::string& out_dir) {
  fs::create_directories(out_dir);
  RunManifest m;
  m.command = command;
  m.config = config;
  m.seed = seed;
  m.input_hashes = input_hashes;
  m.started_at = started;
  m.finished_at = now_iso8601();
  m.write(out_dir + "/manifest.json");
}

std::string data_path(const std::string& dir, const std::string& id, const char* kind) {
  return dir + "/" + id + "_" + kind + ".raw";
}

std::vector<TrainCase> load_cases(const std::string& data_dir,
                                  const std::vector<std::string>& ids,
                                  std::map<std::string, std::string>* hashes) {
  std::vector<TrainCase> cases;
  cases.reserve(ids.size());
  for (const std::string& id : ids) {
    const std::string img = data_path(data_dir, id, "img");
    const std::string lab = data_path(data_dir, id, "lab");
    if (hashes) {
      (*hashes)[img] = file_hash_hex(img);
      (*hashes)[lab] = file_hash_hex(lab);
    }
    cases.push_back(TrainCase::make(id, load_volume(img), load_labels(lab)));
  }
  return cases;
}

int cmd_generate(int cases, const CommonArgs& common, const PhantomSpec& spec) {
  const std::string started = now_iso8601();
  generate_dataset(cases, spec, common.out_dir);
  json cfg;
  cfg["cases"] = cases;
  cfg["shape"] = {spec.shape.d, spec.shape.h, spec.shape.w};
  cfg["spacing"] = {spec.spacing[0], spec.spacing[1], spec.spacing[2]};
  cfg["noise_level"] = spec.noise_level;
  write_manifest("generate", cfg, spec.seed, {}, started, common.out_dir);
  std::cerr << "wrote " << cases << " cases to " << common.out_dir << "\n";
  return 0;
}

json train_config_to_json(const TrainConfig& cfg, const std::string& data_dir) {
  json j;
  j["data"] = data_dir;
  j["variant"] = variant_name(cfg.variant);
  j["learning_rate"] = cfg.learning_rate;
  j["patience"] = cfg.patience;
  j["max_epochs"] = cfg.max_epochs;
  j["batch_size"] = cfg.batch_size;
  j["folds"] = cfg.fold_count;
  j["seed"] = cfg.seed;
  j["stage1_only"] = cfg.stage1_only;
  j["disable_unsup"] = cfg.disable_unsup;
  j["base_filters"] = cfg.model.base_filters;
  j["depth"] = cfg.model.depth;
  return j;
}

int cmd_train(const std::string& data_dir, const CommonArgs& common, TrainConfig cfg) {
  const std::string started = now_iso8601();
  cfg.seed = common.seed;
  cfg.validate();

  const DatasetSplit split = load_split(data_dir + "/split.json");
  std::map<std::string, std::string> hashes;
  hashes[data_dir + "/split.json"] = file_hash_hex(data_dir + "/split.json");

  std::vector<std::string> trainval_ids = split.train;
  trainval_ids.insert(trainval_ids.end(), split.validation.begin(), split.validation.end());
  const std::vector<TrainCase> trainval = load_cases(data_dir, trainval_ids, &hashes);
  const std::vector<TrainCase> test = load_cases(data_dir, split.test, &hashes);

  const CrossValResult cv = run_cross_validation(trainval, test, cfg, common.out_dir);
  write_manifest("train", train_config_to_json(cfg, data_dir), cfg.seed, hashes, started,
                 common.out_dir);
  for (const FoldResult& fr : cv.folds) {
    const size_t best2 = 0;
    (void)best2;
    std::cerr << "fold " << fr.fold << ": stage1 best val " << fr.stage1.best_val;
    if (!cfg.stage1_only) std::cerr << ", stage2 best val " << fr.stage2.best_val;
    std::cerr << "\n";
  }
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data_dir,
                 const CommonArgs& common, bool gt_identity, bool save_probs,
                 const std::string& export_slices) {
  const std::string started = now_iso8601();
  fs::create_directories(common.out_dir);

  const DatasetSplit split = load_split(data_dir + "/split.json");
  std::map<std::string, std::string> hashes;
  hashes[data_dir + "/split.json"] = file_hash_hex(data_dir + "/split.json");
  const std::vector<TrainCase> test = load_cases(data_dir, split.test, &hashes);
  if (test.empty()) throw ConfigError("split has no test cases");

  std::vector<LabelMap> preds;
  preds.reserve(test.size());
  if (gt_identity) {
    for (const auto& c : test) preds.push_back(c.labels);
  } else {
    if (checkpoint.empty()) throw ConfigError("--checkpoint is required (or use --use-gt)");
    hashes[checkpoint] = file_hash_hex(checkpoint);
    DualModel model = DualModel::load_checkpoint(checkpoint);
    const BranchAssignment assign = BranchAssignment::defaults();
    for (const auto& c : test) {
      DualBranchOutput out = model.forward(c.image);
      model.clear_cache();
      if (save_probs)
        save_dual_output(out, c.image.spacing, common.out_dir + "/" + c.id + "_probs.bin");
      preds.push_back(postprocess_pipeline(out, assign, c.image.spacing));
    }
  }

  std::vector<EvalCase> eval_cases;
  for (size_t i = 0; i < test.size(); ++i)
    eval_cases.push_back({test[i].id, &preds[i], &test[i].labels});
  const MetricsReport report = build_report(eval_cases, test[0].image.spacing);

  {
    std::ofstream rf(common.out_dir + "/report.json");
    rf << report_to_json(report) << "\n";
    std::ofstream tf(common.out_dir + "/report.txt");
    const std::string label = gt_identity ? "ground_truth" : fs::path(checkpoint).stem().string();
    tf << render_table(report, label);
  }

  if (!export_slices.empty()) {
    // Per-slice PGM images: intensity in gray, zone boundaries brightened by
    // zone index, enough for a quick visual check without image libraries.
    fs::create_directories(export_slices);
    for (size_t i = 0; i < test.size(); ++i) {
      const Volume& v = test[i].image;
      const LabelMap& p = preds[i];
      for (int z = 0; z < v.shape.d; ++z) {
        std::ofstream img(export_slices + "/" + test[i].id + "_z" + std::to_string(z) + ".pgm",
                          std::ios::binary);
        img << "P5\n" << v.shape.w << " " << v.shape.h << "\n255\n";
        for (int y = 0; y < v.shape.h; ++y)
          for (int x = 0; x < v.shape.w; ++x) {
            int g = int(v.at(z, y, x) * 180.0f);
            bool boundary = false;
            const uint8_t lab = p.labels[p.shape.index(z, y, x)];
            if (lab != 0) {
              for (const auto& off : kNeighborOffsets) {
                const int nz = z + off[0], ny = y + off[1], nx = x + off[2];
                if (nz < 0 || ny < 0 || nx < 0 || nz >= p.shape.d || ny >= p.shape.h ||
                    nx >= p.shape.w || p.labels[p.shape.index(nz, ny, nx)] != lab) {
                  boundary = true;
                  break;
                }
              }
            }
            if (boundary) g = 200 + 10 * lab;
            img.put(char(std::clamp(g, 0, 255)));
          }
      }
    }
  }

  json cfg;
  cfg["checkpoint"] = checkpoint;
  cfg["data"] = data_dir;
  cfg["use_gt"] = gt_identity;
  write_manifest("evaluate", cfg, common.seed, hashes, started, common.out_dir);
  std::cout << render_table(report, gt_identity ? "ground_truth" : "model");
  return 0;
}

int cmd_postprocess(const std::string& probs_path, const CommonArgs& common,
                    const std::string& out_name) {
  const std::string started = now_iso8601();
  fs::create_directories(common.out_dir);
  auto [out, spacing] = load_dual_output(probs_path);
  const LabelMap lm = postprocess_pipeline(out, BranchAssignment::defaults(), spacing);
  const std::string out_path = common.out_dir + "/" + out_name;
  save_labels(lm, out_path);
  json cfg;
  cfg["probs"] = probs_path;
  cfg["output"] = out_path;
  write_manifest("postprocess", cfg, common.seed,
                 {{probs_path, file_hash_hex(probs_path)}}, started, common.out_dir);
  std::cerr << "wrote " << out_path << "\n";
  return 0;
}

int cmd_compare(const std::string& path_a, const std::string& path_b, double alpha,
                const CommonArgs& common) {
  const std::string started = now_iso8601();
  auto read_report = [](const std::string& p) {
    std::ifstream f(p);
    if (!f) throw IoError("cannot open report: " + p);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return report_from_json(text);
  };
  const MetricsReport ra = read_report(path_a);
  const MetricsReport rb = read_report(path_b);

  std::cout << " | zone | mean_a | mean_b | t | p | significant |\n";
  std::cout << " | --- | --- | --- | --- | --- | --- |\n";
  for (ZoneLabel zl : kForegroundZones) {
    std::vector<double> a, b;
    for (const auto& [id, za] : ra.per_case) {
      auto itb = rb.per_case.find(id);
      if (itb == rb.per_case.end()) continue;
      const auto& da = za[size_t(zl)].dsc;
      const auto& db = itb->second[size_t(zl)].dsc;
      if (da && db) {
        a.push_back(*da);
        b.push_back(*db);
      }
    }
    if (a.size() < 2) {
      std::cout << " | " << zone_name(zl) << " | - | - | - | - | too few paired cases |\n";
      continue;
    }
    const TTestResult r = paired_t_test_one_sided(a, b, alpha);
    double ma = 0, mb = 0;
    for (double v : a) ma += v;
    for (double v : b) mb += v;
    ma /= double(a.size());
    mb /= double(b.size());
    char line[160];
    std::snprintf(line, sizeof(line), " | %s | %.4f | %.4f | %.4f | %.4f | %s%s |\n",
                  zone_name(zl), ma, mb, r.t_statistic, r.p_value,
                  r.significant ? "yes" : "no", r.degenerate ? " (degenerate)" : "");
    std::cout << line;
  }

  if (!common.out_dir.empty()) {
    json cfg;
    cfg["a"] = path_a;
    cfg["b"] = path_b;
    cfg["alpha"] = alpha;
    write_manifest("compare", cfg, common.seed,
                   {{path_a, file_hash_hex(path_a)}, {path_b, file_hash_hex(path_b)}}, started,
                   common.out_dir);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch prostate-zone segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file; flags override its values");

  // generate
  auto* gen = app.add_subcommand("generate", "Write a synthetic phantom dataset");
  int gen_cases = 10;
  PhantomSpec spec;
  CommonArgs gen_common;
  gen->add_option("--cases", gen_cases, "number of cases (>= 5)");
  gen->add_option("--seed", gen_common.seed, "base RNG seed")
      ->each([&](const std::string&) { gen_common.seed_set = true; });
  gen->add_option("--out", gen_common.out_dir, "output directory")->required();
  gen->add_option("--depth", spec.shape.d, "volume depth (slices)");
  gen->add_option("--height", spec.shape.h, "volume height");
  gen->add_option("--width", spec.shape.w, "volume width");
  gen->add_option("--noise", spec.noise_level, "intensity noise level");

  // train
  auto* tr = app.add_subcommand("train", "Two-stage cross-validated training");
  std::string tr_data;
  CommonArgs tr_common;
  TrainConfig tcfg;
  std::string tr_variant = "mix_reco";
  bool deterministic = false;
  tr->add_option("--data", tr_data, "dataset directory (from generate)")->required();
  tr->add_option("--out", tr_common.out_dir, "run output directory")->required();
  tr->add_option("--variant", tr_variant, "par | par_reco | mix | mix_reco");
  tr->add_option("--folds", tcfg.fold_count, "validation folds");
  tr->add_option("--seed", tr_common.seed, "RNG seed")
      ->each([&](const std::string&) { tr_common.seed_set = true; });
  tr->add_option("--lr", tcfg.learning_rate, "learning rate");
  tr->add_option("--patience", tcfg.patience, "early-stopping patience (epochs)");
  tr->add_option("--max-epochs", tcfg.max_epochs, "epoch cap per stage");
  tr->add_option("--batch-size", tcfg.batch_size, "cases per optimizer step");
  tr->add_option("--base-filters", tcfg.model.base_filters, "first-level channel count");
  tr->add_option("--depth", tcfg.model.depth, "resolution levels");
  tr->add_flag("--stage1-only", tcfg.stage1_only, "skip the consistency stage");
  tr->add_flag("--no-unsup", tcfg.disable_unsup, "run stage two without the consistency term");
  tr->add_flag("--deterministic", deterministic,
               "single-threaded bit-reproducible mode (always on; flag kept for scripts)");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Run a checkpoint on the test split");
  std::string ev_ckpt, ev_data, ev_slices;
  CommonArgs ev_common;
  bool ev_gt = false, ev_save_probs = false;
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint (best.ckpt)");
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--out", ev_common.out_dir, "output directory")->required();
  ev->add_flag("--use-gt", ev_gt, "score the ground truth against itself (sanity oracle)");
  ev->add_flag("--save-probs", ev_save_probs, "also write raw branch outputs per case");
  ev->add_option("--export-slices", ev_slices, "write per-slice PGM overlays to this directory");

  // postprocess
  auto* pp = app.add_subcommand("postprocess", "Fuse, filter and hole-fill saved branch outputs");
  std::string pp_probs, pp_name = "labels.raw";
  CommonArgs pp_common;
  pp->add_option("--probs", pp_probs, "branch-output file (from evaluate --save-probs)")
      ->required();
  pp->add_option("--out", pp_common.out_dir, "output directory")->required();
  pp->add_option("--name", pp_name, "output label file name (.raw / .nii / .nii.gz)");

  // compare
  auto* cp = app.add_subcommand("compare", "Paired one-sided t-test between two reports");
  std::string cp_a, cp_b;
  double cp_alpha = 0.05;
  CommonArgs cp_common;
  cp->add_option("--a", cp_a, "report.json of the candidate run")->required();
  cp->add_option("--b", cp_b, "report.json of the baseline run")->required();
  cp->add_option("--alpha", cp_alpha, "significance level");
  cp->add_option("--out", cp_common.out_dir, "optional directory for the run manifest");

  CLI11_PARSE(app, argc, argv);

  try {
    json file_cfg;
    if (!config_path.empty()) file_cfg = load_config_file(config_path);
    auto cfg_or = [&](const char* key, auto current, bool flag_given) {
      using T = decltype(current);
      if (!flag_given && file_cfg.contains(key)) return file_cfg[key].template get<T>();
      return current;
    };

    if (gen->parsed()) {
      apply_env(gen_common);
      gen_cases = cfg_or("cases", gen_cases, gen->count("--cases") > 0);
      gen_common.seed = cfg_or("seed", gen_common.seed, gen_common.seed_set);
      spec.seed = gen_common.seed;
      return cmd_generate(gen_cases, gen_common, spec);
    }
    if (tr->parsed()) {
      apply_env(tr_common);
      tr_variant = cfg_or("variant", tr_variant, tr->count("--variant") > 0);
      tcfg.learning_rate = cfg_or("learning_rate", tcfg.learning_rate, tr->count("--lr") > 0);
      tcfg.patience = cfg_or("patience", tcfg.patience, tr->count("--patience") > 0);
      tcfg.max_epochs = cfg_or("max_epochs", tcfg.max_epochs, tr->count("--max-epochs") > 0);
      tcfg.fold_count = cfg_or("folds", tcfg.fold_count, tr->count("--folds") > 0);
      tcfg.model.base_filters =
          cfg_or("base_filters", tcfg.model.base_filters, tr->count("--base-filters") > 0);
      tcfg.model.depth = cfg_or("depth", tcfg.model.depth, tr->count("--depth") > 0);
      tr_common.seed = cfg_or("seed", tr_common.seed, tr_common.seed_set);
      tcfg.variant = variant_from_name(tr_variant);
      tcfg.model.recon_head = variant_has_recon(tcfg.variant);
      return cmd_train(tr_data, tr_common, tcfg);
    }
    if (ev->parsed()) {
      apply_env(ev_common);
      return cmd_evaluate(ev_ckpt, ev_data, ev_common, ev_gt, ev_save_probs, ev_slices);
    }
    if (pp->parsed()) {
      apply_env(pp_common);
      return cmd_postprocess(pp_probs, pp_common, pp_name);
    }
    if (cp->parsed()) {
      apply_env(cp_common);
      return cmd_compare(cp_a, cp_b, cp_alpha, cp_common);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
