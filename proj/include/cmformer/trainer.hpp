#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cmformer/config.hpp"
#include "cmformer/metrics.hpp"
#include "cmformer/segmodel.hpp"
#include "cmformer/synthbench.hpp"

namespace cmf {

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::optional<double> val_miou;
};

struct TrainResult {
  std::string checkpoint_path;
  std::string log_path;
  std::vector<EpochStats> epochs;
  std::optional<double> final_val_miou;
  bool aborted_on_nan = false;
};

ModelConfig model_config_from(const TrainConfig& cfg);

// Adam with decoupled weight decay; per-epoch mean batch loss and validation
// mIoU (computed from the epoch's saved checkpoint, so logged values match a
// later `evaluate` of that file exactly). Writes out_dir/ckpt.cmck and
// out_dir/log.csv.
TrainResult train(const TrainConfig& cfg, const Dataset& train_data,
                  const Dataset& val_data, const std::string& out_dir);

MetricsReport evaluate_model(const Model& model, const Dataset& data);

// Load a checkpoint, run inference over the dataset, aggregate the confusion
// and append one CSV row to report_path (unless empty).
MetricsReport evaluate(const std::string& ckpt_path, const Dataset& data,
                       const std::string& domain_name,
                       const std::string& report_path, std::uint64_t seed = 0);

struct AblateRun {
  std::string config_name;
  std::uint64_t seed = 0;
  std::optional<double> in_domain_miou;
  std::vector<std::pair<std::string, double>> unseen_miou;  // (domain, miou)
  std::string checkpoint_path;
};

struct AblateResult {
  std::vector<std::string> config_names;   // row order
  std::vector<std::string> unseen_domains; // column order
  std::vector<AblateRun> runs;
  std::string table_path;
  std::string runs_path;
};

// Train {none}, {32}, {32,16}, {32,16,8} on the source domain with
// cfg.ablate_seeds seeds each, evaluate every run on the other domains'
// validation sets, and emit the mean +/- sd table. `jobs` > 1 runs the
// independent (config, seed) jobs on worker threads.
AblateResult ablate(const TrainConfig& cfg, const std::string& data_dir,
                    const std::string& out_dir, std::size_t jobs = 1);

}  // namespace cmf
