#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace cmf {

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  double lr = 1e-4;
  double weight_decay = 0.05;
  double lambda_ce = 5.0;
  double lambda_dice = 5.0;
  double lambda_cls = 2.0;
  std::size_t n_queries = 20;
  std::size_t width = 32;
  std::size_t n_classes = 6;
  bool enhance_32 = true;
  bool enhance_16 = true;
  bool enhance_8 = true;
  double no_object_weight = 0.1;
  double dice_eps = 1.0;
  std::size_t attn_heads = 1;
  bool share_query_proj = false;
  std::string source_domain = "clear";
  std::string data_dir = "data";
  std::size_t ablate_seeds = 3;

  void validate() const;
};

// UTF-8 `key = value` lines with `#` comments. Unknown keys are errors.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);

// CLI > CMA_SEED env > config file.
std::uint64_t resolve_seed(const TrainConfig& cfg, const std::uint64_t* cli);

}  // namespace cmf
