#include "cmformer/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "cmformer/errors.hpp"

namespace cmf {

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0 || n_queries == 0 || width == 0 ||
      n_classes == 0 || lr <= 0.0) {
    throw config_error("config: numeric fields must be positive");
  }
  if (weight_decay < 0.0 || no_object_weight < 0.0 || dice_eps <= 0.0) {
    throw config_error("config: negative weight fields");
  }
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw config_error("config: bad boolean for " + key + ": '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error("config: bad number for " + key + ": '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const unsigned long long x = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw config_error("config: bad integer for " + key + ": '" + v + "'");
  }
}

}  // namespace

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw config_error("config line " + std::to_string(lineno) +
                         ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "epochs") cfg.epochs = parse_u64(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_u64(key, value);
    else if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_double(key, value);
    else if (key == "lambda_ce") cfg.lambda_ce = parse_double(key, value);
    else if (key == "lambda_dice") cfg.lambda_dice = parse_double(key, value);
    else if (key == "lambda_cls") cfg.lambda_cls = parse_double(key, value);
    else if (key == "n_queries") cfg.n_queries = parse_u64(key, value);
    else if (key == "width") cfg.width = parse_u64(key, value);
    else if (key == "classes") cfg.n_classes = parse_u64(key, value);
    else if (key == "enhance_32") cfg.enhance_32 = parse_bool(key, value);
    else if (key == "enhance_16") cfg.enhance_16 = parse_bool(key, value);
    else if (key == "enhance_8") cfg.enhance_8 = parse_bool(key, value);
    else if (key == "no_object_weight")
      cfg.no_object_weight = parse_double(key, value);
    else if (key == "dice_eps") cfg.dice_eps = parse_double(key, value);
    else if (key == "attn_heads") cfg.attn_heads = parse_u64(key, value);
    else if (key == "share_query_proj")
      cfg.share_query_proj = parse_bool(key, value);
    else if (key == "source_domain") cfg.source_domain = value;
    else if (key == "data_dir") cfg.data_dir = value;
    else if (key == "ablate_seeds") cfg.ablate_seeds = parse_u64(key, value);
    else throw config_error("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::uint64_t resolve_seed(const TrainConfig& cfg, const std::uint64_t* cli) {
  if (cli) return *cli;
  if (const char* env = std::getenv("CMA_SEED")) {
    return parse_u64("CMA_SEED", env);
  }
  return cfg.seed;
}

}  // namespace cmf
