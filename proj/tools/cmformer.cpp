#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cmformer/config.hpp"
#include "cmformer/gradcheck.hpp"
#include "cmformer/synthbench.hpp"
#include "cmformer/trainer.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_domains(const std::string& list) {
  if (list == "all") {
    std::vector<std::string> names;
    for (const cmf::DomainStyle& s : cmf::domain_presets())
      names.push_back(s.name);
    return names;
  }
  std::vector<std::string> names;
  std::size_t start = 0;
  while (start <= list.size()) {
    const auto comma = list.find(',', start);
    const auto end = comma == std::string::npos ? list.size() : comma;
    if (end > start) names.push_back(list.substr(start, end - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return names;
}

int cmd_gen_data(const std::string& out_dir, const std::string& domains,
                 std::size_t scenes, std::size_t val_scenes,
                 std::uint64_t seed, std::size_t size, std::size_t classes) {
  fs::create_directories(out_dir);
  cmf::SceneConfig scene_cfg;
  scene_cfg.h = size;
  scene_cfg.w = size;
  scene_cfg.n_classes = classes;
  // validation scenes come from a disjoint seed range
  const std::uint64_t val_base = seed + 1000000;
  for (const std::string& name : split_domains(domains)) {
    const cmf::DomainStyle& style = cmf::find_preset(name);
    cmf::Dataset train =
        cmf::generate_domain_dataset(style, seed, scenes, scene_cfg);
    cmf::Dataset val =
        cmf::generate_domain_dataset(style, val_base, val_scenes, scene_cfg);
    const auto train_path = fs::path(out_dir) / (name + "_train.cmsb");
    const auto val_path = fs::path(out_dir) / (name + "_val.cmsb");
    cmf::write_dataset(train, train_path.string());
    cmf::write_dataset(val, val_path.string());
    std::cout << name << ": " << scenes << " train, " << val_scenes
              << " val -> " << out_dir << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"content-enhanced mask transformer workbench"};
  app.require_subcommand(1);

  // gen-data
  std::string gd_out = "data", gd_domains = "all";
  std::size_t gd_scenes = 200, gd_val = 50, gd_size = 64, gd_classes = 6;
  std::uint64_t gd_seed = 1;
  auto* gen = app.add_subcommand("gen-data", "generate domain datasets");
  gen->add_option("--out", gd_out, "output directory");
  gen->add_option("--domains", gd_domains, "comma list or 'all'");
  gen->add_option("--scenes", gd_scenes, "training scenes per domain");
  gen->add_option("--val-scenes", gd_val, "validation scenes per domain");
  gen->add_option("--seed", gd_seed, "scene seed base");
  gen->add_option("--size", gd_size, "canvas size (multiple of 32)");
  gen->add_option("--classes", gd_classes, "number of classes");

  // train
  std::string tr_config, tr_data, tr_out = "run";
  std::uint64_t tr_seed = 0;
  bool tr_seed_set = false;
  auto* tr = app.add_subcommand("train", "train on the source domain");
  tr->add_option("--config", tr_config, "config file")->required();
  tr->add_option("--data", tr_data, "data directory (overrides config)");
  tr->add_option("--out", tr_out, "output directory");
  tr->add_option("--seed", tr_seed, "seed override (highest precedence)")
      ->each([&](const std::string&) { tr_seed_set = true; });

  // eval
  std::string ev_ckpt, ev_data, ev_domain, ev_report;
  std::uint64_t ev_seed = 0;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ev_ckpt, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "dataset file")->required();
  ev->add_option("--domain", ev_domain, "domain name for the report")
      ->required();
  ev->add_option("--report", ev_report, "CSV report to append to");
  ev->add_option("--seed", ev_seed, "seed recorded in the report row");

  // ablate
  std::string ab_config, ab_data, ab_out = "ablation";
  std::size_t ab_jobs = 2;
  auto* ab = app.add_subcommand("ablate", "run the enhancement ablation");
  ab->add_option("--config", ab_config, "config file")->required();
  ab->add_option("--data", ab_data, "data directory (overrides config)");
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--jobs", ab_jobs, "parallel training jobs");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference suite");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_gen_data(gd_out, gd_domains, gd_scenes, gd_val, gd_seed,
                          gd_size, gd_classes);
    }
    if (tr->parsed()) {
      cmf::TrainConfig cfg = cmf::load_config(tr_config);
      cfg.seed = cmf::resolve_seed(cfg, tr_seed_set ? &tr_seed : nullptr);
      const std::string data_dir = tr_data.empty() ? cfg.data_dir : tr_data;
      const auto base = fs::path(data_dir);
      cmf::Dataset train_data = cmf::read_dataset(
          (base / (cfg.source_domain + "_train.cmsb")).string());
      cmf::Dataset val_data = cmf::read_dataset(
          (base / (cfg.source_domain + "_val.cmsb")).string());
      cmf::TrainResult result = cmf::train(cfg, train_data, val_data, tr_out);
      if (result.aborted_on_nan) {
        std::cerr << "training aborted on non-finite loss; last good "
                     "checkpoint retained\n";
        return 2;
      }
      std::cout << "checkpoint: " << result.checkpoint_path << "\n"
                << "log: " << result.log_path << "\n";
      if (result.final_val_miou) {
        std::printf("final val mIoU: %.4f\n", *result.final_val_miou);
      }
      return 0;
    }
    if (ev->parsed()) {
      cmf::Dataset data = cmf::read_dataset(ev_data);
      cmf::MetricsReport rep =
          cmf::evaluate(ev_ckpt, data, ev_domain, ev_report, ev_seed);
      std::printf("%s mIoU: %s\n", ev_domain.c_str(),
                  rep.miou ? std::to_string(*rep.miou).c_str() : "NA");
      return 0;
    }
    if (ab->parsed()) {
      cmf::TrainConfig cfg = cmf::load_config(ab_config);
      const std::string data_dir = ab_data.empty() ? cfg.data_dir : ab_data;
      cmf::AblateResult result = cmf::ablate(cfg, data_dir, ab_out, ab_jobs);
      std::cout << "table: " << result.table_path << "\n"
                << "runs: " << result.runs_path << "\n";
      return 0;
    }
    if (gc->parsed()) {
      const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
      auto results = cmf::run_gradcheck(cmf::default_gradcheck_cases(), seeds,
                                        1e-4, &std::cout);
      for (const auto& r : results) {
        if (!r.pass) return 1;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
