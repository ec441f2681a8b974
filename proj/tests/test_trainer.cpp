#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "cmformer/checkpoint.hpp"
#include "cmformer/trainer.hpp"

using namespace cmf;
namespace fs = std::filesystem;

namespace {

std::string sandbox(const std::string& leaf) {
  const auto dir = fs::temp_directory_path() / "cmf_trainer" / leaf;
  fs::create_directories(dir);
  return dir.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.seed = 5;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.n_queries = 8;
  cfg.width = 16;
  cfg.n_classes = 6;
  return cfg;
}

Dataset tiny_data(std::size_t count, std::uint64_t base) {
  return generate_domain_dataset(find_preset("clear"), base, count);
}

}  // namespace

TEST_CASE("fixed seed gives byte-identical logs and checkpoints") {
  TrainConfig cfg = tiny_config();
  Dataset train_data = tiny_data(8, 0);
  Dataset val_data = tiny_data(4, 5000);

  const std::string out1 = sandbox("det1");
  const std::string out2 = sandbox("det2");
  TrainResult r1 = train(cfg, train_data, val_data, out1);
  TrainResult r2 = train(cfg, train_data, val_data, out2);
  CHECK(slurp(r1.log_path) == slurp(r2.log_path));
  CHECK(slurp(r1.checkpoint_path) == slurp(r2.checkpoint_path));
  CHECK_FALSE(slurp(r1.log_path).empty());
}

TEST_CASE("log header reads back the loss weights") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  Dataset train_data = tiny_data(4, 100);
  Dataset val_data = tiny_data(2, 6000);
  TrainResult r = train(cfg, train_data, val_data, sandbox("hdr"));
  const std::string log = slurp(r.log_path);
  CHECK(log.find("lambda_ce=5.0") != std::string::npos);
  CHECK(log.find("lambda_dice=5.0") != std::string::npos);
  CHECK(log.find("lambda_cls=2.0") != std::string::npos);
  CHECK(log.find("epoch,mean_total_loss,val_miou") != std::string::npos);
}

TEST_CASE("training reduces the loss on a small set") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 6;
  cfg.batch_size = 2;
  Dataset train_data = tiny_data(16, 200);
  Dataset val_data = tiny_data(4, 7000);
  TrainResult r = train(cfg, train_data, val_data, sandbox("smoke"));
  REQUIRE(r.epochs.size() == 6);
  CHECK(r.epochs.back().mean_loss < r.epochs.front().mean_loss);
}

TEST_CASE("evaluate reproduces the final logged val mIoU") {
  TrainConfig cfg = tiny_config();
  Dataset train_data = tiny_data(8, 300);
  Dataset val_data = tiny_data(4, 8000);
  TrainResult r = train(cfg, train_data, val_data, sandbox("eval"));
  REQUIRE(r.final_val_miou.has_value());

  const std::string report = sandbox("eval") + "/report.csv";
  MetricsReport rep =
      evaluate(r.checkpoint_path, val_data, "clear", report, cfg.seed);
  REQUIRE(rep.miou.has_value());
  CHECK(*rep.miou == doctest::Approx(*r.final_val_miou).epsilon(1e-9));

  const std::string csv = slurp(report);
  CHECK(csv.find("domain,iou_0") != std::string::npos);
  CHECK(csv.find("clear,") != std::string::npos);
}

TEST_CASE("constant-prediction model scores the dominant-class statistic") {
  Dataset val_data = tiny_data(6, 9000);
  Model zero = Model::init(model_config_from(tiny_config()), 1);
  for (auto& [_, p] : zero.named_params()) {
    for (double& v : p.data()) v = 0.0;
  }
  // all-zero parameters collapse every pixel to class 0 (tie-break)
  MetricsReport rep = evaluate_model(zero, val_data);

  std::vector<std::uint64_t> hist(6, 0);
  std::uint64_t total = 0;
  for (const Sample& s : val_data.samples) {
    for (auto v : s.labels) {
      ++hist[v];
      ++total;
    }
  }
  std::size_t present = 0;
  for (auto c : hist) present += c > 0 ? 1 : 0;
  const double expect = (static_cast<double>(hist[0]) /
                         static_cast<double>(total)) /
                        static_cast<double>(present);
  REQUIRE(rep.miou.has_value());
  CHECK(*rep.miou == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("evaluate rejects unreadable and mismatched checkpoints") {
  Dataset val_data = tiny_data(2, 9500);
  CHECK_THROWS_AS(evaluate("/nonexistent/x.cmck", val_data, "d", ""),
                  format_error);

  // class-count mismatch between checkpoint and dataset
  TrainConfig cfg = tiny_config();
  SceneConfig five;
  five.n_classes = 5;
  Dataset five_data =
      generate_domain_dataset(find_preset("clear"), 0, 2, five);
  Model m = Model::init(model_config_from(cfg), 2);
  const std::string path = sandbox("mismatch") + "/m.cmck";
  save_checkpoint(path, m);
  CHECK_THROWS_AS(evaluate(path, five_data, "d", ""), config_error);
}

TEST_CASE("tiny ablation: table shape and baseline-path identity") {
  // one seed, one epoch, four scenes: exercises the full ablation plumbing
  const std::string data_dir = sandbox("ab_data");
  SceneConfig sc;
  for (const DomainStyle& style : domain_presets()) {
    write_dataset(generate_domain_dataset(style, 1, 4, sc),
                  data_dir + "/" + style.name + "_train.cmsb");
    write_dataset(generate_domain_dataset(style, 3000001, 2, sc),
                  data_dir + "/" + style.name + "_val.cmsb");
  }
  TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.ablate_seeds = 1;
  const std::string out = sandbox("ab_out");
  AblateResult res = ablate(cfg, data_dir, out, 2);

  REQUIRE(res.runs.size() == 4);
  CHECK(res.unseen_domains ==
        std::vector<std::string>{"dusk", "fog", "noiseCam", "coolHue"});

  const std::string table = slurp(res.table_path);
  std::istringstream lines(table);
  std::string header;
  std::getline(lines, header);
  CHECK(header == "config,dusk,fog,noiseCam,coolHue,mean_unseen");
  std::size_t rows = 0;
  std::string line;
  while (std::getline(lines, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 4);

  // the {none} run must be byte-identical to a separately trained baseline
  TrainConfig none_cfg = cfg;
  none_cfg.enhance_32 = none_cfg.enhance_16 = none_cfg.enhance_8 = false;
  Dataset train_data = read_dataset(data_dir + "/clear_train.cmsb");
  Dataset val_data = read_dataset(data_dir + "/clear_val.cmsb");
  TrainResult solo = train(none_cfg, train_data, val_data, sandbox("solo"));
  const std::string ablate_ckpt =
      out + "/runs/none_s" + std::to_string(cfg.seed) + "/ckpt.cmck";
  CHECK(slurp(solo.checkpoint_path) == slurp(ablate_ckpt));
  CHECK_FALSE(slurp(solo.checkpoint_path).empty());

  // runs.csv carries one in-domain and four unseen rows per run
  const std::string runs = slurp(res.runs_path);
  CHECK(runs.find("config,seed,domain,miou,checkpoint") != std::string::npos);
  CHECK(runs.find("none," + std::to_string(cfg.seed) + ",clear") !=
        std::string::npos);
}

TEST_CASE("CMA_SEED env var reaches the trainer seed") {
  TrainConfig cfg = tiny_config();
  setenv("CMA_SEED", "77", 1);
  CHECK(resolve_seed(cfg, nullptr) == 77);
  unsetenv("CMA_SEED");
}
