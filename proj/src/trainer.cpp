#include "cmformer/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "cmformer/checkpoint.hpp"
#include "cmformer/objective.hpp"
#include "cmformer/rng.hpp"

namespace cmf {

namespace fs = std::filesystem;

ModelConfig model_config_from(const TrainConfig& cfg) {
  ModelConfig mc;
  mc.n_classes = cfg.n_classes;
  mc.n_queries = cfg.n_queries;
  mc.width = cfg.width;
  mc.attn_heads = cfg.attn_heads;
  mc.share_query_proj = cfg.share_query_proj;
  mc.decoder.enhancement[32] = cfg.enhance_32;
  mc.decoder.enhancement[16] = cfg.enhance_16;
  mc.decoder.enhancement[8] = cfg.enhance_8;
  return mc;
}

namespace {

std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// "5.0" rather than "5" for integral values; log-header readback format.
std::string fmt_weight(double v) {
  char buf[40];
  if (v == std::floor(v) && std::abs(v) < 1e6) {
    std::snprintf(buf, sizeof(buf), "%.1f", v);
  } else {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
  }
  return buf;
}

struct PreparedSample {
  Tensor image;                     // [H x W x 3], constant
  std::vector<GtSegment> segments;  // quarter resolution
};

std::vector<PreparedSample> prepare(const Dataset& ds) {
  std::vector<PreparedSample> out;
  out.reserve(ds.samples.size());
  for (const Sample& s : ds.samples) {
    PreparedSample p;
    std::vector<double> img(s.image.begin(), s.image.end());
    p.image = Tensor::from_data({ds.h, ds.w, 3}, std::move(img));
    const auto labels_q = downsample_labels(s.labels, ds.h, ds.w, 4);
    p.segments =
        segments_from_labels(labels_q, ds.h / 4, ds.w / 4, ds.n_classes);
    out.push_back(std::move(p));
  }
  return out;
}

struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::size_t t = 0;
};

void adam_step(std::vector<std::pair<std::string, Tensor>>& params,
               AdamState& st, double lr, double weight_decay) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (st.m.empty()) {
    for (auto& [_, p] : params) {
      st.m.emplace_back(p.numel(), 0.0);
      st.v.emplace_back(p.numel(), 0.0);
    }
  }
  ++st.t;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.t));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi].second;
    const bool has_grad = p.has_grad();
    auto& m = st.m[pi];
    auto& v = st.v[pi];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double g = has_grad ? p.impl->grad[i] : 0.0;
      m[i] = b1 * m[i] + (1.0 - b1) * g;
      v[i] = b2 * v[i] + (1.0 - b2) * g * g;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
      // decoupled weight decay
      p.data()[i] -= lr * (update + weight_decay * p.data()[i]);
    }
  }
}

}  // namespace

MetricsReport evaluate_model(const Model& model, const Dataset& data) {
  if (model.cfg.n_classes != data.n_classes) {
    throw config_error("evaluate: checkpoint has " +
                       std::to_string(model.cfg.n_classes) +
                       " classes, dataset has " +
                       std::to_string(data.n_classes));
  }
  NoGradGuard no_grad;
  Confusion conf(data.n_classes);
  for (const Sample& s : data.samples) {
    std::vector<double> img(s.image.begin(), s.image.end());
    Tensor image = Tensor::from_data({data.h, data.w, 3}, std::move(img));
    Model::ForwardResult fwd = model.forward(image);
    const auto pred = semantic_inference(fwd.predictions.back());
    conf.add(pred.data(), s.labels.data(), pred.size());
  }
  return miou_from_confusion(conf);
}

TrainResult train(const TrainConfig& cfg, const Dataset& train_data,
                  const Dataset& val_data, const std::string& out_dir) {
  cfg.validate();
  if (train_data.n_classes != cfg.n_classes) {
    throw config_error("train: dataset has " +
                       std::to_string(train_data.n_classes) +
                       " classes, config says " +
                       std::to_string(cfg.n_classes));
  }
  fs::create_directories(out_dir);
  TrainResult result;
  result.checkpoint_path = (fs::path(out_dir) / "ckpt.cmck").string();
  result.log_path = (fs::path(out_dir) / "log.csv").string();

  Model model = Model::init(model_config_from(cfg), cfg.seed);
  auto params = model.named_params();
  AdamState adam;

  std::vector<PreparedSample> train_set = prepare(train_data);
  const MatchWeights weights{cfg.lambda_ce, cfg.lambda_dice, cfg.lambda_cls};

  std::ofstream log(result.log_path, std::ios::binary);
  log << "# cmformer train log\n";
  log << "# lambda_ce=" << fmt_weight(cfg.lambda_ce)
      << " lambda_dice=" << fmt_weight(cfg.lambda_dice)
      << " lambda_cls=" << fmt_weight(cfg.lambda_cls) << " lr=" << fmt_g(cfg.lr)
      << " weight_decay=" << fmt_g(cfg.weight_decay) << " seed=" << cfg.seed
      << " epochs=" << cfg.epochs << " batch_size=" << cfg.batch_size
      << " enhance_32=" << (cfg.enhance_32 ? 1 : 0)
      << " enhance_16=" << (cfg.enhance_16 ? 1 : 0)
      << " enhance_8=" << (cfg.enhance_8 ? 1 : 0) << "\n";
  log << "epoch,mean_total_loss,val_miou\n";

  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x7A41Full));
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Fisher-Yates with our own uniform draw, for a portable stream
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = rand_index(shuffle_rng, i);
      std::swap(order[i - 1], order[j]);
    }
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    bool nan_hit = false;
    for (std::size_t start = 0; start < order.size();
         start += cfg.batch_size) {
      const std::size_t end =
          std::min(order.size(), start + cfg.batch_size);
      Tensor batch_loss;
      try {
        for (std::size_t bi = start; bi < end; ++bi) {
          const PreparedSample& s = train_set[order[bi]];
          Model::ForwardResult fwd = model.forward(s.image);
          TotalLoss tl = total_loss(fwd.predictions, s.segments, weights,
                                    cfg.no_object_weight, cfg.dice_eps);
          batch_loss = batch_loss.defined() ? add(batch_loss, tl.tensor)
                                            : tl.tensor;
        }
        batch_loss =
            mul_scalar(batch_loss, 1.0 / static_cast<double>(end - start));
        if (!std::isfinite(batch_loss.value())) {
          nan_hit = true;
        } else {
          for (auto& [_, p] : params) p.zero_grad();
          Tape::active().backward(batch_loss);
          adam_step(params, adam, cfg.lr, cfg.weight_decay);
          epoch_loss += batch_loss.value();
          ++steps;
        }
      } catch (const tensor_error&) {
        nan_hit = true;
      }
      if (nan_hit) break;
    }
    if (nan_hit) {
      // abort; the previous epoch's checkpoint stays on disk
      Tape::active().clear();
      result.aborted_on_nan = true;
      log << "# aborted: non-finite loss in epoch " << epoch << "\n";
      break;
    }

    save_checkpoint(result.checkpoint_path, model);
    // validate through the saved checkpoint so the log matches `evaluate`
    Model eval_model = load_checkpoint(result.checkpoint_path);
    MetricsReport val = evaluate_model(eval_model, val_data);

    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = steps ? epoch_loss / static_cast<double>(steps) : 0.0;
    stats.val_miou = val.miou;
    result.epochs.push_back(stats);
    result.final_val_miou = val.miou;
    log << epoch << "," << fmt_g(stats.mean_loss) << ","
        << (val.miou ? fmt_g(*val.miou) : "NA") << "\n";
    log.flush();
  }
  log.close();
  return result;
}

MetricsReport evaluate(const std::string& ckpt_path, const Dataset& data,
                       const std::string& domain_name,
                       const std::string& report_path, std::uint64_t seed) {
  Model model = load_checkpoint(ckpt_path);
  MetricsReport report = evaluate_model(model, data);
  report.domain = domain_name;
  report.checkpoint = fs::path(ckpt_path).filename().string();

  if (!report_path.empty()) {
    const bool fresh = !fs::exists(report_path) ||
                       fs::file_size(report_path) == 0;
    std::ofstream out(report_path, std::ios::binary | std::ios::app);
    if (fresh) {
      out << "domain";
      for (std::size_t c = 0; c < data.n_classes; ++c) out << ",iou_" << c;
      out << ",miou,checkpoint,seed\n";
    }
    out << report.domain;
    for (const auto& iou : report.per_class_iou) {
      out << "," << (iou ? fmt_g(*iou) : "NA");
    }
    out << "," << (report.miou ? fmt_g(*report.miou) : "NA") << ","
        << report.checkpoint << "," << seed << "\n";
  }
  return report;
}

namespace {

struct AblateJob {
  std::size_t config_idx = 0;
  std::string config_name;
  TrainConfig cfg;
  std::uint64_t seed = 0;
};

}  // namespace

AblateResult ablate(const TrainConfig& base, const std::string& data_dir,
                    const std::string& out_dir, std::size_t jobs) {
  AblateResult result;
  result.config_names = {"none", "x32", "x32_16", "x32_16_8"};
  const bool enh[4][3] = {{false, false, false},
                          {true, false, false},
                          {true, true, false},
                          {true, true, true}};

  const std::string source = base.source_domain;
  for (const DomainStyle& s : domain_presets()) {
    if (s.name != source) result.unseen_domains.push_back(s.name);
  }

  const auto train_path =
      (fs::path(data_dir) / (source + "_train.cmsb")).string();
  const auto val_path = (fs::path(data_dir) / (source + "_val.cmsb")).string();
  const Dataset train_data = read_dataset(train_path);
  const Dataset val_data = read_dataset(val_path);
  std::vector<Dataset> unseen_data;
  for (const std::string& d : result.unseen_domains) {
    unseen_data.push_back(
        read_dataset((fs::path(data_dir) / (d + "_val.cmsb")).string()));
  }

  std::vector<AblateJob> job_list;
  for (std::size_t ci = 0; ci < result.config_names.size(); ++ci) {
    for (std::size_t si = 0; si < base.ablate_seeds; ++si) {
      AblateJob job;
      job.config_idx = ci;
      job.config_name = result.config_names[ci];
      job.cfg = base;
      job.cfg.enhance_32 = enh[ci][0];
      job.cfg.enhance_16 = enh[ci][1];
      job.cfg.enhance_8 = enh[ci][2];
      job.cfg.seed = base.seed + si;
      job.seed = job.cfg.seed;
      job_list.push_back(std::move(job));
    }
  }

  fs::create_directories(out_dir);
  std::vector<AblateRun> runs(job_list.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    while (true) {
      const std::size_t idx = next.fetch_add(1);
      if (idx >= job_list.size()) return;
      const AblateJob& job = job_list[idx];
      const std::string run_dir =
          (fs::path(out_dir) / "runs" /
           (job.config_name + "_s" + std::to_string(job.seed)))
              .string();
      TrainResult tr = train(job.cfg, train_data, val_data, run_dir);
      AblateRun run;
      run.config_name = job.config_name;
      run.seed = job.seed;
      run.in_domain_miou = tr.final_val_miou;
      run.checkpoint_path = tr.checkpoint_path;
      Model model = load_checkpoint(tr.checkpoint_path);
      for (std::size_t di = 0; di < unseen_data.size(); ++di) {
        MetricsReport rep = evaluate_model(model, unseen_data[di]);
        run.unseen_miou.emplace_back(result.unseen_domains[di],
                                     rep.miou.value_or(0.0));
      }
      runs[idx] = std::move(run);
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < jobs; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  result.runs = runs;

  result.runs_path = (fs::path(out_dir) / "runs.csv").string();
  {
    std::ofstream out(result.runs_path, std::ios::binary);
    out << "config,seed,domain,miou,checkpoint\n";
    for (const AblateRun& run : runs) {
      out << run.config_name << "," << run.seed << "," << source << ","
          << (run.in_domain_miou ? fmt_g(*run.in_domain_miou) : "NA") << ","
          << run.checkpoint_path << "\n";
      for (const auto& [domain, miou] : run.unseen_miou) {
        out << run.config_name << "," << run.seed << "," << domain << ","
            << fmt_g(miou) << "," << run.checkpoint_path << "\n";
      }
    }
  }

  result.table_path = (fs::path(out_dir) / "table.csv").string();
  {
    std::ofstream out(result.table_path, std::ios::binary);
    out << "config";
    for (const std::string& d : result.unseen_domains) out << "," << d;
    out << ",mean_unseen\n";
    for (std::size_t ci = 0; ci < result.config_names.size(); ++ci) {
      out << result.config_names[ci];
      std::vector<double> per_seed_means;
      for (std::size_t di = 0; di < result.unseen_domains.size(); ++di) {
        std::vector<double> vals;
        for (const AblateRun& run : runs) {
          if (run.config_name == result.config_names[ci]) {
            vals.push_back(run.unseen_miou[di].second);
          }
        }
        double m = 0.0;
        for (double v : vals) m += v;
        m /= static_cast<double>(vals.size());
        double sd = 0.0;
        for (double v : vals) sd += (v - m) * (v - m);
        sd = vals.size() > 1
                 ? std::sqrt(sd / static_cast<double>(vals.size() - 1))
                 : 0.0;
        char buf[80];
        std::snprintf(buf, sizeof(buf), ",%.4f\xC2\xB1%.4f", m, sd);
        out << buf;
      }
      for (const AblateRun& run : runs) {
        if (run.config_name != result.config_names[ci]) continue;
        double m = 0.0;
        for (const auto& [_, v] : run.unseen_miou) m += v;
        per_seed_means.push_back(m /
                                 static_cast<double>(run.unseen_miou.size()));
      }
      double m = 0.0;
      for (double v : per_seed_means) m += v;
      m /= static_cast<double>(per_seed_means.size());
      double sd = 0.0;
      for (double v : per_seed_means) sd += (v - m) * (v - m);
      sd = per_seed_means.size() > 1
               ? std::sqrt(sd / static_cast<double>(per_seed_means.size() - 1))
               : 0.0;
      char buf[80];
      std::snprintf(buf, sizeof(buf), ",%.4f\xC2\xB1%.4f\n", m, sd);
      out << buf;
    }
  }
  return result;
}

}  // namespace cmf
