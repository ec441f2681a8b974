#include "cmformer/segmodel.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cmformer/rng.hpp"

namespace cmf {

void DecoderConfig::validate() const {
  if (resolution_schedule.size() != n_layers) {
    throw config_error("decoder: schedule length " +
                       std::to_string(resolution_schedule.size()) +
                       " != n_layers " + std::to_string(n_layers));
  }
  for (int s : resolution_schedule) {
    if (s != 32 && s != 16 && s != 8) {
      throw config_error("decoder: schedule stride x" + std::to_string(s) +
                         " not in {32, 16, 8}");
    }
  }
  const std::set<int> keys{32, 16, 8};
  std::set<int> have;
  for (const auto& [k, _] : enhancement) have.insert(k);
  if (have != keys) {
    throw config_error("decoder: enhancement keys must be exactly {32,16,8}");
  }
}

bool DecoderConfig::any_enhanced() const {
  for (const auto& [_, on] : enhancement)
    if (on) return true;
  return false;
}

void ModelConfig::validate() const {
  if (width < 4 || width % 2 != 0) {
    throw config_error("model: width must be even and >= 4");
  }
  if (attn_heads != 1) {
    throw config_error(
        "model: attn_heads=" + std::to_string(attn_heads) +
        " unsupported; this build implements a single attention head");
  }
  if (n_classes < 4) {
    throw config_error("model: need at least 4 classes (3 bands + 1 object)");
  }
  decoder.validate();
}

namespace {

Tensor init_affine_weight(std::size_t fan_in, std::size_t fan_out,
                          std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor w = Tensor::zeros({fan_in, fan_out}, true);
  for (double& v : w.data()) v = rand_uniform(rng, -bound, bound);
  return w;
}

Tensor init_zero_vec(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor init_ones_vec(std::size_t n) { return Tensor::full({n}, 1.0, true); }

AttentionParams init_attention(std::size_t d, std::mt19937_64& rng) {
  AttentionParams p;
  p.w_q = init_affine_weight(d, d, rng);
  p.b_q = init_zero_vec(d);
  p.w_k = init_affine_weight(d, d, rng);
  p.b_k = init_zero_vec(d);
  p.w_v = init_affine_weight(d, d, rng);
  p.b_v = init_zero_vec(d);
  return p;
}

BranchParams init_branch(std::size_t d, std::mt19937_64& rng) {
  BranchParams b;
  b.mask_attn = init_attention(d, rng);
  b.self_attn = init_attention(d, rng);
  b.norm_mask = {init_ones_vec(d), init_zero_vec(d)};
  b.norm_self = {init_ones_vec(d), init_zero_vec(d)};
  return b;
}

void register_attention(std::vector<std::pair<std::string, Tensor>>& out,
                        const std::string& prefix, const AttentionParams& p,
                        bool skip_query) {
  if (!skip_query) {
    out.emplace_back(prefix + ".wq", p.w_q);
    out.emplace_back(prefix + ".bq", p.b_q);
  }
  out.emplace_back(prefix + ".wk", p.w_k);
  out.emplace_back(prefix + ".bk", p.b_k);
  out.emplace_back(prefix + ".wv", p.w_v);
  out.emplace_back(prefix + ".bv", p.b_v);
}

void register_branch(std::vector<std::pair<std::string, Tensor>>& out,
                     const std::string& prefix, const BranchParams& b,
                     bool skip_mask_query) {
  register_attention(out, prefix + ".mask", b.mask_attn, skip_mask_query);
  register_attention(out, prefix + ".self", b.self_attn, false);
  out.emplace_back(prefix + ".nm.g", b.norm_mask.gain);
  out.emplace_back(prefix + ".nm.b", b.norm_mask.bias);
  out.emplace_back(prefix + ".ns.g", b.norm_self.gain);
  out.emplace_back(prefix + ".ns.b", b.norm_self.bias);
}

}  // namespace

Model Model::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  const std::size_t d = cfg.width;
  std::mt19937_64 rng(mix_seed(seed, 0xC3A0'515Eull));

  // encoder: stem 3->d, then four d->d stride-2 blocks
  std::size_t c_in = 3;
  for (int i = 0; i < 5; ++i) {
    ConvBlockParams cb;
    cb.w = init_affine_weight(9 * c_in, d, rng);
    cb.b = init_zero_vec(d);
    cb.ln_gain = init_ones_vec(d);
    cb.ln_bias = init_zero_vec(d);
    m.pixel.stages.push_back(cb);
    c_in = d;
  }
  for (int i = 0; i < 4; ++i) {
    m.pixel.proj_w[i] = init_affine_weight(d, d, rng);
    m.pixel.proj_b[i] = init_zero_vec(d);
  }
  m.pixel.out_w = init_affine_weight(d, d, rng);
  m.pixel.out_b = init_zero_vec(d);

  m.queries.x0 = Tensor::zeros({cfg.n_queries, d}, true);
  for (double& v : m.queries.x0.data()) v = rand_normal(rng);
  m.queries.q_pos = Tensor::zeros({cfg.n_queries, d}, true);
  for (double& v : m.queries.q_pos.data()) v = rand_normal(rng);

  for (std::size_t l = 0; l < cfg.decoder.n_layers; ++l) {
    CmaLayerParams lp;
    lp.hi = init_branch(d, rng);
    const int res = cfg.decoder.resolution_schedule[l];
    lp.enhanced = cfg.decoder.enhancement.at(res);
    if (lp.enhanced) {
      lp.lo = init_branch(d, rng);
      if (cfg.share_query_proj) {
        lp.lo.mask_attn.w_q = lp.hi.mask_attn.w_q;
        lp.lo.mask_attn.b_q = lp.hi.mask_attn.b_q;
      }
      lp.fuse_w = init_affine_weight(2 * d, d, rng);
      lp.fuse_b = init_zero_vec(d);
    }
    lp.ffn.w1 = init_affine_weight(d, 4 * d, rng);
    lp.ffn.b1 = init_zero_vec(4 * d);
    lp.ffn.w2 = init_affine_weight(4 * d, d, rng);
    lp.ffn.b2 = init_zero_vec(d);
    lp.norm_ffn = {init_ones_vec(d), init_zero_vec(d)};
    m.layers.push_back(lp);
  }

  m.heads.cls_w = init_affine_weight(d, cfg.n_classes + 1, rng);
  m.heads.cls_b = init_zero_vec(cfg.n_classes + 1);
  m.heads.m1_w = init_affine_weight(d, d, rng);
  m.heads.m1_b = init_zero_vec(d);
  m.heads.m2_w = init_affine_weight(d, d, rng);
  m.heads.m2_b = init_zero_vec(d);
  m.heads.m3_w = init_affine_weight(d, d, rng);
  m.heads.m3_b = init_zero_vec(d);
  return m;
}

std::vector<std::pair<std::string, Tensor>> Model::named_params() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < pixel.stages.size(); ++i) {
    const std::string p = "enc.stage" + std::to_string(i);
    out.emplace_back(p + ".w", pixel.stages[i].w);
    out.emplace_back(p + ".b", pixel.stages[i].b);
    out.emplace_back(p + ".ln.g", pixel.stages[i].ln_gain);
    out.emplace_back(p + ".ln.b", pixel.stages[i].ln_bias);
  }
  for (int i = 0; i < 4; ++i) {
    const std::string p = "dec.proj" + std::to_string(i);
    out.emplace_back(p + ".w", pixel.proj_w[i]);
    out.emplace_back(p + ".b", pixel.proj_b[i]);
  }
  out.emplace_back("dec.out.w", pixel.out_w);
  out.emplace_back("dec.out.b", pixel.out_b);
  out.emplace_back("query.x0", queries.x0);
  out.emplace_back("query.pos", queries.q_pos);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string p = "layer" + std::to_string(l);
    register_branch(out, p + ".hi", layers[l].hi, false);
    if (layers[l].enhanced) {
      register_branch(out, p + ".lo", layers[l].lo, cfg.share_query_proj);
      out.emplace_back(p + ".fuse.w", layers[l].fuse_w);
      out.emplace_back(p + ".fuse.b", layers[l].fuse_b);
    }
    out.emplace_back(p + ".ffn.w1", layers[l].ffn.w1);
    out.emplace_back(p + ".ffn.b1", layers[l].ffn.b1);
    out.emplace_back(p + ".ffn.w2", layers[l].ffn.w2);
    out.emplace_back(p + ".ffn.b2", layers[l].ffn.b2);
    out.emplace_back(p + ".nf.g", layers[l].norm_ffn.gain);
    out.emplace_back(p + ".nf.b", layers[l].norm_ffn.bias);
  }
  out.emplace_back("head.cls.w", heads.cls_w);
  out.emplace_back("head.cls.b", heads.cls_b);
  out.emplace_back("head.m1.w", heads.m1_w);
  out.emplace_back("head.m1.b", heads.m1_b);
  out.emplace_back("head.m2.w", heads.m2_w);
  out.emplace_back("head.m2.b", heads.m2_b);
  out.emplace_back("head.m3.w", heads.m3_w);
  out.emplace_back("head.m3.b", heads.m3_b);
  return out;
}

std::size_t Model::param_count() {
  std::size_t n = 0;
  for (auto& [_, t] : named_params()) n += t.numel();
  return n;
}

LayerPrediction predict_heads(const Tensor& x, const Tensor& mask_features,
                              const HeadParams& p) {
  if (x.rank() != 2 || mask_features.rank() != 3 ||
      x.dim(1) != mask_features.dim(2)) {
    throw shape_error("predict_heads: x=" + shape_str(x.shape()) +
                      " mask_features=" + shape_str(mask_features.shape()));
  }
  const std::size_t n = x.dim(0);
  const std::size_t mh = mask_features.dim(0), mw = mask_features.dim(1);
  const std::size_t d = mask_features.dim(2);
  LayerPrediction pred;
  pred.class_logits = affine(x, p.cls_w, p.cls_b);
  Tensor embed = affine(
      relu(affine(relu(affine(x, p.m1_w, p.m1_b)), p.m2_w, p.m2_b)), p.m3_w,
      p.m3_b);
  Tensor mf_flat = reshape(mask_features, {mh * mw, d});
  pred.mask_logits = reshape(matmul(embed, transpose(mf_flat)), {n, mh, mw});
  return pred;
}

std::tuple<Tensor, Tensor, LayerPrediction> Model::init_queries(
    const Tensor& mask_features) const {
  LayerPrediction pred0 = predict_heads(queries.x0, mask_features, heads);
  return {queries.x0, queries.x0, pred0};
}

Model::ForwardResult Model::forward(const Tensor& image) const {
  ForwardResult r;
  r.pyramid = encode(image, pixel);
  r.mask_features = pixel_decode(r.pyramid, pixel);

  auto [x, x_d, pred0] = init_queries(r.mask_features);
  r.predictions.push_back(pred0);

  std::map<int, Tensor> k_pos_hi, k_pos_lo;
  for (int s : {32, 16, 8}) {
    const std::size_t h = r.pyramid.input_h / static_cast<std::size_t>(s);
    const std::size_t w = r.pyramid.input_w / static_cast<std::size_t>(s);
    k_pos_hi[s] = sinusoidal_position_encoding(h, w, cfg.width);
    if (cfg.decoder.enhancement.at(s) && h % 2 == 0 && w % 2 == 0) {
      k_pos_lo[s] = sinusoidal_position_encoding(h / 2, w / 2, cfg.width);
    }
  }

  for (std::size_t l = 0; l < layers.size(); ++l) {
    const int res = cfg.decoder.resolution_schedule[l];
    const Tensor* lo_pos =
        k_pos_lo.count(res) ? &k_pos_lo.at(res) : nullptr;
    CmaLayerOutput out =
        cma_layer(x, x_d, r.pyramid.level(res),
                  r.predictions.back().mask_logits, layers[l],
                  &queries.q_pos, &k_pos_hi.at(res), lo_pos);
    x = out.x_final;
    x_d = out.x_lo_next;
    r.predictions.push_back(predict_heads(x, r.mask_features, heads));
  }
  return r;
}

std::vector<std::uint8_t> semantic_inference(const LayerPrediction& pred,
                                             std::size_t upscale) {
  const std::size_t n = pred.class_logits.dim(0);
  const std::size_t kp1 = pred.class_logits.dim(1);
  const std::size_t k = kp1 - 1;
  const std::size_t h = pred.mask_logits.dim(1);
  const std::size_t w = pred.mask_logits.dim(2);

  // softmax over classes per query, no-object column dropped afterwards
  std::vector<double> probs(n * kp1);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = pred.class_logits.data().data() + i * kp1;
    double mx = row[0];
    for (std::size_t c = 1; c < kp1; ++c) mx = std::max(mx, row[c]);
    double s = 0.0;
    for (std::size_t c = 0; c < kp1; ++c) {
      probs[i * kp1 + c] = std::exp(row[c] - mx);
      s += probs[i * kp1 + c];
    }
    for (std::size_t c = 0; c < kp1; ++c) probs[i * kp1 + c] /= s;
  }

  std::vector<std::uint8_t> quarter(h * w, 0);
  const double* masks = pred.mask_logits.data().data();
  std::vector<double> scores(k);
  for (std::size_t pix = 0; pix < h * w; ++pix) {
    std::fill(scores.begin(), scores.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double m = masks[i * h * w + pix];
      const double sig = m >= 0.0 ? 1.0 / (1.0 + std::exp(-m))
                                  : std::exp(m) / (1.0 + std::exp(m));
      for (std::size_t c = 0; c < k; ++c)
        scores[c] += probs[i * kp1 + c] * sig;
    }
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (scores[c] > scores[best]) best = c;  // ties keep the lowest index
    quarter[pix] = static_cast<std::uint8_t>(best);
  }

  if (upscale == 1) return quarter;
  std::vector<std::uint8_t> full(h * upscale * w * upscale);
  for (std::size_t y = 0; y < h * upscale; ++y)
    for (std::size_t x = 0; x < w * upscale; ++x)
      full[y * w * upscale + x] = quarter[(y / upscale) * w + x / upscale];
  return full;
}

}  // namespace cmf
