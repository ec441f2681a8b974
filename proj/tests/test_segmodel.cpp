#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cmformer/checkpoint.hpp"
#include "cmformer/rng.hpp"
#include "cmformer/segmodel.hpp"

#include "oracles.hpp"

using namespace cmf;

namespace {

ModelConfig small_cfg(bool enhanced = true) {
  ModelConfig cfg;
  cfg.n_classes = 6;
  cfg.n_queries = 8;
  cfg.width = 8;
  cfg.decoder.enhancement[32] = enhanced;
  cfg.decoder.enhancement[16] = enhanced;
  cfg.decoder.enhancement[8] = enhanced;
  return cfg;
}

Tensor random_image(std::size_t hw, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor img = Tensor::zeros({hw, hw, 3});
  for (double& v : img.data()) v = rand_uniform(rng);
  return img;
}

}  // namespace

TEST_CASE("init_queries determinism and shapes") {
  Model m1 = Model::init(small_cfg(), 11);
  Model m2 = Model::init(small_cfg(), 11);
  CHECK(m1.queries.x0.data() == m2.queries.x0.data());

  Tensor img = random_image(64, 3);
  NoGradGuard no_grad;
  FeaturePyramid pyr = encode(img, m1.pixel);
  Tensor mf = pixel_decode(pyr, m1.pixel);
  auto [x0, x0_d, pred0] = m1.init_queries(mf);
  CHECK(pred0.mask_logits.shape() == Shape{8, 16, 16});
  CHECK(x0.data() == x0_d.data());
}

TEST_CASE("predict_heads matches the dot-product oracle") {
  Model m = Model::init(small_cfg(), 5);
  std::mt19937_64 rng(7);
  Tensor x = Tensor::zeros({8, 8});
  for (double& v : x.data()) v = rand_normal(rng);
  Tensor mf = Tensor::zeros({4, 4, 8});
  for (double& v : mf.data()) v = rand_normal(rng);
  NoGradGuard no_grad;
  LayerPrediction pred = predict_heads(x, mf, m.heads);
  CHECK(pred.class_logits.shape() == Shape{8, 7});
  CHECK(pred.mask_logits.shape() == Shape{8, 4, 4});

  // explicit-loop mlp + dot product
  const std::size_t d = 8;
  auto aff = [&](const oracle::Mat& in, const Tensor& w, const Tensor& b,
                 bool relu_after) {
    auto out = oracle::affine(in, oracle::from_flat(w.data(), d, d), b.data());
    if (relu_after)
      for (auto& row : out)
        for (double& v : row) v = std::max(0.0, v);
    return out;
  };
  auto e = aff(oracle::from_flat(x.data(), 8, d), m.heads.m1_w, m.heads.m1_b,
               true);
  e = aff(e, m.heads.m2_w, m.heads.m2_b, true);
  e = aff(e, m.heads.m3_w, m.heads.m3_b, false);
  for (std::size_t q = 0; q < 8; ++q) {
    for (std::size_t pix = 0; pix < 16; ++pix) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c)
        dot += e[q][c] * mf.data()[pix * d + c];
      CHECK(pred.mask_logits.data()[q * 16 + pix] ==
            doctest::Approx(dot).epsilon(1e-10));
    }
  }
}

TEST_CASE("mask embedding orthogonal to features gives zero logits") {
  Model m = Model::init(small_cfg(), 5);
  // force the embedding to a fixed unit vector along channel 0
  m.heads.m3_w = Tensor::zeros({8, 8});
  m.heads.m3_b = Tensor::zeros({8});
  m.heads.m3_b.data()[0] = 1.0;
  // mask features live entirely outside channel 0
  Tensor mf = Tensor::zeros({2, 2, 8});
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t c = 1; c < 8; ++c) mf.data()[p * 8 + c] = 0.5 * (c + p);
  Tensor x = Tensor::full({3, 8}, 0.7);
  NoGradGuard no_grad;
  LayerPrediction pred = predict_heads(x, mf, m.heads);
  for (double v : pred.mask_logits.data()) CHECK(v == 0.0);
}

TEST_CASE("share_query_proj ties the low-branch query projection") {
  ModelConfig cfg = small_cfg();
  cfg.share_query_proj = true;
  Model m = Model::init(cfg, 9);
  REQUIRE(m.layers[0].enhanced);
  CHECK(m.layers[0].lo.mask_attn.w_q.impl == m.layers[0].hi.mask_attn.w_q.impl);
  CHECK(m.layers[0].lo.mask_attn.b_q.impl == m.layers[0].hi.mask_attn.b_q.impl);

  // the shared tensor is registered once
  std::size_t wq_count = 0;
  for (auto& [name, t] : m.named_params()) {
    if (t.impl == m.layers[0].hi.mask_attn.w_q.impl) ++wq_count;
  }
  CHECK(wq_count == 1);

  // forward still works and gradients reach the shared projection
  Tensor img = random_image(64, 3);
  Model::ForwardResult fwd = m.forward(img);
  Tensor loss = mean(fwd.predictions.back().class_logits);
  Tape::active().backward(loss);
  CHECK(m.layers[0].hi.mask_attn.w_q.has_grad());
}

TEST_CASE("predict_heads constant mask features give constant logits") {
  Model m = Model::init(small_cfg(), 5);
  Tensor x = Tensor::zeros({1, 8});
  for (std::size_t i = 0; i < 8; ++i) x.data()[i] = 0.3 * (1.0 + i);
  Tensor mf = Tensor::full({4, 4, 8}, 0.25);
  NoGradGuard no_grad;
  LayerPrediction pred = predict_heads(x, mf, m.heads);
  const double first = pred.mask_logits.data()[0];
  for (double v : pred.mask_logits.data())
    CHECK(v == doctest::Approx(first).epsilon(1e-12));
}

TEST_CASE("decoder_forward returns initial plus nine predictions") {
  Model m = Model::init(small_cfg(), 21);
  NoGradGuard no_grad;
  Model::ForwardResult fwd = m.forward(random_image(64, 9));
  CHECK(fwd.predictions.size() == 10);
  // schedule round-robins x32, x16, x8; layer index 3 is x32 again
  CHECK(m.cfg.decoder.resolution_schedule[3] == 32);
  for (const LayerPrediction& p : fwd.predictions) {
    for (double v : p.class_logits.data()) CHECK(std::isfinite(v));
    for (double v : p.mask_logits.data()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("forward is finite from random init across seeds") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    Model m = Model::init(small_cfg(), seed);
    NoGradGuard no_grad;
    Model::ForwardResult fwd = m.forward(random_image(64, seed + 100));
    for (double v : fwd.predictions.back().class_logits.data())
      CHECK(std::isfinite(v));
  }
}

TEST_CASE("enhancement all-false equals an identity-fused enhanced model") {
  Model enhanced = Model::init(small_cfg(true), 31);
  Model baseline = Model::init(small_cfg(false), 31);
  // share every non-enhancement parameter, then neutralize the fusion
  for (std::size_t l = 0; l < enhanced.layers.size(); ++l) {
    baseline.layers[l].hi = enhanced.layers[l].hi;
    baseline.layers[l].ffn = enhanced.layers[l].ffn;
    baseline.layers[l].norm_ffn = enhanced.layers[l].norm_ffn;
    const std::size_t d = enhanced.cfg.width;
    enhanced.layers[l].fuse_w = Tensor::zeros({2 * d, d});
    for (std::size_t i = 0; i < d; ++i)
      enhanced.layers[l].fuse_w.data()[i * d + i] = 1.0;
    enhanced.layers[l].fuse_b = Tensor::zeros({d});
  }
  baseline.pixel = enhanced.pixel;
  baseline.queries = enhanced.queries;
  baseline.heads = enhanced.heads;

  Tensor img = random_image(64, 77);
  NoGradGuard no_grad;
  Model::ForwardResult a = enhanced.forward(img);
  Model::ForwardResult b = baseline.forward(img);
  REQUIRE(a.predictions.size() == b.predictions.size());
  for (std::size_t i = 0; i < a.predictions.size(); ++i) {
    const auto& pa = a.predictions[i];
    const auto& pb = b.predictions[i];
    for (std::size_t j = 0; j < pa.class_logits.numel(); ++j)
      CHECK(std::abs(pa.class_logits.data()[j] -
                     pb.class_logits.data()[j]) <= 1e-12);
    for (std::size_t j = 0; j < pa.mask_logits.numel(); ++j)
      CHECK(std::abs(pa.mask_logits.data()[j] -
                     pb.mask_logits.data()[j]) <= 1e-12);
  }
}

TEST_CASE("enhanced model grows parameters only in low branch and fusion") {
  Model enhanced = Model::init(small_cfg(true), 1);
  Model baseline = Model::init(small_cfg(false), 1);
  const std::size_t d = 8;
  // per enhanced layer: one extra branch (6 matrices d*d + 6 biases + 2
  // norms of 2d) and the fusion (2d*d + d)
  const std::size_t branch = 3 * (d * d + d) * 2 + 4 * d;
  const std::size_t fusion = 2 * d * d + d;
  CHECK(enhanced.param_count() ==
        baseline.param_count() + 9 * (branch + fusion));
}

TEST_CASE("semantic inference closed cases") {
  // one query, certain class 2, all-positive mask: whole map labeled 2
  LayerPrediction pred;
  pred.class_logits = Tensor::from_data({1, 4}, {-9, -9, 9, -9});
  pred.mask_logits = Tensor::full({1, 2, 2}, 5.0);
  const auto map = semantic_inference(pred, 2);
  CHECK(map.size() == 16);
  for (auto v : map) CHECK(v == 2);

  // two queries with disjoint positive masks and distinct classes
  LayerPrediction two;
  two.class_logits = Tensor::from_data({2, 4}, {9, -9, -9, -9,  // class 0
                                                -9, 9, -9, -9});  // class 1
  two.mask_logits = Tensor::from_data({2, 1, 2}, {8, -8, -8, 8});
  const auto map2 = semantic_inference(two, 1);
  CHECK(map2[0] == 0);
  CHECK(map2[1] == 1);

  // all queries favor no-object: the argmax still lands on a real class
  LayerPrediction noobj;
  noobj.class_logits = Tensor::from_data({1, 4}, {0, 0, 0, 9});
  noobj.mask_logits = Tensor::full({1, 1, 1}, 1.0);
  const auto map3 = semantic_inference(noobj, 1);
  CHECK(map3[0] == 0);  // uniform real-class scores, lowest index wins
}

TEST_CASE("query swap leaves semantic inference unchanged") {
  Model m = Model::init(small_cfg(), 41);
  Tensor img = random_image(64, 5);
  NoGradGuard no_grad;
  const auto before = semantic_inference(m.forward(img).predictions.back());

  // swap queries 2 and 5 (embedding and positional rows)
  for (std::size_t c = 0; c < m.cfg.width; ++c) {
    std::swap(m.queries.x0.data()[2 * m.cfg.width + c],
              m.queries.x0.data()[5 * m.cfg.width + c]);
    std::swap(m.queries.q_pos.data()[2 * m.cfg.width + c],
              m.queries.q_pos.data()[5 * m.cfg.width + c]);
  }
  const auto after = semantic_inference(m.forward(img).predictions.back());
  CHECK(before == after);
}

TEST_CASE("checkpoint round trip is bitwise identity") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "cmck_test").string();
  fs::create_directories(dir);
  const std::string path = dir + "/model.cmck";
  Model m = Model::init(small_cfg(), 51);
  save_checkpoint(path, m);
  Model loaded = load_checkpoint(path);
  const std::string path2 = dir + "/model2.cmck";
  save_checkpoint(path2, loaded);

  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)),
                 std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)),
                 std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(loaded.cfg.n_queries == m.cfg.n_queries);
  CHECK(loaded.cfg.decoder.enhancement == m.cfg.decoder.enhancement);
}

TEST_CASE("checkpoint corruption yields typed errors") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "cmck_test").string();
  fs::create_directories(dir);
  const std::string path = dir + "/bad.cmck";

  {
    std::ofstream out(path, std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_AS(load_checkpoint(path), bad_magic_error);

  {
    std::ofstream out(path, std::ios::binary);
    out << "CMCK";
    const std::uint32_t version = 9;
    out.write(reinterpret_cast<const char*>(&version), 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), bad_version_error);

  // valid header, truncated body
  Model m = Model::init(small_cfg(), 3);
  const std::string good = dir + "/good.cmck";
  save_checkpoint(good, m);
  std::ifstream in(good, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  std::ofstream out(path, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  out.close();
  CHECK_THROWS_AS(load_checkpoint(path), truncated_file_error);
}
