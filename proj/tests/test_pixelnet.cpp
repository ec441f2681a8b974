#include <doctest.h>

#include "cmformer/pixelnet.hpp"
#include "cmformer/rng.hpp"
#include "cmformer/segmodel.hpp"

using namespace cmf;

namespace {

Model tiny_model(std::uint64_t seed) {
  ModelConfig cfg;
  cfg.n_classes = 6;
  cfg.n_queries = 8;
  cfg.width = 8;
  return Model::init(cfg, seed);
}

}  // namespace

TEST_CASE("encode produces the full stride pyramid") {
  Model m = tiny_model(1);
  Tensor img = Tensor::zeros({64, 64, 3});
  FeaturePyramid pyr = encode(img, m.pixel);
  CHECK(pyr.level(4).shape() == Shape{16, 16, 8});
  CHECK(pyr.level(8).shape() == Shape{8, 8, 8});
  CHECK(pyr.level(16).shape() == Shape{4, 4, 8});
  CHECK(pyr.level(32).shape() == Shape{2, 2, 8});
}

TEST_CASE("encode zero image gives finite deterministic features") {
  Model m = tiny_model(2);
  Tensor img = Tensor::zeros({32, 32, 3});
  FeaturePyramid a = encode(img, m.pixel);
  FeaturePyramid b = encode(img, m.pixel);
  for (int s : {4, 8, 16, 32}) {
    for (double v : a.level(s).data()) CHECK(std::isfinite(v));
    CHECK(a.level(s).data() == b.level(s).data());
  }
}

TEST_CASE("same seed gives a bitwise-identical pyramid") {
  Model m1 = tiny_model(7);
  Model m2 = tiny_model(7);
  std::mt19937_64 rng(3);
  Tensor img = Tensor::zeros({32, 32, 3});
  for (double& v : img.data()) v = rand_uniform(rng);
  FeaturePyramid a = encode(img, m1.pixel);
  FeaturePyramid b = encode(img, m2.pixel);
  for (int s : {4, 8, 16, 32}) CHECK(a.level(s).data() == b.level(s).data());
}

TEST_CASE("encode rejects non-multiple-of-32 inputs") {
  Model m = tiny_model(1);
  Tensor img = Tensor::zeros({48, 64, 3});
  CHECK_THROWS_WITH_AS(encode(img, m.pixel),
                       doctest::Contains("multiple-of-32"), shape_error);
}

TEST_CASE("pixel_decode shapes and zero propagation") {
  Model m = tiny_model(3);
  // zero levels and zero biases: output must be exactly zero
  PixelNetParams p = m.pixel;
  for (int i = 0; i < 4; ++i)
    p.proj_b[i] = Tensor::zeros({8});
  p.out_b = Tensor::zeros({8});
  FeaturePyramid pyr;
  pyr.input_h = 64;
  pyr.input_w = 64;
  pyr.levels[4] = Tensor::zeros({16, 16, 8});
  pyr.levels[8] = Tensor::zeros({8, 8, 8});
  pyr.levels[16] = Tensor::zeros({4, 4, 8});
  pyr.levels[32] = Tensor::zeros({2, 2, 8});
  Tensor out = pixel_decode(pyr, p);
  CHECK(out.shape() == Shape{16, 16, 8});
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("perturbing the x32 level changes the decoded output") {
  Model m = tiny_model(4);
  std::mt19937_64 rng(5);
  Tensor img = Tensor::zeros({32, 32, 3});
  for (double& v : img.data()) v = rand_uniform(rng);
  FeaturePyramid pyr = encode(img, m.pixel);
  Tensor base = pixel_decode(pyr, m.pixel);

  FeaturePyramid poked = pyr;
  Tensor level = Tensor::from_data(pyr.level(32).shape(),
                                   pyr.level(32).data());
  level.data()[0] += 0.5;
  poked.levels[32] = level;
  Tensor changed = pixel_decode(poked, m.pixel);
  double max_delta = 0.0;
  for (std::size_t i = 0; i < base.numel(); ++i)
    max_delta = std::max(max_delta,
                         std::abs(base.data()[i] - changed.data()[i]));
  CHECK(max_delta > 1e-9);
}
