#include "cmformer/pixelnet.hpp"

#include <string>

namespace cmf {

Tensor conv_block(const Tensor& x, const ConvBlockParams& p,
                  std::size_t stride) {
  const std::size_t h = x.dim(0), w = x.dim(1);
  const std::size_t oh = (h + 2 - 3) / stride + 1;
  const std::size_t ow = (w + 2 - 3) / stride + 1;
  const std::size_t c_out = p.b.dim(0);
  Tensor y = affine(im2col(x, 3, stride, 1), p.w, p.b);
  y = relu(layernorm(y, p.ln_gain, p.ln_bias));
  return reshape(y, {oh, ow, c_out});
}

FeaturePyramid encode(const Tensor& image, const PixelNetParams& p) {
  if (image.rank() != 3 || image.dim(2) != 3) {
    throw shape_error("encode: expected [H x W x 3] image, got " +
                      shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1);
  if (h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0) {
    throw shape_error("encode: input " + std::to_string(h) + "x" +
                      std::to_string(w) +
                      " violates the multiple-of-32 size contract");
  }
  FeaturePyramid pyr;
  pyr.input_h = h;
  pyr.input_w = w;
  Tensor t = conv_block(image, p.stages[0], 2);  // H/2
  t = conv_block(t, p.stages[1], 2);             // H/4
  pyr.levels[4] = t;
  t = conv_block(t, p.stages[2], 2);             // H/8
  pyr.levels[8] = t;
  t = conv_block(t, p.stages[3], 2);             // H/16
  pyr.levels[16] = t;
  t = conv_block(t, p.stages[4], 2);             // H/32
  pyr.levels[32] = t;
  return pyr;
}

namespace {

Tensor project_level(const Tensor& f, const Tensor& w, const Tensor& b) {
  const std::size_t h = f.dim(0), lw = f.dim(1), c = f.dim(2);
  return reshape(affine(reshape(f, {h * lw, c}), w, b), {h, lw, b.dim(0)});
}

}  // namespace

Tensor pixel_decode(const FeaturePyramid& pyramid, const PixelNetParams& p) {
  for (int s : {4, 8, 16, 32}) {
    if (pyramid.levels.find(s) == pyramid.levels.end()) {
      throw shape_error("pixel_decode: pyramid is missing level x" +
                        std::to_string(s));
    }
  }
  // proj indices follow level order 4, 8, 16, 32
  Tensor t = project_level(pyramid.level(32), p.proj_w[3], p.proj_b[3]);
  t = upsample_nearest2x(t);
  t = add(t, project_level(pyramid.level(16), p.proj_w[2], p.proj_b[2]));
  t = upsample_nearest2x(t);
  t = add(t, project_level(pyramid.level(8), p.proj_w[1], p.proj_b[1]));
  t = upsample_nearest2x(t);
  t = add(t, project_level(pyramid.level(4), p.proj_w[0], p.proj_b[0]));
  return project_level(t, p.out_w, p.out_b);
}

}  // namespace cmf
