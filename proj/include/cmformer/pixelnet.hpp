#pragma once

#include <array>
#include <map>

#include "cmformer/tensor.hpp"

namespace cmf {

// conv 3x3 -> layernorm over channels -> relu, realized as im2col + affine.
struct ConvBlockParams {
  Tensor w;        // [9*c_in x c_out]
  Tensor b;        // [c_out]
  Tensor ln_gain;  // [c_out]
  Tensor ln_bias;  // [c_out]
};

struct PixelNetParams {
  std::vector<ConvBlockParams> stages;      // 5 stride-2 blocks: H/2 .. H/32
  std::array<Tensor, 4> proj_w, proj_b;     // 1x1 per level, order 4,8,16,32
  Tensor out_w, out_b;                      // final 1x1 on the fused map
};

// Stride levels {4, 8, 16, 32} of an H x W input, all at channel width d.
struct FeaturePyramid {
  std::size_t input_h = 0;
  std::size_t input_w = 0;
  std::map<int, Tensor> levels;

  const Tensor& level(int stride) const { return levels.at(stride); }
};

// Build the pyramid with stacked stride-2 conv blocks. H and W must be
// multiples of 32.
FeaturePyramid encode(const Tensor& image, const PixelNetParams& p);

// Coarse-to-fine sum: project each level, upsample nearest, add, finishing at
// 1/4 resolution. Returns the mask-feature map [(H/4) x (W/4) x d].
Tensor pixel_decode(const FeaturePyramid& pyramid, const PixelNetParams& p);

Tensor conv_block(const Tensor& x, const ConvBlockParams& p,
                  std::size_t stride);

}  // namespace cmf
