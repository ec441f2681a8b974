#pragma once

#include "cmformer/attention.hpp"
#include "cmformer/tensor.hpp"

namespace cmf {

struct LayerNormParams {
  Tensor gain, bias;  // each [d]
};

struct FfnParams {
  Tensor w1, b1;  // [d x 4d], [4d]
  Tensor w2, b2;  // [4d x d], [d]
};

// One attention branch: masked cross-attention then self-attention, each
// wrapped in residual + layernorm.
struct BranchParams {
  AttentionParams mask_attn;
  AttentionParams self_attn;
  LayerNormParams norm_mask;
  LayerNormParams norm_self;
};

// Parameters of one decoder layer. The low-resolution branch and the fusion
// map exist only on content-enhanced layers; a plain layer carries exactly
// the baseline parameter set.
struct CmaLayerParams {
  BranchParams hi;
  bool enhanced = false;
  BranchParams lo;        // valid iff enhanced
  Tensor fuse_w, fuse_b;  // [2d x d], [d]; valid iff enhanced
  FfnParams ffn;
  LayerNormParams norm_ffn;
};

struct CmaLayerOutput {
  Tensor x_final;   // [N x d], next input of the fused query stream
  Tensor x_lo_next; // [N x d], next input of the low-resolution stream
  struct Diagnostics {
    double hi_norm = 0.0;
    double lo_norm = 0.0;
    double fused_norm = 0.0;
  } diag;
};

// Average pooling to half resolution; the input keeps twice the width and
// height of the output.
Tensor downsample_feature(const Tensor& f);

// Affine map on the channel concatenation [x_hi, x_lo]: no nonlinearity.
Tensor fuse(const Tensor& x_hi, const Tensor& x_lo, const Tensor& fuse_w,
            const Tensor& fuse_b);

// One content-enhanced decoder layer over feature map f [H x W x d] with the
// previous layer's mask logits as the attention filter source for both
// resolutions. With p.enhanced == false this is exactly the baseline layer:
// high branch + FFN, low stream passed through untouched.
CmaLayerOutput cma_layer(const Tensor& x_prev, const Tensor& x_prev_d,
                         const Tensor& f, const Tensor& mask_logits_prev,
                         const CmaLayerParams& p,
                         const Tensor* q_pos = nullptr,
                         const Tensor* k_pos_hi = nullptr,
                         const Tensor* k_pos_lo = nullptr);

}  // namespace cmf
