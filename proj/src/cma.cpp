#include "cmformer/cma.hpp"

#include <cmath>
#include <string>

namespace cmf {

namespace {

double l2_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v * v;
  return std::sqrt(s);
}

void check_finite_stage(const Tensor& t, const char* stage) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) {
      throw tensor_error(std::string("cma_layer: non-finite output in ") +
                         stage);
    }
  }
}

// masked attention -> residual(+inside op)+norm -> self attention ->
// residual+norm.
Tensor run_branch(const Tensor& x_prev, const Tensor& f_flat,
                  const AttentionBias& bias, const BranchParams& p,
                  const Tensor* q_pos, const Tensor* k_pos,
                  const char* stage) {
  Tensor a = masked_attention(x_prev, f_flat, bias, p.mask_attn, q_pos, k_pos);
  a = layernorm(a, p.norm_mask.gain, p.norm_mask.bias);
  Tensor s = scaled_self_attention(a, p.self_attn, q_pos);
  Tensor out = layernorm(add(a, s), p.norm_self.gain, p.norm_self.bias);
  check_finite_stage(out, stage);
  return out;
}

Tensor flatten_feature(const Tensor& f) {
  return reshape(f, {f.dim(0) * f.dim(1), f.dim(2)});
}

}  // namespace

Tensor downsample_feature(const Tensor& f) { return avgpool2x2(f); }

Tensor fuse(const Tensor& x_hi, const Tensor& x_lo, const Tensor& fuse_w,
            const Tensor& fuse_b) {
  if (x_hi.shape() != x_lo.shape()) {
    throw shape_error("fuse: shape mismatch " + shape_str(x_hi.shape()) +
                      " vs " + shape_str(x_lo.shape()));
  }
  return affine(concat_lastdim(x_hi, x_lo), fuse_w, fuse_b);
}

CmaLayerOutput cma_layer(const Tensor& x_prev, const Tensor& x_prev_d,
                         const Tensor& f, const Tensor& mask_logits_prev,
                         const CmaLayerParams& p, const Tensor* q_pos,
                         const Tensor* k_pos_hi, const Tensor* k_pos_lo) {
  if (f.rank() != 3) {
    throw shape_error("cma_layer: feature map must be [H x W x d], got " +
                      shape_str(f.shape()));
  }
  const std::size_t h = f.dim(0), w = f.dim(1);
  CmaLayerOutput out;

  AttentionBias bias_hi = mask_to_bias(mask_logits_prev, h, w);
  Tensor x_hi = run_branch(x_prev, flatten_feature(f), bias_hi, p.hi, q_pos,
                           k_pos_hi, "high branch");
  out.diag.hi_norm = l2_norm(x_hi);

  Tensor fused;
  if (p.enhanced) {
    Tensor f_d = downsample_feature(f);
    AttentionBias bias_lo = mask_to_bias(mask_logits_prev, h / 2, w / 2);
    Tensor x_lo = run_branch(x_prev_d, flatten_feature(f_d), bias_lo, p.lo,
                             q_pos, k_pos_lo, "low branch");
    out.diag.lo_norm = l2_norm(x_lo);
    fused = fuse(x_hi, x_lo, p.fuse_w, p.fuse_b);
    check_finite_stage(fused, "fusion");
    out.x_lo_next = x_lo;
  } else {
    fused = x_hi;
    out.x_lo_next = x_prev_d;
  }
  out.diag.fused_norm = l2_norm(fused);

  Tensor ff = affine(relu(affine(fused, p.ffn.w1, p.ffn.b1)), p.ffn.w2,
                     p.ffn.b2);
  out.x_final =
      layernorm(add(fused, ff), p.norm_ffn.gain, p.norm_ffn.bias);
  check_finite_stage(out.x_final, "ffn");
  return out;
}

}  // namespace cmf
