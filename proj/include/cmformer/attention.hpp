#pragma once

#include <cstddef>
#include <vector>

#include "cmformer/tensor.hpp"

namespace cmf {

// Additive attention bias realizing the binarized foreground filter.
// Every entry is exactly 0 or -inf; rows that binarized to empty foreground
// are stored all-zero (unmasked fallback) and recorded in empty_rows.
struct AttentionBias {
  std::size_t n_queries = 0;
  std::size_t n_positions = 0;
  std::vector<double> values;           // n_queries x n_positions
  std::vector<std::size_t> empty_rows;  // sorted

  Tensor to_tensor() const;  // constant [N x HW] tensor
};

// One attention head's affine projections; d_k equals the projection width.
struct AttentionParams {
  Tensor w_q, b_q;  // [d x d], [d]
  Tensor w_k, b_k;
  Tensor w_v, b_v;

  std::size_t dim() const { return w_q.dim(0); }
};

// Binarize mask logits (sigmoid >= 0.5, i.e. logit >= 0) after a
// nearest-neighbor resize to (target_h, target_w). Target dims must divide
// the source dims.
AttentionBias mask_to_bias(const Tensor& mask_logits, std::size_t target_h,
                           std::size_t target_w);

// softmax(bias + Q K^T / sqrt(d_k)) V + x_prev with Q from x_prev and K, V
// from the flattened feature map f [HW x d]. Optional position encodings are
// added to the projection inputs: q_pos to the query path, k_pos to the key
// path.
Tensor masked_attention(const Tensor& x_prev, const Tensor& f,
                        const AttentionBias& bias, const AttentionParams& p,
                        const Tensor* q_pos = nullptr,
                        const Tensor* k_pos = nullptr);

// Softmax(Q K^T / sqrt(d_k)) V over x itself; no residual (applied at the
// call site). Optional pos is added to the query and key inputs.
Tensor scaled_self_attention(const Tensor& x, const AttentionParams& p,
                             const Tensor* pos = nullptr);

// Fixed 2-D sinusoidal encoding, [h*w x d] with d even: first half of the
// channels encode y, second half x.
Tensor sinusoidal_position_encoding(std::size_t h, std::size_t w,
                                    std::size_t d);

}  // namespace cmf
