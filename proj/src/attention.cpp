#include "cmformer/attention.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace cmf {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

Tensor AttentionBias::to_tensor() const {
  return Tensor::from_data({n_queries, n_positions}, values);
}

AttentionBias mask_to_bias(const Tensor& mask_logits, std::size_t target_h,
                           std::size_t target_w) {
  if (mask_logits.rank() != 3) {
    throw shape_error("mask_to_bias: expected [N x H x W], got " +
                      shape_str(mask_logits.shape()));
  }
  const std::size_t n = mask_logits.dim(0);
  const std::size_t src_h = mask_logits.dim(1);
  const std::size_t src_w = mask_logits.dim(2);
  if (target_h == 0 || target_w == 0 || src_h % target_h != 0 ||
      src_w % target_w != 0) {
    throw shape_error("mask_to_bias: non-divisible resize from " +
                      std::to_string(src_h) + "x" + std::to_string(src_w) +
                      " to " + std::to_string(target_h) + "x" +
                      std::to_string(target_w));
  }
  const std::size_t fy = src_h / target_h;
  const std::size_t fx = src_w / target_w;
  AttentionBias bias;
  bias.n_queries = n;
  bias.n_positions = target_h * target_w;
  bias.values.assign(n * bias.n_positions, 0.0);
  const double* logits = mask_logits.data().data();
  for (std::size_t q = 0; q < n; ++q) {
    std::size_t foreground = 0;
    double* row = bias.values.data() + q * bias.n_positions;
    for (std::size_t y = 0; y < target_h; ++y) {
      for (std::size_t x = 0; x < target_w; ++x) {
        const double v = logits[(q * src_h + y * fy) * src_w + x * fx];
        if (v >= 0.0) {
          ++foreground;
        } else {
          row[y * target_w + x] = kNegInf;
        }
      }
    }
    if (foreground == 0) {
      // Empty binarized mask: fall back to unmasked attention for this query.
      for (std::size_t i = 0; i < bias.n_positions; ++i) row[i] = 0.0;
      bias.empty_rows.push_back(q);
    }
  }
  return bias;
}

namespace {

Tensor project(const Tensor& x, const Tensor& w, const Tensor& b,
               const Tensor* pos) {
  return pos ? affine(add(x, *pos), w, b) : affine(x, w, b);
}

}  // namespace

Tensor masked_attention(const Tensor& x_prev, const Tensor& f,
                        const AttentionBias& bias, const AttentionParams& p,
                        const Tensor* q_pos, const Tensor* k_pos) {
  if (x_prev.rank() != 2 || f.rank() != 2 || x_prev.dim(1) != f.dim(1)) {
    throw shape_error("masked_attention: x=" + shape_str(x_prev.shape()) +
                      " f=" + shape_str(f.shape()));
  }
  if (bias.n_queries != x_prev.dim(0) || bias.n_positions != f.dim(0)) {
    throw shape_error(
        "masked_attention: bias " + std::to_string(bias.n_queries) + "x" +
        std::to_string(bias.n_positions) + " does not match x=" +
        shape_str(x_prev.shape()) + " f=" + shape_str(f.shape()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.dim()));
  Tensor q = project(x_prev, p.w_q, p.b_q, q_pos);
  Tensor k = project(f, p.w_k, p.b_k, k_pos);
  Tensor v = affine(f, p.w_v, p.b_v);
  Tensor logits = mul_scalar(matmul(q, transpose(k)), scale);
  Tensor weights = softmax_lastdim(add(logits, bias.to_tensor()));
  return add(matmul(weights, v), x_prev);
}

Tensor scaled_self_attention(const Tensor& x, const AttentionParams& p,
                             const Tensor* pos) {
  if (x.rank() != 2 || x.dim(0) < 1 || x.dim(1) != p.dim()) {
    throw shape_error("scaled_self_attention: x=" + shape_str(x.shape()) +
                      " w=" + shape_str(p.w_q.shape()));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(p.dim()));
  Tensor q = project(x, p.w_q, p.b_q, pos);
  Tensor k = project(x, p.w_k, p.b_k, pos);
  Tensor v = affine(x, p.w_v, p.b_v);
  Tensor weights = softmax_lastdim(mul_scalar(matmul(q, transpose(k)), scale));
  return matmul(weights, v);
}

Tensor sinusoidal_position_encoding(std::size_t h, std::size_t w,
                                    std::size_t d) {
  if (d % 2 != 0 || d < 4) {
    throw shape_error("sinusoidal_position_encoding: width " +
                      std::to_string(d) + " must be even and >= 4");
  }
  const std::size_t half = d / 2;
  const double two_pi = 6.283185307179586;
  const double temperature = 10000.0;
  Tensor out = Tensor::zeros({h * w, d});
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double* row = out.data().data() + (y * w + x) * d;
      const double ny = (static_cast<double>(y) + 0.5) /
                        static_cast<double>(h) * two_pi;
      const double nx = (static_cast<double>(x) + 0.5) /
                        static_cast<double>(w) * two_pi;
      for (std::size_t i = 0; i < half; ++i) {
        const double freq =
            std::pow(temperature, 2.0 * static_cast<double>(i / 2) /
                                      static_cast<double>(half));
        const double vy = ny / freq;
        const double vx = nx / freq;
        row[i] = (i % 2 == 0) ? std::sin(vy) : std::cos(vy);
        row[half + i] = (i % 2 == 0) ? std::sin(vx) : std::cos(vx);
      }
    }
  }
  return out;
}

}  // namespace cmf
