#include "cmformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "cmformer/attention.hpp"
#include "cmformer/cma.hpp"
#include "cmformer/objective.hpp"
#include "cmformer/pixelnet.hpp"
#include "cmformer/rng.hpp"

namespace cmf {

double gradcheck_rel_err(double analytic, double numeric) {
  const double denom =
      std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

double check_scalar_fn(const std::function<Tensor()>& forward,
                       std::vector<Tensor>& leaves, double eps) {
  Tape::active().clear();
  for (Tensor& leaf : leaves) leaf.zero_grad();
  Tensor loss = forward();
  Tape::active().backward(loss);

  std::vector<std::vector<double>> analytic;
  for (Tensor& leaf : leaves) {
    analytic.push_back(leaf.has_grad()
                           ? leaf.grad()
                           : std::vector<double>(leaf.numel(), 0.0));
  }

  double worst = 0.0;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    Tensor& leaf = leaves[li];
    for (std::size_t i = 0; i < leaf.numel(); ++i) {
      const double saved = leaf.data()[i];
      leaf.data()[i] = saved + eps;
      const double up = forward().value();
      leaf.data()[i] = saved - eps;
      const double down = forward().value();
      leaf.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, gradcheck_rel_err(analytic[li][i], numeric));
    }
  }
  return worst;
}

namespace {

Tensor rand_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0,
                   bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.data()) v = scale * rand_normal(rng);
  return t;
}

// Fixed mixing weights derived from (element index, salt) so no output
// component cancels out of the scalar; stateless, so repeated forward
// evaluations see the same function. The 0.02/numel scale keeps |f| small
// enough that central-difference rounding noise stays below the 1e-8
// denominator floor even for structurally-zero gradients (a key-projection
// bias shifts every logit equally and cancels in the softmax).
Tensor mix_to_scalar(const Tensor& out, std::uint64_t salt) {
  Tensor mixer = Tensor::zeros(out.shape());
  const double scale = 0.02 / static_cast<double>(out.numel());
  for (std::size_t i = 0; i < mixer.numel(); ++i) {
    const double u =
        static_cast<double>(mix_seed(i + 1, salt) >> 11) * 0x1.0p-53;
    mixer.data()[i] = (0.5 + u) * scale;
  }
  return sum(mul(out, mixer));
}

AttentionParams rand_attention(std::size_t d, std::mt19937_64& rng) {
  AttentionParams p;
  p.w_q = rand_tensor({d, d}, rng, 0.5);
  p.b_q = rand_tensor({d}, rng, 0.1);
  p.w_k = rand_tensor({d, d}, rng, 0.5);
  p.b_k = rand_tensor({d}, rng, 0.1);
  p.w_v = rand_tensor({d, d}, rng, 0.5);
  p.b_v = rand_tensor({d}, rng, 0.1);
  return p;
}

void collect(std::vector<Tensor>& leaves, const AttentionParams& p) {
  leaves.insert(leaves.end(), {p.w_q, p.b_q, p.w_k, p.b_k, p.w_v, p.b_v});
}

BranchParams rand_branch(std::size_t d, std::mt19937_64& rng) {
  BranchParams b;
  b.mask_attn = rand_attention(d, rng);
  b.self_attn = rand_attention(d, rng);
  b.norm_mask = {rand_tensor({d}, rng, 0.2), rand_tensor({d}, rng, 0.1)};
  b.norm_self = {rand_tensor({d}, rng, 0.2), rand_tensor({d}, rng, 0.1)};
  for (double& v : b.norm_mask.gain.data()) v += 1.0;
  for (double& v : b.norm_self.gain.data()) v += 1.0;
  return b;
}

void collect(std::vector<Tensor>& leaves, const BranchParams& b) {
  collect(leaves, b.mask_attn);
  collect(leaves, b.self_attn);
  leaves.insert(leaves.end(), {b.norm_mask.gain, b.norm_mask.bias,
                               b.norm_self.gain, b.norm_self.bias});
}

GradCheckCase unary_case(const std::string& name,
                         Tensor (*op)(const Tensor&), double lo, double hi) {
  return {name, [op, lo, hi](std::uint64_t seed) {
            std::mt19937_64 rng(mix_seed(seed));
            Tensor x = Tensor::zeros({3, 5}, true);
            for (double& v : x.data()) v = rand_uniform(rng, lo, hi);
            std::vector<Tensor> leaves{x};
            std::mt19937_64 mix_rng(mix_seed(seed, 17));
            Tensor mixer = Tensor::zeros(x.shape());
            for (double& v : mixer.data())
              v = rand_uniform(mix_rng, 0.5, 1.5);
            return check_scalar_fn(
                [&] { return sum(mul(op(x), mixer)); }, leaves);
          }};
}

GradCheckCase binary_case(const std::string& name,
                          Tensor (*op)(const Tensor&, const Tensor&),
                          double lo, double hi) {
  return {name, [op, lo, hi](std::uint64_t seed) {
            std::mt19937_64 rng(mix_seed(seed));
            Tensor a = Tensor::zeros({4, 3}, true);
            Tensor b = Tensor::zeros({4, 3}, true);
            for (double& v : a.data()) v = rand_uniform(rng, lo, hi);
            for (double& v : b.data()) v = rand_uniform(rng, lo, hi);
            std::vector<Tensor> leaves{a, b};
            Tensor mixer = Tensor::zeros(a.shape());
            for (double& v : mixer.data()) v = rand_uniform(rng, 0.5, 1.5);
            return check_scalar_fn(
                [&] { return sum(mul(op(a, b), mixer)); }, leaves);
          }};
}

}  // namespace

std::vector<GradCheckCase> default_gradcheck_cases() {
  std::vector<GradCheckCase> cases;

  cases.push_back(binary_case("add", &add, -2.0, 2.0));
  cases.push_back(binary_case("sub", &sub, -2.0, 2.0));
  cases.push_back(binary_case("mul", &mul, -2.0, 2.0));
  cases.push_back(binary_case("div", &div, 0.5, 2.0));
  cases.push_back(unary_case("sigmoid", &sigmoid, -3.0, 3.0));
  cases.push_back(unary_case("relu", &relu, 0.1, 2.0));  // away from the kink
  cases.push_back(unary_case("exp", &exp, -2.0, 2.0));
  cases.push_back(unary_case("log", &log, 0.2, 3.0));
  cases.push_back(unary_case("softplus", &softplus, -3.0, 3.0));

  cases.push_back({"add_scalar", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({3, 4}, rng);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] { return sum(add_scalar(x, 0.7)); }, leaves);
                   }});
  cases.push_back({"mul_scalar", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({3, 4}, rng);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] { return sum(mul_scalar(x, -1.3)); }, leaves);
                   }});
  cases.push_back({"matmul", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor a = rand_tensor({4, 3}, rng);
                     Tensor b = rand_tensor({3, 5}, rng);
                     std::vector<Tensor> leaves{a, b};
                     return check_scalar_fn(
                         [&] { return mix_to_scalar(matmul(a, b), seed); },
                         leaves);
                   }});
  cases.push_back({"transpose", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor a = rand_tensor({4, 3}, rng);
                     std::vector<Tensor> leaves{a};
                     return check_scalar_fn(
                         [&] { return mix_to_scalar(transpose(a), seed); },
                         leaves);
                   }});
  cases.push_back({"reshape", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor a = rand_tensor({4, 6}, rng);
                     std::vector<Tensor> leaves{a};
                     return check_scalar_fn(
                         [&] {
                           return mix_to_scalar(reshape(a, {2, 3, 4}), seed);
                         },
                         leaves);
                   }});
  cases.push_back({"concat_lastdim", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor a = rand_tensor({3, 4}, rng);
                     Tensor b = rand_tensor({3, 4}, rng);
                     std::vector<Tensor> leaves{a, b};
                     return check_scalar_fn(
                         [&] {
                           return mix_to_scalar(concat_lastdim(a, b), seed);
                         },
                         leaves);
                   }});
  cases.push_back({"select_row", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor a = rand_tensor({5, 4}, rng);
                     std::vector<Tensor> leaves{a};
                     return check_scalar_fn(
                         [&] { return mix_to_scalar(select_row(a, 2), seed); },
                         leaves);
                   }});
  cases.push_back({"sum", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({2, 3, 4}, rng);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn([&] { return sum(x); }, leaves);
                   }});
  cases.push_back({"mean", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({2, 3, 4}, rng);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn([&] { return mean(x); }, leaves);
                   }});
  cases.push_back({"sum_lastdim", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({3, 5}, rng);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] { return mix_to_scalar(sum_lastdim(x), seed); },
                         leaves);
                   }});
  cases.push_back({"softmax_lastdim", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({4, 6}, rng, 1.5);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] {
                           return mix_to_scalar(softmax_lastdim(x), seed);
                         },
                         leaves);
                   }});
  cases.push_back({"layernorm", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({4, 6}, rng);
                     Tensor g = rand_tensor({6}, rng, 0.3);
                     for (double& v : g.data()) v += 1.0;
                     Tensor b = rand_tensor({6}, rng, 0.2);
                     std::vector<Tensor> leaves{x, g, b};
                     return check_scalar_fn(
                         [&] { return mix_to_scalar(layernorm(x, g, b), seed); },
                         leaves);
                   }});
  cases.push_back({"affine", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({4, 3}, rng);
                     Tensor w = rand_tensor({3, 5}, rng);
                     Tensor b = rand_tensor({5}, rng);
                     std::vector<Tensor> leaves{x, w, b};
                     return check_scalar_fn(
                         [&] { return mix_to_scalar(affine(x, w, b), seed); },
                         leaves);
                   }});
  cases.push_back({"avgpool2x2", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({4, 6, 3}, rng);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] { return mix_to_scalar(avgpool2x2(x), seed); },
                         leaves);
                   }});
  cases.push_back({"upsample_nearest2x", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({3, 2, 4}, rng);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] {
                           return mix_to_scalar(upsample_nearest2x(x), seed);
                         },
                         leaves);
                   }});
  cases.push_back({"im2col", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({6, 6, 2}, rng);
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] { return mix_to_scalar(im2col(x, 3, 2, 1), seed); },
                         leaves);
                   }});
  cases.push_back({"cross_entropy_rows", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({5, 4}, rng, 1.5);
                     std::vector<std::size_t> targets;
                     std::vector<double> weights;
                     for (int i = 0; i < 5; ++i) {
                       targets.push_back(rand_index(rng, 4));
                       weights.push_back(rand_uniform(rng, 0.1, 1.0));
                     }
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] { return cross_entropy_rows(x, targets, weights); },
                         leaves);
                   }});

  cases.push_back({"masked_attention", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     const std::size_t n = 3, hw = 8, d = 4;
                     AttentionParams p = rand_attention(d, rng);
                     Tensor x = rand_tensor({n, d}, rng);
                     Tensor f = rand_tensor({hw, d}, rng);
                     Tensor mask = rand_tensor({n, 4, 2}, rng, 2.0, false);
                     AttentionBias bias = mask_to_bias(mask, 4, 2);
                     std::vector<Tensor> leaves{x, f};
                     collect(leaves, p);
                     return check_scalar_fn(
                         [&] {
                           return mix_to_scalar(
                               masked_attention(x, f, bias, p), seed);
                         },
                         leaves);
                   }});
  cases.push_back({"scaled_self_attention", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     const std::size_t n = 4, d = 4;
                     AttentionParams p = rand_attention(d, rng);
                     Tensor x = rand_tensor({n, d}, rng);
                     std::vector<Tensor> leaves{x};
                     collect(leaves, p);
                     return check_scalar_fn(
                         [&] {
                           return mix_to_scalar(scaled_self_attention(x, p),
                                                seed);
                         },
                         leaves);
                   }});
  cases.push_back({"cma_layer", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     const std::size_t n = 3, d = 6, h = 4, w = 4;
                     CmaLayerParams p;
                     p.hi = rand_branch(d, rng);
                     p.enhanced = true;
                     p.lo = rand_branch(d, rng);
                     p.fuse_w = rand_tensor({2 * d, d}, rng, 0.4);
                     p.fuse_b = rand_tensor({d}, rng, 0.1);
                     p.ffn.w1 = rand_tensor({d, 4 * d}, rng, 0.3);
                     p.ffn.b1 = rand_tensor({4 * d}, rng, 0.1);
                     p.ffn.w2 = rand_tensor({4 * d, d}, rng, 0.3);
                     p.ffn.b2 = rand_tensor({d}, rng, 0.1);
                     p.norm_ffn = {rand_tensor({d}, rng, 0.2),
                                   rand_tensor({d}, rng, 0.1)};
                     for (double& v : p.norm_ffn.gain.data()) v += 1.0;
                     Tensor x = rand_tensor({n, d}, rng);
                     Tensor x_d = rand_tensor({n, d}, rng);
                     Tensor f = rand_tensor({h, w, d}, rng);
                     Tensor mask = rand_tensor({n, h, w}, rng, 2.0, false);
                     Tensor q_pos = rand_tensor({n, d}, rng, 0.5, false);
                     Tensor k_hi = sinusoidal_position_encoding(h, w, d);
                     Tensor k_lo = sinusoidal_position_encoding(h / 2, w / 2, d);
                     std::vector<Tensor> leaves{x, x_d, f};
                     collect(leaves, p.hi);
                     collect(leaves, p.lo);
                     leaves.insert(leaves.end(),
                                   {p.fuse_w, p.fuse_b, p.ffn.w1, p.ffn.b1,
                                    p.ffn.w2, p.ffn.b2, p.norm_ffn.gain,
                                    p.norm_ffn.bias});
                     return check_scalar_fn(
                         [&] {
                           CmaLayerOutput out = cma_layer(
                               x, x_d, f, mask, p, &q_pos, &k_hi, &k_lo);
                           return mix_to_scalar(out.x_final, seed);
                         },
                         leaves);
                   }});
  cases.push_back({"pixelnet", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     const std::size_t d = 4;
                     PixelNetParams p;
                     std::size_t c_in = 3;
                     for (int i = 0; i < 5; ++i) {
                       ConvBlockParams cb;
                       cb.w = rand_tensor({9 * c_in, d}, rng, 0.3);
                       cb.b = rand_tensor({d}, rng, 0.1);
                       cb.ln_gain = rand_tensor({d}, rng, 0.2);
                       for (double& v : cb.ln_gain.data()) v += 1.0;
                       cb.ln_bias = rand_tensor({d}, rng, 0.1);
                       p.stages.push_back(cb);
                       c_in = d;
                     }
                     for (int i = 0; i < 4; ++i) {
                       p.proj_w[i] = rand_tensor({d, d}, rng, 0.4);
                       p.proj_b[i] = rand_tensor({d}, rng, 0.1);
                     }
                     p.out_w = rand_tensor({d, d}, rng, 0.4);
                     p.out_b = rand_tensor({d}, rng, 0.1);
                     Tensor img = Tensor::zeros({32, 32, 3}, true);
                     for (double& v : img.data())
                       v = rand_uniform(rng, 0.0, 1.0);
                     std::vector<Tensor> leaves{img};
                     for (auto& cb : p.stages)
                       leaves.insert(leaves.end(),
                                     {cb.w, cb.b, cb.ln_gain, cb.ln_bias});
                     for (int i = 0; i < 4; ++i)
                       leaves.insert(leaves.end(), {p.proj_w[i], p.proj_b[i]});
                     leaves.insert(leaves.end(), {p.out_w, p.out_b});
                     return check_scalar_fn(
                         [&] {
                           return mix_to_scalar(
                               pixel_decode(encode(img, p), p), seed);
                         },
                         leaves);
                   }});

  cases.push_back({"dice_loss", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({12}, rng, 1.5);
                     std::vector<std::uint8_t> target(12);
                     for (auto& t : target)
                       t = rand_uniform(rng) < 0.5 ? 0 : 1;
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] { return dice_loss(x, target); }, leaves);
                   }});
  cases.push_back({"bce_mask_loss", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     Tensor x = rand_tensor({12}, rng, 1.5);
                     std::vector<std::uint8_t> target(12);
                     for (auto& t : target)
                       t = rand_uniform(rng) < 0.5 ? 0 : 1;
                     std::vector<Tensor> leaves{x};
                     return check_scalar_fn(
                         [&] { return bce_mask_loss(x, target); }, leaves);
                   }});
  cases.push_back({"cls_loss", [](std::uint64_t seed) {
                     std::mt19937_64 rng(mix_seed(seed));
                     const std::size_t n = 5, k = 3;
                     Tensor logits = rand_tensor({n, k + 1}, rng, 1.5);
                     std::vector<GtSegment> gt(2);
                     gt[0].class_id = 0;
                     gt[1].class_id = 2;
                     std::vector<std::pair<std::size_t, std::size_t>> match{
                         {1, 0}, {3, 1}};
                     std::vector<Tensor> leaves{logits};
                     return check_scalar_fn(
                         [&] { return cls_loss(logits, match, gt, k); },
                         leaves);
                   }});
  return cases;
}

std::vector<GradCheckResult> run_gradcheck(
    const std::vector<GradCheckCase>& cases,
    const std::vector<std::uint64_t>& seeds, double tolerance,
    std::ostream* log) {
  std::vector<GradCheckResult> results;
  for (const GradCheckCase& c : cases) {
    GradCheckResult r;
    r.name = c.name;
    for (std::uint64_t seed : seeds) {
      r.max_rel_err = std::max(r.max_rel_err, c.run(seed));
    }
    r.pass = r.max_rel_err <= tolerance;
    if (log) {
      (*log) << (r.pass ? "[PASS] " : "[FAIL] ") << r.name
             << " max_rel_err=" << r.max_rel_err << "\n";
    }
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace cmf
