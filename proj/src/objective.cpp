#include "cmformer/objective.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace cmf {

std::vector<std::uint8_t> downsample_labels(
    const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w,
    std::size_t factor) {
  const std::size_t oh = h / factor, ow = w / factor;
  std::vector<std::uint8_t> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      out[y * ow + x] = labels[(y * factor) * w + x * factor];
  return out;
}

std::vector<GtSegment> segments_from_labels(
    const std::vector<std::uint8_t>& labels_q, std::size_t h, std::size_t w,
    std::size_t n_classes) {
  std::vector<GtSegment> segments;
  for (std::size_t c = 0; c < n_classes; ++c) {
    GtSegment seg;
    seg.class_id = c;
    seg.h = h;
    seg.w = w;
    seg.mask.assign(h * w, 0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < h * w; ++i) {
      if (labels_q[i] == c) {
        seg.mask[i] = 1;
        ++count;
      }
    }
    if (count > 0) segments.push_back(std::move(seg));
  }
  return segments;
}

namespace {

double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                  : std::exp(x) / (1.0 + std::exp(x));
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// BCE and dice on raw arrays, mirroring the differentiable losses exactly.
double bce_raw(const double* logits, const std::uint8_t* target,
               std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = target[i] ? 1.0 : 0.0;
    s += t * stable_softplus(-logits[i]) + (1.0 - t) * stable_softplus(logits[i]);
  }
  return s / static_cast<double>(n);
}

double dice_raw(const double* logits, const std::uint8_t* target,
                std::size_t n, double eps) {
  double inter = 0.0, sum_p = 0.0, sum_t = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = stable_sigmoid(logits[i]);
    const double t = target[i] ? 1.0 : 0.0;
    inter += p * t;
    sum_p += p;
    sum_t += t;
  }
  return 1.0 - (2.0 * inter + eps) / (sum_p + sum_t + eps);
}

}  // namespace

std::vector<std::vector<double>> build_match_cost(
    const LayerPrediction& pred, const std::vector<GtSegment>& gt,
    const MatchWeights& w, double dice_eps) {
  const std::size_t n = pred.class_logits.dim(0);
  const std::size_t kp1 = pred.class_logits.dim(1);
  const std::size_t p = pred.mask_logits.dim(1) * pred.mask_logits.dim(2);
  if (gt.size() > n) {
    throw tensor_error("build_match_cost: too many segments for query budget (" +
                       std::to_string(gt.size()) + " > " + std::to_string(n) +
                       ")");
  }
  for (const GtSegment& seg : gt) {
    if (seg.mask.size() != p) {
      throw shape_error("build_match_cost: gt mask has " +
                        std::to_string(seg.mask.size()) + " pixels, pred has " +
                        std::to_string(p));
    }
  }
  std::vector<std::vector<double>> cost(n, std::vector<double>(gt.size(), 0.0));
  if (gt.empty()) return cost;

  for (std::size_t i = 0; i < n; ++i) {
    const double* crow = pred.class_logits.data().data() + i * kp1;
    double mx = crow[0];
    for (std::size_t c = 1; c < kp1; ++c) mx = std::max(mx, crow[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < kp1; ++c) denom += std::exp(crow[c] - mx);
    const double* mrow = pred.mask_logits.data().data() + i * p;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double prob = std::exp(crow[gt[j].class_id] - mx) / denom;
      cost[i][j] = w.lambda_cls * (-prob) +
                   w.lambda_ce * bce_raw(mrow, gt[j].mask.data(), p) +
                   w.lambda_dice * dice_raw(mrow, gt[j].mask.data(), p, dice_eps);
    }
  }
  return cost;
}

namespace {

// O(n^3) shortest-augmenting-path assignment over columns (gts). Returns the
// optimal total cost; col_to_row[j] holds the assigned row.
double solve_assignment(const std::vector<std::vector<double>>& cost,
                        const std::vector<std::size_t>& rows,
                        const std::vector<std::size_t>& cols,
                        std::vector<std::size_t>* col_to_row_out) {
  const std::size_t n = rows.size(), m = cols.size();
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials; row 0 / col 0 are virtual.
  std::vector<double> u(m + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> way(n + 1, 0), p(n + 1, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    p[0] = j;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, kInf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j2 = 1; j2 <= n; ++j2) {
        if (used[j2]) continue;
        const double cur =
            cost[rows[j2 - 1]][cols[i0 - 1]] - u[i0] - v[j2];
        if (cur < minv[j2]) {
          minv[j2] = cur;
          way[j2] = j0;
        }
        if (minv[j2] < delta) {
          delta = minv[j2];
          j1 = j2;
        }
      }
      for (std::size_t j2 = 0; j2 <= n; ++j2) {
        if (used[j2]) {
          u[p[j2]] += delta;
          v[j2] -= delta;
        } else {
          minv[j2] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> col_to_row(m, 0);
  double total = 0.0;
  for (std::size_t j2 = 1; j2 <= n; ++j2) {
    if (p[j2] != 0) {
      col_to_row[p[j2] - 1] = rows[j2 - 1];
      total += cost[rows[j2 - 1]][cols[p[j2] - 1]];
    }
  }
  if (col_to_row_out) *col_to_row_out = col_to_row;
  return total;
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> hungarian_match(
    const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  const std::size_t m = n ? cost[0].size() : 0;
  if (m == 0) return {};
  if (n < m) {
    throw tensor_error("hungarian_match: " + std::to_string(m) +
                       " columns exceed " + std::to_string(n) + " rows");
  }
  for (const auto& row : cost) {
    for (double v : row) {
      if (!std::isfinite(v)) {
        throw tensor_error("hungarian_match: non-finite cost entry");
      }
    }
  }

  std::vector<std::size_t> all_rows(n), all_cols(m);
  for (std::size_t i = 0; i < n; ++i) all_rows[i] = i;
  for (std::size_t j = 0; j < m; ++j) all_cols[j] = j;
  const double best = solve_assignment(cost, all_rows, all_cols, nullptr);

  // Fix pairs in gt order, always taking the smallest query index that still
  // extends to an optimal assignment. Resolves ties deterministically.
  double fixed_cost = 0.0;
  std::vector<std::pair<std::size_t, std::size_t>> result;
  std::vector<std::size_t> free_rows = all_rows;
  const double tol = 1e-9 * std::max(1.0, std::abs(best));
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<std::size_t> tail_cols;
    for (std::size_t j2 = j + 1; j2 < m; ++j2) tail_cols.push_back(j2);
    bool fixed = false;
    for (std::size_t qi = 0; qi < free_rows.size() && !fixed; ++qi) {
      const std::size_t q = free_rows[qi];
      std::vector<std::size_t> rest = free_rows;
      rest.erase(rest.begin() + static_cast<std::ptrdiff_t>(qi));
      const double rest_cost =
          tail_cols.empty() ? 0.0
                            : solve_assignment(cost, rest, tail_cols, nullptr);
      if (fixed_cost + cost[q][j] + rest_cost <= best + tol) {
        result.emplace_back(q, j);
        fixed_cost += cost[q][j];
        free_rows = rest;
        fixed = true;
      }
    }
    if (!fixed) {
      throw tensor_error("hungarian_match: failed to extend assignment");
    }
  }
  return result;
}

Tensor dice_loss(const Tensor& pred_logits,
                 const std::vector<std::uint8_t>& target, double eps) {
  if (pred_logits.rank() != 1 || pred_logits.dim(0) != target.size() ||
      target.empty()) {
    throw shape_error("dice_loss: logits " + shape_str(pred_logits.shape()) +
                      " vs " + std::to_string(target.size()) + " targets");
  }
  std::vector<double> t(target.size());
  double sum_t = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    t[i] = target[i] ? 1.0 : 0.0;
    sum_t += t[i];
  }
  Tensor target_t = Tensor::from_data({target.size()}, std::move(t));
  Tensor sig = sigmoid(pred_logits);
  Tensor inter = sum(mul(sig, target_t));
  Tensor denom = add_scalar(sum(sig), sum_t + eps);
  Tensor ratio = div(add_scalar(mul_scalar(inter, 2.0), eps), denom);
  return add_scalar(mul_scalar(ratio, -1.0), 1.0);
}

Tensor bce_mask_loss(const Tensor& pred_logits,
                     const std::vector<std::uint8_t>& target) {
  if (pred_logits.rank() != 1 || pred_logits.dim(0) != target.size() ||
      target.empty()) {
    throw shape_error("bce_mask_loss: logits " +
                      shape_str(pred_logits.shape()) + " vs " +
                      std::to_string(target.size()) + " targets");
  }
  // t*softplus(-x) + (1-t)*softplus(x), averaged
  std::vector<double> t(target.size()), one_minus_t(target.size());
  for (std::size_t i = 0; i < target.size(); ++i) {
    t[i] = target[i] ? 1.0 : 0.0;
    one_minus_t[i] = 1.0 - t[i];
  }
  Tensor t_t = Tensor::from_data({target.size()}, std::move(t));
  Tensor omt = Tensor::from_data({target.size()}, std::move(one_minus_t));
  Tensor pos = mul(t_t, softplus(mul_scalar(pred_logits, -1.0)));
  Tensor neg = mul(omt, softplus(pred_logits));
  return mean(add(pos, neg));
}

Tensor cls_loss(const Tensor& class_logits,
                const std::vector<std::pair<std::size_t, std::size_t>>& match,
                const std::vector<GtSegment>& gt, std::size_t n_classes,
                double no_object_weight) {
  const std::size_t n = class_logits.dim(0);
  std::vector<std::size_t> targets(n, n_classes);  // no-object by default
  std::vector<double> weights(n, no_object_weight);
  for (const auto& [q, j] : match) {
    targets[q] = gt[j].class_id;
    weights[q] = 1.0;
  }
  return cross_entropy_rows(class_logits, targets, weights);
}

TotalLoss total_loss(const std::vector<LayerPrediction>& preds,
                     const std::vector<GtSegment>& gt, const MatchWeights& w,
                     double no_object_weight, double dice_eps) {
  if (preds.empty()) {
    throw tensor_error("total_loss: need at least one prediction");
  }
  const std::size_t n_classes = preds[0].class_logits.dim(1) - 1;
  TotalLoss out;
  out.breakdown.weights = w;
  Tensor acc;
  for (const LayerPrediction& pred : preds) {
    std::vector<std::vector<double>> cost;
    {
      NoGradGuard no_grad;  // matching is gradient-free
      cost = build_match_cost(pred, gt, w, dice_eps);
    }
    const auto match = hungarian_match(cost);

    const std::size_t hw = pred.mask_logits.dim(1) * pred.mask_logits.dim(2);
    Tensor masks_flat =
        reshape(pred.mask_logits, {pred.mask_logits.dim(0), hw});
    Tensor layer_ce, layer_dice;
    for (const auto& [q, j] : match) {
      Tensor row = select_row(masks_flat, q);
      Tensor ce = bce_mask_loss(row, gt[j].mask);
      Tensor dc = dice_loss(row, gt[j].mask, dice_eps);
      layer_ce = layer_ce.defined() ? add(layer_ce, ce) : ce;
      layer_dice = layer_dice.defined() ? add(layer_dice, dc) : dc;
    }
    if (match.empty()) {
      layer_ce = Tensor::scalar(0.0);
      layer_dice = Tensor::scalar(0.0);
    } else {
      const double inv = 1.0 / static_cast<double>(match.size());
      layer_ce = mul_scalar(layer_ce, inv);
      layer_dice = mul_scalar(layer_dice, inv);
    }
    Tensor layer_cls =
        cls_loss(pred.class_logits, match, gt, n_classes, no_object_weight);

    out.breakdown.ce += layer_ce.value();
    out.breakdown.dice += layer_dice.value();
    out.breakdown.cls += layer_cls.value();

    Tensor layer_total = add(add(mul_scalar(layer_ce, w.lambda_ce),
                                 mul_scalar(layer_dice, w.lambda_dice)),
                             mul_scalar(layer_cls, w.lambda_cls));
    acc = acc.defined() ? add(acc, layer_total) : layer_total;
  }
  out.breakdown.total = w.lambda_ce * out.breakdown.ce +
                        w.lambda_dice * out.breakdown.dice +
                        w.lambda_cls * out.breakdown.cls;
  out.tensor = acc;
  return out;
}

}  // namespace cmf
