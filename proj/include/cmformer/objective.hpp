#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cmformer/segmodel.hpp"
#include "cmformer/tensor.hpp"

namespace cmf {

// One ground-truth segment at mask resolution (quarter of the input).
struct GtSegment {
  std::size_t class_id = 0;
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> mask;  // 0/1, at least one positive pixel
};

struct MatchWeights {
  double lambda_ce = 5.0;
  double lambda_dice = 5.0;
  double lambda_cls = 2.0;
};

// Loss terms summed over supervised layers; total is their weighted
// combination.
struct LossBreakdown {
  double ce = 0.0;
  double dice = 0.0;
  double cls = 0.0;
  double total = 0.0;
  MatchWeights weights;
};

struct TotalLoss {
  Tensor tensor;  // scalar, differentiable
  LossBreakdown breakdown;
};

// Nearest-neighbor label downsample (src index = dst index * factor).
std::vector<std::uint8_t> downsample_labels(
    const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w,
    std::size_t factor);

// Decompose a quarter-resolution label map into per-class binary segments.
// Ignore pixels (255) belong to no segment.
std::vector<GtSegment> segments_from_labels(
    const std::vector<std::uint8_t>& labels_q, std::size_t h, std::size_t w,
    std::size_t n_classes);

// cost[i][j] = lambda_cls * (-p_i(class_j)) + lambda_ce * BCE(mask_i, gt_j)
//            + lambda_dice * Dice(mask_i, gt_j); gradient-free.
std::vector<std::vector<double>> build_match_cost(
    const LayerPrediction& pred, const std::vector<GtSegment>& gt,
    const MatchWeights& w, double dice_eps = 1.0);

// Minimum-cost assignment of gt columns to query rows (N >= M). Returns
// (query, gt) pairs ordered by gt index; among equal-cost optima the
// lexicographically smallest pair sequence wins.
std::vector<std::pair<std::size_t, std::size_t>> hungarian_match(
    const std::vector<std::vector<double>>& cost);

// 1 - (2 sum(sig(x) t) + eps) / (sum(sig(x)) + sum(t) + eps)
Tensor dice_loss(const Tensor& pred_logits,
                 const std::vector<std::uint8_t>& target, double eps = 1.0);

// Mean stable binary cross entropy in logit form.
Tensor bce_mask_loss(const Tensor& pred_logits,
                     const std::vector<std::uint8_t>& target);

// Cross entropy over all N queries: matched queries target their class,
// unmatched target no-object with the given down-weight; normalized by N.
Tensor cls_loss(const Tensor& class_logits,
                const std::vector<std::pair<std::size_t, std::size_t>>& match,
                const std::vector<GtSegment>& gt, std::size_t n_classes,
                double no_object_weight = 0.1);

// Deep-supervised Eq-style objective over every prediction in `preds`:
// match per layer, then lambda_ce*ce + lambda_dice*dice + lambda_cls*cls.
TotalLoss total_loss(const std::vector<LayerPrediction>& preds,
                     const std::vector<GtSegment>& gt, const MatchWeights& w,
                     double no_object_weight = 0.1, double dice_eps = 1.0);

}  // namespace cmf
