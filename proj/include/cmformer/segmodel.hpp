#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cmformer/cma.hpp"
#include "cmformer/pixelnet.hpp"
#include "cmformer/tensor.hpp"

namespace cmf {

struct QuerySet {
  Tensor x0;     // [N x d] learned query features
  Tensor q_pos;  // [N x d] learned positional embeddings

  std::size_t n_queries() const { return x0.dim(0); }
};

struct LayerPrediction {
  Tensor class_logits;  // [N x (K+1)], last column = no-object
  Tensor mask_logits;   // [N x (H/4) x (W/4)]
};

struct DecoderConfig {
  std::size_t n_layers = 9;
  std::vector<int> resolution_schedule{32, 16, 8, 32, 16, 8, 32, 16, 8};
  std::map<int, bool> enhancement{{32, true}, {16, true}, {8, true}};

  void validate() const;
  bool any_enhanced() const;
};

struct HeadParams {
  Tensor cls_w, cls_b;              // [d x (K+1)], [K+1]
  Tensor m1_w, m1_b, m2_w, m2_b, m3_w, m3_b;  // 3-layer mask-embed MLP
};

struct ModelConfig {
  std::size_t n_classes = 6;
  std::size_t n_queries = 20;
  std::size_t width = 32;
  std::size_t attn_heads = 1;  // only 1 supported
  bool share_query_proj = false;
  DecoderConfig decoder;

  void validate() const;
};

// class logits from an affine head; mask logits as the dot product between a
// 3-layer MLP embedding of each query and the per-pixel mask features.
LayerPrediction predict_heads(const Tensor& x, const Tensor& mask_features,
                              const HeadParams& p);

// Per-pixel class scores sum_i p_i(c) * sigmoid(m_i(p)) over real classes;
// argmax with ties broken toward the lowest class index, then nearest
// upsampling by `upscale`.
std::vector<std::uint8_t> semantic_inference(const LayerPrediction& pred,
                                             std::size_t upscale = 4);

class Model {
 public:
  ModelConfig cfg;
  PixelNetParams pixel;
  QuerySet queries;
  std::vector<CmaLayerParams> layers;
  HeadParams heads;

  static Model init(const ModelConfig& cfg, std::uint64_t seed);

  // Fixed registry order; shared tensors appear once.
  std::vector<std::pair<std::string, Tensor>> named_params();
  std::size_t param_count();

  struct ForwardResult {
    FeaturePyramid pyramid;
    Tensor mask_features;                    // [(H/4) x (W/4) x d]
    std::vector<LayerPrediction> predictions;  // initial + one per layer
  };

  ForwardResult forward(const Tensor& image) const;

  // (x0, x0_d, initial prediction); both streams start from the same
  // learned queries.
  std::tuple<Tensor, Tensor, LayerPrediction> init_queries(
      const Tensor& mask_features) const;
};

}  // namespace cmf
