#pragma once

#include "spf/backbone.hpp"
#include "spf/tensor.hpp"

#include <string>
#include <vector>

namespace spf {

/// Model hyperparameters shared by backbone, decoder and losses.
struct ModelConfig {
  int hidden = 64;      // backbone H
  int channels = 32;    // C
  int embed_dim = 32;   // D
  int heads = 4;
  int ffn_width = 64;
  int layers = 3;       // L
  int queries = 20;     // K
  int num_classes = 4;
  double tau = 0.5;
  // Ablation toggles.
  bool use_attention_mask = true;
  bool cross_attention_first = true;
  bool iterative_prediction = true;
};

struct AttentionParams {
  DiffTensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerParams {
  AttentionParams cross;
  AttentionParams self;
  DiffTensor ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
  DiffTensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct DecoderParams {
  DiffTensor z0;                 // [K x D] learned query embeddings
  DiffTensor in_w, in_b;         // superpoint feature projection C -> D
  DiffTensor mask_w1, mask_b1;   // mask branch C -> D
  DiffTensor mask_w2, mask_b2;
  std::vector<LayerParams> layers;
  // Shared prediction head.
  DiffTensor cls_w1, cls_b1, cls_w2, cls_b2;      // D -> D -> N_class+1
  DiffTensor score_w1, score_b1, score_w2, score_b2;  // D -> D -> 1
  DiffTensor mask_proj_w, mask_proj_b;            // D -> D, applied to Z before Z'.S_mask^T

  static DecoderParams init(const ModelConfig& cfg, Rng& rng);
  NamedParams named_params(const std::string& prefix = "decoder.") const;
};

/// One head's output for all K queries: class probabilities (rows sum to 1),
/// IoU-aware scores in [0,1], superpoint masks in [0,1].
struct LayerPrediction {
  DiffTensor class_probs;  // [K x (N_class+1)]
  DiffTensor scores;       // [K x 1]
  DiffTensor masks;        // [K x M]
};

struct DecoderOutput {
  std::vector<LayerPrediction> predictions;  // L+1 entries, head 0 from Z0
  // Head-averaged cross-attention weights per layer, [K x M] each.
  std::vector<Matrix> attention_weights;
};

DiffTensor mask_branch(const DecoderParams& params, const DiffTensor& superpoint_features);

/// Additive {0, -inf} gate: 0 where mask_prev >= tau.
Matrix build_attention_mask(const Matrix& mask_prev, double tau);

DiffTensor superpoint_cross_attention(const AttentionParams& p, int heads,
                                      const DiffTensor& z_prev, const DiffTensor& s_proj,
                                      const Matrix& add_mask,
                                      Matrix* attention_out = nullptr);

DiffTensor decoder_layer(const ModelConfig& cfg, const LayerParams& p, const DiffTensor& z_prev,
                         const DiffTensor& s_proj, const Matrix& add_mask,
                         Matrix* attention_out = nullptr);

LayerPrediction prediction_head(const DecoderParams& params, const DiffTensor& z,
                                const DiffTensor& s_mask);

/// fixed_attention_masks, when given, supplies A_{l-1} per layer instead of
/// thresholding the previous head's masks (the gate is a constant in the
/// backward pass either way; the gradient oracle holds it fixed forward too).
DecoderOutput forward_decoder(const ModelConfig& cfg, const DecoderParams& params,
                              const SuperpointFeatures& superpoint_features,
                              const std::vector<Matrix>* fixed_attention_masks = nullptr);

}  // namespace spf
