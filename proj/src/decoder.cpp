#include "spf/decoder.hpp"

#include <cmath>
#include <limits>

namespace spf {

namespace {

DiffTensor linear(const DiffTensor& x, const DiffTensor& w, const DiffTensor& b) {
  return add_row_broadcast(matmul(x, w), b);
}

AttentionParams init_attention(int dim, Rng& rng) {
  AttentionParams p;
  p.wq = DiffTensor::parameter(init_linear(dim, dim, rng));
  p.bq = DiffTensor::parameter(Matrix::Zero(1, dim));
  p.wk = DiffTensor::parameter(init_linear(dim, dim, rng));
  p.bk = DiffTensor::parameter(Matrix::Zero(1, dim));
  p.wv = DiffTensor::parameter(init_linear(dim, dim, rng));
  p.bv = DiffTensor::parameter(Matrix::Zero(1, dim));
  p.wo = DiffTensor::parameter(init_linear(dim, dim, rng));
  p.bo = DiffTensor::parameter(Matrix::Zero(1, dim));
  return p;
}

void append_attention(NamedParams& out, const std::string& prefix, const AttentionParams& p) {
  out.emplace_back(prefix + "wq", p.wq);
  out.emplace_back(prefix + "bq", p.bq);
  out.emplace_back(prefix + "wk", p.wk);
  out.emplace_back(prefix + "bk", p.bk);
  out.emplace_back(prefix + "wv", p.wv);
  out.emplace_back(prefix + "bv", p.bv);
  out.emplace_back(prefix + "wo", p.wo);
  out.emplace_back(prefix + "bo", p.bo);
}

}  // namespace

DecoderParams DecoderParams::init(const ModelConfig& cfg, Rng& rng) {
  if (cfg.embed_dim % cfg.heads != 0) {
    throw ContractError("embed_dim must be divisible by heads");
  }
  const int d = cfg.embed_dim;
  const int c = cfg.channels;
  DecoderParams p;
  {
    // Query embeddings: uniform with fan-in D for a sane scale.
    Matrix z(cfg.queries, d);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (Index i = 0; i < z.rows(); ++i)
      for (Index j = 0; j < z.cols(); ++j) z(i, j) = rng.uniform(-bound, bound);
    p.z0 = DiffTensor::parameter(std::move(z));
  }
  p.in_w = DiffTensor::parameter(init_linear(c, d, rng));
  p.in_b = DiffTensor::parameter(Matrix::Zero(1, d));
  p.mask_w1 = DiffTensor::parameter(init_linear(c, d, rng));
  p.mask_b1 = DiffTensor::parameter(Matrix::Zero(1, d));
  p.mask_w2 = DiffTensor::parameter(init_linear(d, d, rng));
  p.mask_b2 = DiffTensor::parameter(Matrix::Zero(1, d));
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& layer : p.layers) {
    layer.cross = init_attention(d, rng);
    layer.self = init_attention(d, rng);
    layer.ln1_g = DiffTensor::parameter(Matrix::Ones(1, d));
    layer.ln1_b = DiffTensor::parameter(Matrix::Zero(1, d));
    layer.ln2_g = DiffTensor::parameter(Matrix::Ones(1, d));
    layer.ln2_b = DiffTensor::parameter(Matrix::Zero(1, d));
    layer.ln3_g = DiffTensor::parameter(Matrix::Ones(1, d));
    layer.ln3_b = DiffTensor::parameter(Matrix::Zero(1, d));
    layer.ffn_w1 = DiffTensor::parameter(init_linear(d, cfg.ffn_width, rng));
    layer.ffn_b1 = DiffTensor::parameter(Matrix::Zero(1, cfg.ffn_width));
    layer.ffn_w2 = DiffTensor::parameter(init_linear(cfg.ffn_width, d, rng));
    layer.ffn_b2 = DiffTensor::parameter(Matrix::Zero(1, d));
  }
  p.cls_w1 = DiffTensor::parameter(init_linear(d, d, rng));
  p.cls_b1 = DiffTensor::parameter(Matrix::Zero(1, d));
  p.cls_w2 = DiffTensor::parameter(init_linear(d, cfg.num_classes + 1, rng));
  p.cls_b2 = DiffTensor::parameter(Matrix::Zero(1, cfg.num_classes + 1));
  p.score_w1 = DiffTensor::parameter(init_linear(d, d, rng));
  p.score_b1 = DiffTensor::parameter(Matrix::Zero(1, d));
  p.score_w2 = DiffTensor::parameter(init_linear(d, 1, rng));
  p.score_b2 = DiffTensor::parameter(Matrix::Zero(1, 1));
  p.mask_proj_w = DiffTensor::parameter(init_linear(d, d, rng));
  p.mask_proj_b = DiffTensor::parameter(Matrix::Zero(1, d));
  return p;
}

NamedParams DecoderParams::named_params(const std::string& prefix) const {
  NamedParams out;
  out.emplace_back(prefix + "z0", z0);
  out.emplace_back(prefix + "in_w", in_w);
  out.emplace_back(prefix + "in_b", in_b);
  out.emplace_back(prefix + "mask_w1", mask_w1);
  out.emplace_back(prefix + "mask_b1", mask_b1);
  out.emplace_back(prefix + "mask_w2", mask_w2);
  out.emplace_back(prefix + "mask_b2", mask_b2);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const std::string lp = prefix + "layer" + std::to_string(l) + ".";
    append_attention(out, lp + "cross.", layers[l].cross);
    append_attention(out, lp + "self.", layers[l].self);
    out.emplace_back(lp + "ln1_g", layers[l].ln1_g);
    out.emplace_back(lp + "ln1_b", layers[l].ln1_b);
    out.emplace_back(lp + "ln2_g", layers[l].ln2_g);
    out.emplace_back(lp + "ln2_b", layers[l].ln2_b);
    out.emplace_back(lp + "ln3_g", layers[l].ln3_g);
    out.emplace_back(lp + "ln3_b", layers[l].ln3_b);
    out.emplace_back(lp + "ffn_w1", layers[l].ffn_w1);
    out.emplace_back(lp + "ffn_b1", layers[l].ffn_b1);
    out.emplace_back(lp + "ffn_w2", layers[l].ffn_w2);
    out.emplace_back(lp + "ffn_b2", layers[l].ffn_b2);
  }
  out.emplace_back(prefix + "cls_w1", cls_w1);
  out.emplace_back(prefix + "cls_b1", cls_b1);
  out.emplace_back(prefix + "cls_w2", cls_w2);
  out.emplace_back(prefix + "cls_b2", cls_b2);
  out.emplace_back(prefix + "score_w1", score_w1);
  out.emplace_back(prefix + "score_b1", score_b1);
  out.emplace_back(prefix + "score_w2", score_w2);
  out.emplace_back(prefix + "score_b2", score_b2);
  out.emplace_back(prefix + "mask_proj_w", mask_proj_w);
  out.emplace_back(prefix + "mask_proj_b", mask_proj_b);
  return out;
}

DiffTensor mask_branch(const DecoderParams& params, const DiffTensor& superpoint_features) {
  DiffTensor h = relu(linear(superpoint_features, params.mask_w1, params.mask_b1));
  return linear(h, params.mask_w2, params.mask_b2);
}

Matrix build_attention_mask(const Matrix& mask_prev, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ContractError("build_attention_mask: tau not in (0,1)");
  const double neg_inf = -std::numeric_limits<double>::infinity();
  Matrix out(mask_prev.rows(), mask_prev.cols());
  for (Index i = 0; i < mask_prev.rows(); ++i) {
    for (Index j = 0; j < mask_prev.cols(); ++j) {
      out(i, j) = mask_prev(i, j) >= tau ? 0.0 : neg_inf;
    }
  }
  return out;
}

DiffTensor superpoint_cross_attention(const AttentionParams& p, int heads,
                                      const DiffTensor& z_prev, const DiffTensor& s_proj,
                                      const Matrix& add_mask, Matrix* attention_out) {
  const Index dim = z_prev.cols();
  if (dim % heads != 0) throw ContractError("attention: dim not divisible by heads");
  const Index hd = dim / heads;
  DiffTensor q = linear(z_prev, p.wq, p.bq);
  DiffTensor k = linear(s_proj, p.wk, p.bk);
  DiffTensor v = linear(s_proj, p.wv, p.bv);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(hd));

  if (attention_out != nullptr) {
    *attention_out = Matrix::Zero(z_prev.rows(), s_proj.rows());
  }
  std::vector<DiffTensor> head_outputs;
  head_outputs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    DiffTensor qh = slice_cols(q, h * hd, hd);
    DiffTensor kh = slice_cols(k, h * hd, hd);
    DiffTensor vh = slice_cols(v, h * hd, hd);
    DiffTensor logits = scale(matmul(qh, transpose(kh)), inv_sqrt_d);
    DiffTensor weights = masked_softmax_rows(logits, add_mask);
    if (attention_out != nullptr) {
      *attention_out += weights.value() / static_cast<double>(heads);
    }
    head_outputs.push_back(matmul(weights, vh));
  }
  DiffTensor merged = heads == 1 ? head_outputs.front() : concat_cols(head_outputs);
  return linear(merged, p.wo, p.bo);
}

namespace {

DiffTensor self_attention(const AttentionParams& p, int heads, const DiffTensor& z) {
  const Matrix no_mask = Matrix::Zero(z.rows(), z.rows());
  return superpoint_cross_attention(p, heads, z, z, no_mask);
}

DiffTensor ffn(const LayerParams& p, const DiffTensor& z) {
  return linear(relu(linear(z, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
}

}  // namespace

DiffTensor decoder_layer(const ModelConfig& cfg, const LayerParams& p, const DiffTensor& z_prev,
                         const DiffTensor& s_proj, const Matrix& add_mask,
                         Matrix* attention_out) {
  DiffTensor z = z_prev;
  if (cfg.cross_attention_first) {
    z = layer_norm(z + superpoint_cross_attention(p.cross, cfg.heads, z, s_proj, add_mask,
                                                  attention_out),
                   p.ln1_g, p.ln1_b);
    z = layer_norm(z + self_attention(p.self, cfg.heads, z), p.ln2_g, p.ln2_b);
  } else {
    z = layer_norm(z + self_attention(p.self, cfg.heads, z), p.ln2_g, p.ln2_b);
    z = layer_norm(z + superpoint_cross_attention(p.cross, cfg.heads, z, s_proj, add_mask,
                                                  attention_out),
                   p.ln1_g, p.ln1_b);
  }
  return layer_norm(z + ffn(p, z), p.ln3_g, p.ln3_b);
}

LayerPrediction prediction_head(const DecoderParams& params, const DiffTensor& z,
                                const DiffTensor& s_mask) {
  LayerPrediction pred;
  DiffTensor cls_hidden = relu(linear(z, params.cls_w1, params.cls_b1));
  pred.class_probs = softmax_rows(linear(cls_hidden, params.cls_w2, params.cls_b2));
  DiffTensor score_hidden = relu(linear(z, params.score_w1, params.score_b1));
  pred.scores = sigmoid(linear(score_hidden, params.score_w2, params.score_b2));
  DiffTensor z_proj = linear(z, params.mask_proj_w, params.mask_proj_b);
  pred.masks = sigmoid(matmul(z_proj, transpose(s_mask)));
  return pred;
}

DecoderOutput forward_decoder(const ModelConfig& cfg, const DecoderParams& params,
                              const SuperpointFeatures& superpoint_features,
                              const std::vector<Matrix>* fixed_attention_masks) {
  const DiffTensor& s = superpoint_features.features;
  const Index m = s.rows();
  DiffTensor s_proj = add_row_broadcast(matmul(s, params.in_w), params.in_b);
  DiffTensor s_mask = mask_branch(params, s);

  DecoderOutput out;
  DiffTensor z = params.z0;
  out.predictions.push_back(prediction_head(params, z, s_mask));
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    // A_{l-1} from the former head's masks, detached: the threshold is a
    // hard gate with no gradient.
    Matrix add_mask;
    if (fixed_attention_masks != nullptr) {
      add_mask = (*fixed_attention_masks)[l];
    } else if (cfg.use_attention_mask) {
      add_mask = build_attention_mask(out.predictions.back().masks.value(), cfg.tau);
    } else {
      add_mask = Matrix::Zero(cfg.queries, m);
    }
    Matrix attn;
    z = decoder_layer(cfg, params.layers[l], z, s_proj, add_mask, &attn);
    out.attention_weights.push_back(std::move(attn));
    out.predictions.push_back(prediction_head(params, z, s_mask));
  }
  return out;
}

}  // namespace spf
