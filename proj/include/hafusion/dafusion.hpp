#pragma once

// Dual-feature attentive fusion. ViewFusion scores every ordered view pair per
// region with a shared attention vector and fuses the view embeddings with the
// softmax-normalized weights; RegionFusion is a stack of post-norm transformer
// encoder layers over the fused matrix.

#include <cstddef>
#include <string>
#include <vector>

#include "hafusion/attention.hpp"
#include "hafusion/init.hpp"
#include "hafusion/ops.hpp"

namespace hafusion::model {

template <typename T>
struct ViewFusionParams {
  Parameter<T> w_f;       // d' x d
  Parameter<T> attn_vec;  // 2d'
  double leaky_slope = 0.2;

  static ViewFusionParams init(std::size_t d, std::size_t d_prime, double slope, Rng& rng) {
    ViewFusionParams p;
    p.w_f = glorot<T>("viewfusion.WF", {d_prime, d}, d, d_prime, rng);
    p.attn_vec = glorot<T>("viewfusion.a", {2 * d_prime}, 2 * d_prime, 1, rng);
    p.leaky_slope = slope;
    return p;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w_f);
    out.push_back(&attn_vec);
  }
};

template <typename T>
struct ViewFusionResult {
  VarId z_tilde;  // [n x d]
  VarId alpha;    // [v], positive, sums to one
};

// a^jk_i = LeakyReLU(a . (W_F z^j_i || W_F z^k_i)) for every ordered pair
// including k = j; per-view scores are (1/n) sum_i sum_k a^jk_i, softmaxed
// into alpha; the fused matrix is sum_j alpha_j Z^j.
template <typename T>
ViewFusionResult<T> view_fusion(Tape<T>& t, ViewFusionParams<T>& params,
                                const std::vector<VarId>& z_views) {
  if (z_views.empty()) throw ShapeError("view_fusion: needs at least one view");
  const std::size_t v = z_views.size();
  const std::size_t n = t.val(z_views[0]).rows();
  const std::size_t d_prime = t.val(params.w_f).rows();

  VarId wf_t = ops::transpose(t, t.leaf(params.w_f));  // d x d'
  VarId a_leaf = t.leaf(params.attn_vec);
  VarId a_row = ops::reshape(t, a_leaf, {1, 2 * d_prime});
  VarId a_first = ops::transpose(t, ops::slice_cols(t, a_row, 0, d_prime));        // d' x 1
  VarId a_second = ops::transpose(t, ops::slice_cols(t, a_row, d_prime, d_prime));  // d' x 1

  std::vector<VarId> left, right;  // per view: [n x 1] projections against a
  for (VarId z : z_views) {
    VarId f = ops::matmul(t, z, wf_t);  // n x d'
    left.push_back(ops::matmul(t, f, a_first));
    right.push_back(ops::matmul(t, f, a_second));
  }

  std::vector<VarId> scores;
  for (std::size_t j = 0; j < v; ++j) {
    VarId total = 0;
    for (std::size_t k = 0; k < v; ++k) {
      VarId pair = ops::leaky_relu(t, ops::add(t, left[j], right[k]), params.leaky_slope);
      VarId summed = ops::reduce_sum_all(t, pair);
      total = k == 0 ? summed : ops::add(t, total, summed);
    }
    scores.push_back(ops::scale(t, total, 1.0 / static_cast<double>(n)));
  }

  ViewFusionResult<T> res;
  res.alpha = ops::softmax(t, ops::stack_scalars(t, scores), 0);
  VarId fused = 0;
  for (std::size_t j = 0; j < v; ++j) {
    VarId weighted = ops::scale_by(t, ops::pick(t, res.alpha, j), z_views[j]);
    fused = j == 0 ? weighted : ops::add(t, fused, weighted);
  }
  res.z_tilde = fused;
  return res;
}

template <typename T>
using RegionFusionLayer = AttentionBlock<T>;

template <typename T>
struct TransformerLayer {
  AttentionBlock<T> attn;
  FeedForward<T> ffn;
  LayerNormParams<T> ln1, ln2;

  static TransformerLayer init(const std::string& prefix, std::size_t d, std::size_t heads,
                               Rng& rng) {
    TransformerLayer l;
    l.attn = AttentionBlock<T>::init(prefix, d, heads, rng);
    l.ffn = FeedForward<T>::init(prefix + ".mlp", d, 2 * d, rng);
    l.ln1 = LayerNormParams<T>::init(prefix + ".ln1", d);
    l.ln2 = LayerNormParams<T>::init(prefix + ".ln2", d);
    return l;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    attn.collect(out);
    ffn.collect(out);
    ln1.collect(out);
    ln2.collect(out);
  }
};

template <typename T>
struct RegionFusionDiag {
  std::vector<std::vector<VarId>> head_attn;  // [layer][head], each [n x n]
};

template <typename T>
VarId region_fusion_forward(Tape<T>& t, std::vector<TransformerLayer<T>>& layers, VarId z_tilde,
                            double dropout_rate, double ln_eps, Mode mode, Rng* rng,
                            RegionFusionDiag<T>* diag = nullptr) {
  VarId h = z_tilde;
  for (auto& layer : layers) {
    MhaResult<T> mha = multi_head_attention(t, layer.attn, h);
    if (diag) diag->head_attn.push_back(mha.head_attn);
    VarId after_attn = residual_norm(t, h, mha.out, layer.ln1, dropout_rate, ln_eps, mode, rng);
    VarId mlp_out = feed_forward(t, layer.ffn, after_attn);
    h = residual_norm(t, after_attn, mlp_out, layer.ln2, dropout_rate, ln_eps, mode, rng);
  }
  return h;
}

}  // namespace hafusion::model
