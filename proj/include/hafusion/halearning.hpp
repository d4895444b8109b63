#pragma once

// Hybrid attentive feature learning: per-view IntraAFL stacks built from
// RegionSA layers (self-attention plus a convolutional correlation branch over
// the coefficient matrix), a shared InterAFL stack whose first feedforward
// weight acts as a memory unit of d_m representative embeddings, and the
// learnable combination weight between the two.

#include <cstddef>
#include <string>
#include <vector>

#include "hafusion/attention.hpp"
#include "hafusion/init.hpp"
#include "hafusion/ops.hpp"

namespace hafusion::model {

template <typename T>
struct RegionSALayer {
  AttentionBlock<T> attn;
  Parameter<T> conv_kernels;  // c x 1 x k x k, applied to the head-averaged A_sv
  Parameter<T> corr_w, corr_b;  // maps each length-n correlation row to d
  FeedForward<T> ffn;
  LayerNormParams<T> ln1, ln2;
  std::size_t conv_kernel = 3;

  static RegionSALayer init(const std::string& prefix, std::size_t n, std::size_t d,
                            std::size_t heads, std::size_t channels, std::size_t kernel,
                            Rng& rng) {
    RegionSALayer l;
    l.attn = AttentionBlock<T>::init(prefix, d, heads, rng);
    l.conv_kernels = glorot<T>(prefix + ".conv", {channels, 1, kernel, kernel}, kernel * kernel,
                               channels * kernel * kernel, rng);
    l.corr_w = glorot<T>(prefix + ".corr.W", {n, d}, n, d, rng);
    l.corr_b = constant_param<T>(prefix + ".corr.b", {d}, T(0));
    l.ffn = FeedForward<T>::init(prefix + ".mlp", d, 2 * d, rng);
    l.ln1 = LayerNormParams<T>::init(prefix + ".ln1", d);
    l.ln2 = LayerNormParams<T>::init(prefix + ".ln2", d);
    l.conv_kernel = kernel;
    return l;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    attn.collect(out);
    out.push_back(&conv_kernels);
    out.push_back(&corr_w);
    out.push_back(&corr_b);
    ffn.collect(out);
    ln1.collect(out);
    ln2.collect(out);
  }
};

template <typename T>
struct RegionSAResult {
  VarId out;        // C = C_V + C_A, [n x d]
  VarId c_v;        // attention path alone
  VarId attn_mean;  // A_sv, [n x n]
  VarId conv_corr;  // A', [c x n x n]
  std::vector<VarId> head_attn;
};

// RegionSA: multi-head attention gives C_V and the coefficient matrix A_sv;
// the correlation branch computes A' = AvgPool(Conv2D(A_sv)) and
// C_A = MLP(AVG(A' . Softmax(A'))), and the output is C_V + C_A.
template <typename T>
RegionSAResult<T> region_sa(Tape<T>& t, RegionSALayer<T>& layer, VarId x) {
  const std::size_t n = t.val(x).rows();
  MhaResult<T> mha = multi_head_attention(t, layer.attn, x);
  RegionSAResult<T> res;
  res.c_v = mha.out;
  res.attn_mean = mha.attn_mean;
  res.head_attn = std::move(mha.head_attn);

  const std::size_t k = layer.conv_kernel;
  const std::size_t pad = (k - 1) / 2;
  VarId a3 = ops::reshape(t, res.attn_mean, {1, n, n});
  VarId conv = ops::conv2d(t, a3, t.leaf(layer.conv_kernels), pad, 1);
  VarId pooled = ops::avg_pool2d(t, conv, k, pad, 1);  // A', spatial dims preserved
  res.conv_corr = pooled;
  VarId weighted = ops::mul(t, pooled, ops::softmax(t, pooled, 2));
  VarId channel_avg = ops::reduce_mean_axis(t, weighted, 0);  // [n x n]
  VarId c_a = ops::linear(t, channel_avg, t.leaf(layer.corr_w), t.leaf(layer.corr_b));
  res.out = ops::add(t, res.c_v, c_a);
  return res;
}

template <typename T>
struct IntraAFLStack {
  Parameter<T> input_w, input_b;  // f -> d projection
  std::vector<RegionSALayer<T>> layers;

  static IntraAFLStack init(const std::string& prefix, std::size_t n, std::size_t f,
                            std::size_t d, std::size_t num_layers, std::size_t heads,
                            std::size_t channels, std::size_t kernel, Rng& rng) {
    IntraAFLStack s;
    s.input_w = glorot<T>(prefix + ".input.W", {f, d}, f, d, rng);
    s.input_b = constant_param<T>(prefix + ".input.b", {d}, T(0));
    for (std::size_t l = 0; l < num_layers; ++l) {
      s.layers.push_back(RegionSALayer<T>::init(prefix + ".layer" + std::to_string(l), n, d,
                                                heads, channels, kernel, rng));
    }
    return s;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&input_w);
    out.push_back(&input_b);
    for (auto& l : layers) l.collect(out);
  }
};

template <typename T>
struct IntraDiag {
  std::vector<RegionSAResult<T>> layer_results;
};

template <typename T>
VarId intra_afl_forward(Tape<T>& t, IntraAFLStack<T>& stack, VarId x_view, double dropout_rate,
                        double ln_eps, Mode mode, Rng* rng, IntraDiag<T>* diag = nullptr) {
  VarId z = ops::linear(t, x_view, t.leaf(stack.input_w), t.leaf(stack.input_b));
  for (auto& layer : stack.layers) {
    RegionSAResult<T> sa = region_sa(t, layer, z);
    VarId after_attn = residual_norm(t, z, sa.out, layer.ln1, dropout_rate, ln_eps, mode, rng);
    VarId mlp_out = feed_forward(t, layer.ffn, after_attn);
    z = residual_norm(t, after_attn, mlp_out, layer.ln2, dropout_rate, ln_eps, mode, rng);
    if (diag) diag->layer_results.push_back(std::move(sa));
  }
  return z;
}

template <typename T>
struct InterAFLLayer {
  Parameter<T> memory_w;      // d x d_m; columns are the representative embeddings
  Parameter<T> out_w, out_b;  // d_m -> d

  static InterAFLLayer init(const std::string& prefix, std::size_t d, std::size_t d_m, Rng& rng) {
    InterAFLLayer l;
    l.memory_w = glorot<T>(prefix + ".memory.W", {d, d_m}, d, d_m, rng);
    l.out_w = glorot<T>(prefix + ".out.W", {d_m, d}, d_m, d, rng);
    l.out_b = constant_param<T>(prefix + ".out.b", {d}, T(0));
    return l;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&memory_w);
    out.push_back(&out_w);
    out.push_back(&out_b);
  }
};

// Per layer: A_cv = Z . W_mem in [n x v x d_m]; Softmax over the view axis,
// L1 normalization over the memory axis, then the second feedforward back to
// d. Layers do not share weights.
template <typename T>
VarId inter_afl_forward(Tape<T>& t, std::vector<InterAFLLayer<T>>& layers, VarId z_all) {
  VarId z = z_all;
  for (auto& layer : layers) {
    VarId coeff = ops::linear(t, z, t.leaf(layer.memory_w));
    VarId view_norm = ops::softmax(t, coeff, 1);
    VarId mem_norm = ops::l1_normalize(t, view_norm, 2);
    z = ops::linear(t, mem_norm, t.leaf(layer.out_w), t.leaf(layer.out_b));
  }
  return z;
}

template <typename T>
struct ViewCombiner {
  Parameter<T> raw_b;  // beta = sigmoid(raw_b), so beta stays inside (0,1)

  static ViewCombiner init(Rng&) {
    ViewCombiner c;
    c.raw_b = Parameter<T>("combine.b", Tensor<T>::scalar(T(0)));
    return c;
  }

  void collect(std::vector<Parameter<T>*>& out) { out.push_back(&raw_b); }
};

template <typename T>
struct CombineResult {
  std::vector<VarId> z_views;  // per-view [n x d]
  VarId beta;                  // scalar in (0,1)
};

// Z^j = beta * Z_sv^j + (1 - beta) * Z_cv^j with one global beta.
template <typename T>
CombineResult<T> combine_views(Tape<T>& t, VarId z_sv_all, VarId z_cv_all,
                               ViewCombiner<T>& combiner) {
  if (!(t.val(z_sv_all).shape() == t.val(z_cv_all).shape())) {
    throw ShapeError("combine_views: shape mismatch");
  }
  CombineResult<T> res;
  res.beta = ops::sigmoid(t, t.leaf(combiner.raw_b));
  VarId one_minus = ops::affine(t, res.beta, -1.0, 1.0);
  VarId mixed = ops::add(t, ops::scale_by(t, res.beta, z_sv_all),
                         ops::scale_by(t, one_minus, z_cv_all));
  const std::size_t v = t.val(mixed).extent(1);
  for (std::size_t j = 0; j < v; ++j) res.z_views.push_back(ops::take_view(t, mixed, j));
  return res;
}

}  // namespace hafusion::model
