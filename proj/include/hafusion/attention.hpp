#pragma once

// Multi-head self-attention over regions plus the residual/layer-norm/MLP
// pattern shared by the intra-view encoder and the region fusion encoder.

#include <cstddef>
#include <string>
#include <vector>

#include "hafusion/init.hpp"
#include "hafusion/ops.hpp"
#include "hafusion/tape.hpp"

namespace hafusion::model {

enum class Mode { train, eval };

template <typename T>
struct AttentionBlock {
  Parameter<T> wq, wk, wv, wo;  // all d x d, no biases
  std::size_t heads = 1;

  static AttentionBlock init(const std::string& prefix, std::size_t d, std::size_t heads,
                             Rng& rng) {
    AttentionBlock b;
    b.wq = glorot<T>(prefix + ".Wq", {d, d}, d, d, rng);
    b.wk = glorot<T>(prefix + ".Wk", {d, d}, d, d, rng);
    b.wv = glorot<T>(prefix + ".Wv", {d, d}, d, d, rng);
    b.wo = glorot<T>(prefix + ".Wo", {d, d}, d, d, rng);
    b.heads = heads;
    return b;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&wq);
    out.push_back(&wk);
    out.push_back(&wv);
    out.push_back(&wo);
  }
};

template <typename T>
struct FeedForward {
  Parameter<T> w1, b1, w2, b2;  // d -> hidden -> d

  static FeedForward init(const std::string& prefix, std::size_t d, std::size_t hidden, Rng& rng) {
    FeedForward f;
    f.w1 = glorot<T>(prefix + ".W1", {d, hidden}, d, hidden, rng);
    f.b1 = constant_param<T>(prefix + ".b1", {hidden}, T(0));
    f.w2 = glorot<T>(prefix + ".W2", {hidden, d}, hidden, d, rng);
    f.b2 = constant_param<T>(prefix + ".b2", {d}, T(0));
    return f;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w1);
    out.push_back(&b1);
    out.push_back(&w2);
    out.push_back(&b2);
  }
};

template <typename T>
struct LayerNormParams {
  Parameter<T> gain, shift;

  static LayerNormParams init(const std::string& prefix, std::size_t d) {
    LayerNormParams p;
    p.gain = constant_param<T>(prefix + ".gain", {d}, T(1));
    p.shift = constant_param<T>(prefix + ".shift", {d}, T(0));
    return p;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gain);
    out.push_back(&shift);
  }
};

template <typename T>
struct MhaResult {
  VarId out;                    // [n x d] after the output projection
  VarId attn_mean;              // [n x n] coefficients averaged over heads
  std::vector<VarId> head_attn;  // per-head [n x n], each row-stochastic
};

// Scaled dot-product attention with per-head scaling sqrt(d/heads); heads are
// column slices of the projected matrices, concatenated and recombined by Wo.
template <typename T>
MhaResult<T> multi_head_attention(Tape<T>& t, AttentionBlock<T>& blk, VarId x,
                                  VarId wq_leaf, VarId wk_leaf, VarId wv_leaf, VarId wo_leaf) {
  const std::size_t d = t.val(x).cols();
  const std::size_t h = blk.heads;
  if (d % h != 0) throw ConfigError("attention: d must be divisible by the head count");
  const std::size_t dh = d / h;
  VarId q = ops::linear(t, x, wq_leaf);
  VarId k = ops::linear(t, x, wk_leaf);
  VarId v = ops::linear(t, x, wv_leaf);
  MhaResult<T> res;
  std::vector<VarId> head_outs;
  VarId attn_sum = 0;
  for (std::size_t i = 0; i < h; ++i) {
    VarId qh = ops::slice_cols(t, q, i * dh, dh);
    VarId kh = ops::slice_cols(t, k, i * dh, dh);
    VarId vh = ops::slice_cols(t, v, i * dh, dh);
    VarId scores =
        ops::scale(t, ops::matmul(t, qh, ops::transpose(t, kh)), 1.0 / std::sqrt(double(dh)));
    VarId attn = ops::softmax(t, scores, 1);
    res.head_attn.push_back(attn);
    head_outs.push_back(ops::matmul(t, attn, vh));
    attn_sum = i == 0 ? attn : ops::add(t, attn_sum, attn);
  }
  res.attn_mean = ops::scale(t, attn_sum, 1.0 / static_cast<double>(h));
  res.out = ops::linear(t, ops::concat_cols(t, head_outs), wo_leaf);
  return res;
}

// Convenience overload that binds the block's parameters as leaves.
template <typename T>
MhaResult<T> multi_head_attention(Tape<T>& t, AttentionBlock<T>& blk, VarId x) {
  return multi_head_attention(t, blk, x, t.leaf(blk.wq), t.leaf(blk.wk), t.leaf(blk.wv),
                              t.leaf(blk.wo));
}

template <typename T>
VarId feed_forward(Tape<T>& t, FeedForward<T>& f, VarId x) {
  VarId h = ops::relu(t, ops::linear(t, x, t.leaf(f.w1), t.leaf(f.b1)));
  return ops::linear(t, h, t.leaf(f.w2), t.leaf(f.b2));
}

// LayerNorm(residual + Dropout(sublayer)).
template <typename T>
VarId residual_norm(Tape<T>& t, VarId residual, VarId sublayer, LayerNormParams<T>& ln,
                    double dropout_rate, double eps, Mode mode, Rng* rng) {
  VarId dropped = ops::dropout(t, sublayer, dropout_rate, mode == Mode::train, rng);
  return ops::layer_norm(t, ops::add(t, residual, dropped), t.leaf(ln.gain), t.leaf(ln.shift), eps);
}

}  // namespace hafusion::model
