#pragma once

// Multi-task objective: cosine-similarity reconstruction for count views and
// the source/destination transition cross-entropy for the mobility view.
// Target matrices are precomputed in double and enter the tape as constants.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "hafusion/dataset.hpp"
#include "hafusion/init.hpp"
#include "hafusion/ops.hpp"
#include "hafusion/warnings.hpp"

namespace hafusion::model {

inline constexpr double kLogEps = 1e-12;

template <typename T>
struct LossHead {
  Parameter<T> w, b;  // d -> d, followed by ReLU

  static LossHead init(const std::string& prefix, std::size_t d, Rng& rng) {
    LossHead h;
    h.w = glorot<T>(prefix + ".W", {d, d}, d, d, rng);
    h.b = constant_param<T>(prefix + ".b", {d}, T(0));
    return h;
  }

  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
VarId loss_head_forward(Tape<T>& t, LossHead<T>& head, VarId h) {
  return ops::relu(t, ops::linear(t, h, t.leaf(head.w), t.leaf(head.b)));
}

// Pairwise cosine similarities between raw feature rows of one view. Constant
// during training (the target side of the similarity loss carries no
// gradient).
inline Tensor<double> cosine_target_matrix(const Tensor<double>& features, double eps) {
  const std::size_t n = features.rows(), f = features.cols();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < f; ++j) s += features.at2(i, j) * features.at2(i, j);
    norms[i] = std::max(std::sqrt(s), eps);
  }
  Tensor<double> out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < f; ++j) dot += features.at2(i, j) * features.at2(k, j);
      out.at2(i, k) = dot / (norms[i] * norms[k]);
    }
  }
  return out;
}

// L^j: mean over all ordered region pairs (including i = k) of
// |cos(x_i, x_k) - h_i . h_k| with H^j = head(H).
template <typename T>
VarId feature_similarity_loss(Tape<T>& t, VarId h, LossHead<T>& head, VarId cos_target) {
  VarId hj = loss_head_forward(t, head, h);
  VarId gram = ops::matmul(t, hj, ops::transpose(t, hj));
  return ops::reduce_mean_all(t, ops::abs(t, ops::sub(t, gram, cos_target)));
}

struct TransitionTables {
  Tensor<double> p_s;  // rows: destination distribution per source
  Tensor<double> p_d;  // columns: source distribution per destination
  std::vector<std::size_t> zero_outflow_rows;
  std::vector<std::size_t> zero_inflow_cols;
};

// Eq-style row/column normalization of the mobility matrix. Sources with no
// outflow (and destinations with no inflow) yield all-zero slices that are
// flagged and contribute nothing to the loss.
inline TransitionTables mobility_transitions(const Tensor<double>& m) {
  if (m.rank() != 2 || m.rows() != m.cols()) {
    throw ShapeError("mobility_transitions: expected a square matrix");
  }
  const std::size_t n = m.rows();
  TransitionTables tb;
  tb.p_s = Tensor<double>({n, n});
  tb.p_d = Tensor<double>({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    double rowsum = 0.0;
    for (std::size_t k = 0; k < n; ++k) rowsum += m.at2(i, k);
    if (rowsum == 0.0) {
      tb.zero_outflow_rows.push_back(i);
      warn("mobility_transitions.zero_outflow");
      continue;
    }
    for (std::size_t k = 0; k < n; ++k) tb.p_s.at2(i, k) = m.at2(i, k) / rowsum;
  }
  for (std::size_t k = 0; k < n; ++k) {
    double colsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) colsum += m.at2(i, k);
    if (colsum == 0.0) {
      tb.zero_inflow_cols.push_back(k);
      warn("mobility_transitions.zero_inflow");
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) tb.p_d.at2(i, k) = m.at2(i, k) / colsum;
  }
  return tb;
}

// The attainable minimum of the mobility loss: the summed entropies of the
// p_s rows and p_d columns (Gibbs' inequality).
inline double mobility_entropy_floor(const TransitionTables& tb) {
  double floor = 0.0;
  for (std::size_t i = 0; i < tb.p_s.numel(); ++i) {
    const double p = tb.p_s[i];
    if (p > 0.0) floor -= p * std::log(p);
  }
  for (std::size_t i = 0; i < tb.p_d.numel(); ++i) {
    const double p = tb.p_d[i];
    if (p > 0.0) floor -= p * std::log(p);
  }
  return floor;
}

// Cross-entropy of the model transition estimates against the tables, with
// scores given directly: p_hat_s = row softmax, p_hat_d = column softmax of
// the same score matrix.
template <typename T>
VarId mobility_kl_from_scores(Tape<T>& t, VarId scores, VarId p_s_const, VarId p_d_const) {
  VarId log_ps = ops::log_shifted(t, ops::softmax(t, scores, 1), kLogEps);
  VarId log_pd = ops::log_shifted(t, ops::softmax(t, scores, 0), kLogEps);
  VarId term_s = ops::reduce_sum_all(t, ops::mul(t, p_s_const, log_ps));
  VarId term_d = ops::reduce_sum_all(t, ops::mul(t, p_d_const, log_pd));
  return ops::scale(t, ops::add(t, term_s, term_d), -1.0);
}

// L^M with scores h^S_i . h^D_k from the two mobility heads.
template <typename T>
VarId mobility_kl_loss(Tape<T>& t, VarId h, LossHead<T>& src_head, LossHead<T>& dst_head,
                       VarId p_s_const, VarId p_d_const) {
  VarId hs = loss_head_forward(t, src_head, h);
  VarId hd = loss_head_forward(t, dst_head, h);
  VarId scores = ops::matmul(t, hs, ops::transpose(t, hd));
  return mobility_kl_from_scores(t, scores, p_s_const, p_d_const);
}

}  // namespace hafusion::model
