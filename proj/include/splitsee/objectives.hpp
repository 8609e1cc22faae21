#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>

#include "splitsee/autograd.hpp"
#include "splitsee/layers.hpp"

namespace splitsee {

// InfoNCE ---------------------------------------------------------------------

struct InfoNceResult {
  double loss = 0.0;
  Matrix<double> grad_pred;        // 1 x D
  Matrix<double> grad_candidates;  // b x D
};

/// -log softmax_pos(candidates * pred / tau) with gradients for both inputs.
inline InfoNceResult info_nce(const Matrix<double>& pred, const Matrix<double>& candidates, Index pos_index,
                              double tau) {
  if (candidates.rows() < 1) {
    throw std::invalid_argument("info_nce: need at least one candidate");
  }
  if (pos_index < 0 || pos_index >= candidates.rows()) {
    throw std::invalid_argument("info_nce: positive index " + std::to_string(pos_index) + " out of range");
  }
  if (!(tau > 0.0)) {
    throw std::invalid_argument("info_nce: temperature must be positive");
  }
  if (pred.rows() != 1 || pred.cols() != candidates.cols()) {
    throw std::invalid_argument("info_nce: prediction must be 1 x D with D matching the candidates");
  }
  Tape<double> t;
  Var<double> p = t.input(pred);
  Var<double> c = t.input(candidates);
  Matrix<double> target = Matrix<double>::Zero(1, candidates.rows());
  target(0, pos_index) = 1.0;
  Var<double> loss = soft_cross_entropy(scale(matmul_transposed(p, c), 1.0 / tau), target);
  t.backward(loss);
  return InfoNceResult{loss.value()(0, 0), t.grad(p), t.grad(c)};
}

/// Batch InfoNCE: row i of `preds` scores every row of `candidates`, with row i
/// as its positive and the other rows as negatives. Mean over the batch.
template <class S>
Var<S> batch_info_nce(Var<S> preds, Var<S> candidates, S tau) {
  if (preds.rows() != candidates.rows() || preds.cols() != candidates.cols()) {
    throw std::invalid_argument("batch_info_nce: predictions " + shape_string(preds.rows(), preds.cols()) +
                                " vs candidates " + shape_string(candidates.rows(), candidates.cols()));
  }
  if (preds.rows() < 1) {
    throw std::invalid_argument("batch_info_nce: empty batch");
  }
  const Matrix<S> identity = Matrix<S>::Identity(preds.rows(), preds.rows());
  return soft_cross_entropy(scale(matmul_transposed(preds, candidates), S(1) / tau), identity);
}

/// Cross-view dual prediction. `ct_a`/`ct_b` are b x D_ct context rows of the
/// two views; `z_a`/`z_b` hold each item's local feature at the target index.
/// Returns (loss predicting z_a from ct_b, loss predicting z_b from ct_a).
template <class S>
std::pair<Var<S>, Var<S>> dual_contrast(Tape<S>& t, Var<S> ct_a, Var<S> ct_b, Var<S> z_a, Var<S> z_b, int k,
                                        const HorizonHeads<S>& heads, S tau) {
  Var<S> from_b = heads.project(t, ct_b, k);
  Var<S> from_a = heads.project(t, ct_a, k);
  return {batch_info_nce(from_b, z_a, tau), batch_info_nce(from_a, z_b, tau)};
}

/// Temporal dual contrast. Returns (l_tc_s, l_tc_w): l_tc_s scores W^K(ct_s)
/// against z^w targets, l_tc_w scores W^K(ct_w) against z^s targets.
template <class S>
std::pair<Var<S>, Var<S>> temporal_contrast(Tape<S>& t, Var<S> ct_w, Var<S> ct_s, Var<S> zw_target,
                                            Var<S> zs_target, int k, const HorizonHeads<S>& heads, S tau) {
  return dual_contrast(t, ct_w, ct_s, zw_target, zs_target, k, heads, tau);
}

/// Frequency dual contrast. Returns (l_fc_l, l_fc_h): each band's context
/// predicts its own band's feature at index F+K.
template <class S>
std::pair<Var<S>, Var<S>> frequency_contrast(Tape<S>& t, Var<S> ct_l, Var<S> ct_h, Var<S> zl_target,
                                             Var<S> zh_target, int k, const HorizonHeads<S>& heads, S tau) {
  Var<S> pred_l = heads.project(t, ct_l, k);
  Var<S> pred_h = heads.project(t, ct_h, k);
  return {batch_info_nce(pred_l, zl_target, tau), batch_info_nce(pred_h, zh_target, tau)};
}

/// 0-based row holding z_{T+K} (the paper-style 1-based index T+K).
inline Index target_row(int tokens, int k) { return static_cast<Index>(tokens + k - 1); }

// Sinkhorn codes --------------------------------------------------------------

/// b x J code matrix whose rows sum to 1 and whose columns sum to b/J.
struct CodeMatrix {
  Matrix<double> q;
};

/// Entropy-regularized assignment over the transportation polytope
/// {Q >= 0, Q 1 = 1/b, Q^T 1 = 1/J}, by alternating column and row marginal
/// normalization of exp(scores / epsilon); every round ends on the row step.
/// The result is rescaled by b. Codes are targets and carry no gradient.
inline CodeMatrix sinkhorn_codes(const Matrix<double>& scores, double epsilon, int iters) {
  if (!(epsilon > 0.0) || iters < 1) {
    throw std::invalid_argument("sinkhorn: epsilon must be positive and iters >= 1");
  }
  if (scores.rows() < 1 || scores.cols() < 1) {
    throw std::invalid_argument("sinkhorn: empty score matrix");
  }
  if (!scores.allFinite()) {
    throw std::invalid_argument("sinkhorn: non-finite scores");
  }
  const auto b = static_cast<double>(scores.rows());
  const auto j = static_cast<double>(scores.cols());
  Matrix<double> q = ((scores.array() - scores.maxCoeff()) / epsilon).exp().matrix();
  q /= q.sum();
  for (int it = 0; it < iters; ++it) {
    const Eigen::Matrix<double, 1, Eigen::Dynamic> cols = q.colwise().sum();
    q = (q.array().rowwise() / (cols.array() * j)).matrix();
    const Eigen::Matrix<double, Eigen::Dynamic, 1> rows = q.rowwise().sum();
    q = (q.array().colwise() / (rows.array() * b)).matrix();
  }
  return CodeMatrix{q * b};
}

// Swapped prediction ----------------------------------------------------------

template <class S>
struct SwappedPrediction {
  Var<S> loss;
  CodeMatrix codes_first;   // from the first view's scores
  CodeMatrix codes_second;  // from the second view's scores
};

/// l(z1, q2) + l(z2, q1) with l(z, q) = -mean_i sum_j q_ij log softmax_j(z_i . c_j / tau).
/// Rows of z1, z2 and of the centroid matrix are expected to be unit length.
/// When `fixed_codes` is given those codes are used instead of recomputing them.
template <class S>
SwappedPrediction<S> swapped_prediction(Var<S> z1, Var<S> z2, Var<S> centroids, double tau, double epsilon,
                                        int iters,
                                        const std::optional<std::pair<CodeMatrix, CodeMatrix>>& fixed_codes = {}) {
  if (centroids.rows() < 2) {
    throw std::invalid_argument("swapped prediction: need at least 2 centroids, got " +
                                std::to_string(centroids.rows()));
  }
  if (z1.rows() != z2.rows() || z1.cols() != centroids.cols() || z2.cols() != centroids.cols()) {
    throw std::invalid_argument("swapped prediction: view/centroid shapes disagree");
  }
  Var<S> scores1 = matmul_transposed(z1, centroids);
  Var<S> scores2 = matmul_transposed(z2, centroids);
  CodeMatrix q1;
  CodeMatrix q2;
  if (fixed_codes) {
    q1 = fixed_codes->first;
    q2 = fixed_codes->second;
  } else {
    q1 = sinkhorn_codes(scores1.value().template cast<double>(), epsilon, iters);
    q2 = sinkhorn_codes(scores2.value().template cast<double>(), epsilon, iters);
  }
  const S inv_tau = static_cast<S>(1.0 / tau);
  Var<S> l12 = soft_cross_entropy(scale(scores1, inv_tau), q2.q.template cast<S>().eval());
  Var<S> l21 = soft_cross_entropy(scale(scores2, inv_tau), q1.q.template cast<S>().eval());
  return SwappedPrediction<S>{add(l12, l21), std::move(q1), std::move(q2)};
}

/// Plain-matrix swapped prediction loss with gradients for both views and the centroids.
struct SwappedPredictionResult {
  double loss = 0.0;
  Matrix<double> grad_z1;
  Matrix<double> grad_z2;
  Matrix<double> grad_centroids;
  CodeMatrix codes_first;
  CodeMatrix codes_second;
};

inline SwappedPredictionResult swapped_prediction_loss(const Matrix<double>& z1, const Matrix<double>& z2,
                                                       const Matrix<double>& centroids, double tau, double epsilon,
                                                       int iters) {
  Tape<double> t;
  Var<double> a = t.input(z1);
  Var<double> b = t.input(z2);
  Var<double> c = t.input(centroids);
  auto sp = swapped_prediction(a, b, c, tau, epsilon, iters);
  t.backward(sp.loss);
  return SwappedPredictionResult{sp.loss.value()(0, 0), t.grad(a), t.grad(b), t.grad(c), std::move(sp.codes_first),
                                 std::move(sp.codes_second)};
}

// Combined objective ----------------------------------------------------------

struct PretrainLossBreakdown {
  double l_tc_w = 0.0;
  double l_tc_s = 0.0;
  double l_fc_l = 0.0;
  double l_fc_h = 0.0;
  double l_dc = 0.0;
  double total = 0.0;
};

/// (l_tc_w + l_tc_s) + (l_fc_h + l_fc_l) + l_dc, rejecting any non-finite term.
inline PretrainLossBreakdown pretrain_loss(double l_tc_w, double l_tc_s, double l_fc_l, double l_fc_h, double l_dc) {
  const std::pair<const char*, double> parts[] = {
      {"l_tc_w", l_tc_w}, {"l_tc_s", l_tc_s}, {"l_fc_l", l_fc_l}, {"l_fc_h", l_fc_h}, {"l_dc", l_dc}};
  for (const auto& [name, v] : parts) {
    if (!std::isfinite(v)) {
      throw std::domain_error(std::string("pretrain loss term ") + name + " is not finite");
    }
  }
  PretrainLossBreakdown b{l_tc_w, l_tc_s, l_fc_l, l_fc_h, l_dc, 0.0};
  b.total = (l_tc_w + l_tc_s) + (l_fc_h + l_fc_l) + l_dc;
  return b;
}

}  // namespace splitsee
