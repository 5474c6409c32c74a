// Prognostic head and multi-task logistic regression (MTLR) survival model.
//
// Time axis: K bins split by K-1 strictly increasing edges t_1 < ... < t_{K-1}.
// Bin j (1-based, j < K) is (t_{j-1}, t_j] with t_0 = 0; bin K is (t_{K-1}, inf).
// A label is the monotone 0/1 sequence y_k = [T <= t_k], k = 1..K-1, so an
// event in bin j switches y on at k = j and the all-zero sequence means
// "survived past the last edge". With per-edge scores s_k = w_k·x + b_k the
// model assigns sequence j the unnormalized log-probability sum_{k>=j} s_k
// (0 for the all-zero sequence); pmf index j-1 holds bin j, index K-1 holds
// the survivor bin.
#pragma once

#include "segsurv/ehr.hpp"
#include "segsurv/init.hpp"
#include "segsurv/ops.hpp"

#include <Eigen/Dense>

#include <vector>

namespace segsurv {

struct MtlrLabel {
  Eigen::VectorXd y;  // length K-1, monotone; for censored subjects only the prefix before `bin` is defined
  int event = 0;
  Index bin = 0;      // 0-based bin holding the event or censoring time
};

/// Edges at the empirical quantiles 1/K, ..., (K-1)/K of `times`, nudged to be
/// strictly increasing.
std::vector<double> quantile_bin_edges(std::vector<double> times, Index bins);

/// 0-based bin index of time t for the given edges.
Index time_bin(double t, const std::vector<double>& edges);

MtlrLabel encode_mtlr_label(const SurvivalLabel& label, const std::vector<double>& edges);

/// Scores (K-1) -> pmf over K bins. Throws on non-finite scores.
Eigen::VectorXd survival_pmf(const Eigen::VectorXd& scores);
/// Row-wise survival_pmf for an N x (K-1) score matrix.
Eigen::MatrixXd survival_pmf(const Eigen::MatrixXd& scores);

/// S(t_k) = P(T > t_k) for k = 1..K-1; nonincreasing.
Eigen::VectorXd survival_function(const Eigen::VectorXd& pmf);

/// Negative area under the discrete survival curve: -sum_k S(t_k).
/// Higher means shorter predicted survival.
double risk_score(const Eigen::VectorXd& pmf);

struct HeadConfig {
  Index hidden = 64;  // encoder width h
  Index fc1 = 512;
  Index fc2 = 128;
  Index bins = 10;    // K
};

/// Mean-pool over all tokens, FC h->fc1 + ReLU, FC fc1->fc2 + ReLU, then an
/// MTLR layer fc2 -> K-1 scores.
template <typename S>
class PrognosticHead {
 public:
  PrognosticHead(ParameterSet<S>& params, const HeadConfig& cfg);

  template <typename Rng>
  void initialize(Rng& rng) {
    for (auto* w : {fc1_w_, fc2_w_, mtlr_w_}) init_truncated_normal(*w, rng);
    for (auto* b : {fc1_b_, fc2_b_, mtlr_b_}) b->value.data.setZero();
  }

  /// tokens (N, m, h) -> features (N, fc2).
  Var<S> features(Var<S> tokens) const;
  /// features (N, fc2) -> scores (N, K-1).
  Var<S> mtlr_logits(Var<S> features) const;

  const HeadConfig& config() const { return cfg_; }

 private:
  HeadConfig cfg_;
  Parameter<S>*fc1_w_, *fc1_b_, *fc2_w_, *fc2_b_, *mtlr_w_, *mtlr_b_;
};

}  // namespace segsurv
