#include "segsurv/prognosis.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace segsurv {

std::vector<double> quantile_bin_edges(std::vector<double> times, Index bins) {
  if (bins < 2) throw std::invalid_argument("quantile_bin_edges: need at least 2 bins");
  if (times.empty()) throw std::invalid_argument("quantile_bin_edges: no times");
  std::sort(times.begin(), times.end());
  const double last = static_cast<double>(times.size() - 1);
  std::vector<double> edges;
  for (Index q = 1; q < bins; ++q) {
    const double pos = last * static_cast<double>(q) / static_cast<double>(bins);
    const size_t lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, times.size() - 1);
    double e = times[lo] + (pos - static_cast<double>(lo)) * (times[hi] - times[lo]);
    e = std::max(e, 0.0);
    if (!edges.empty() && e <= edges.back()) e = edges.back() + std::max(1e-6 * std::abs(edges.back()), 1e-9);
    edges.push_back(e);
  }
  return edges;
}

Index time_bin(double t, const std::vector<double>& edges) {
  return static_cast<Index>(std::lower_bound(edges.begin(), edges.end(), t) - edges.begin());
}

MtlrLabel encode_mtlr_label(const SurvivalLabel& label, const std::vector<double>& edges) {
  MtlrLabel m;
  m.event = label.event;
  m.bin = time_bin(label.time, edges);
  m.y = Eigen::VectorXd::Zero(static_cast<Index>(edges.size()));
  // Censored subjects keep zeros past their bin; those entries carry no information.
  if (label.event)
    for (Index k = m.bin; k < m.y.size(); ++k) m.y[k] = 1.0;
  return m;
}

Eigen::VectorXd survival_pmf(const Eigen::VectorXd& scores) {
  if (!scores.allFinite()) throw std::domain_error("survival_pmf: non-finite scores");
  const Index k1 = scores.size();
  Eigen::VectorXd cum(k1 + 1);
  cum[k1] = 0.0;
  for (Index j = k1 - 1; j >= 0; --j) cum[j] = cum[j + 1] + scores[j];
  const double mx = cum.maxCoeff();
  Eigen::VectorXd p = (cum.array() - mx).exp().matrix();
  return p / p.sum();
}

Eigen::MatrixXd survival_pmf(const Eigen::MatrixXd& scores) {
  Eigen::MatrixXd out(scores.rows(), scores.cols() + 1);
  for (Index i = 0; i < scores.rows(); ++i) out.row(i) = survival_pmf(Eigen::VectorXd(scores.row(i).transpose())).transpose();
  return out;
}

Eigen::VectorXd survival_function(const Eigen::VectorXd& pmf) {
  const Index k1 = pmf.size() - 1;
  Eigen::VectorXd s(k1);
  double tail = 0;
  for (Index j = pmf.size() - 1; j >= 1; --j) {
    tail += pmf[j];
    s[j - 1] = tail;
  }
  return s;
}

double risk_score(const Eigen::VectorXd& pmf) {
  if (std::abs(pmf.sum() - 1.0) > 1e-6) throw std::invalid_argument("risk_score: pmf does not sum to 1");
  return -survival_function(pmf).sum();
}

template <typename S>
PrognosticHead<S>::PrognosticHead(ParameterSet<S>& params, const HeadConfig& cfg) : cfg_(cfg) {
  if (cfg_.hidden < 1 || cfg_.fc1 < 1 || cfg_.fc2 < 1 || cfg_.bins < 2)
    throw std::invalid_argument("head config: sizes must be positive and bins >= 2");
  fc1_w_ = &params.add("head.fc1.weight", {cfg_.hidden, cfg_.fc1});
  fc1_b_ = &params.add("head.fc1.bias", {cfg_.fc1});
  fc2_w_ = &params.add("head.fc2.weight", {cfg_.fc1, cfg_.fc2});
  fc2_b_ = &params.add("head.fc2.bias", {cfg_.fc2});
  mtlr_w_ = &params.add("mtlr.weight", {cfg_.fc2, cfg_.bins - 1});
  mtlr_b_ = &params.add("mtlr.bias", {cfg_.bins - 1});
}

template <typename S>
Var<S> PrognosticHead<S>::features(Var<S> tokens) const {
  Tape<S>& tape = *tokens.tape;
  if (tokens.shape().size() != 3 || tokens.dim(2) != cfg_.hidden)
    throw_shape_error("head_forward", tokens.shape(), {cfg_.hidden});
  Var<S> pooled = mean_axis(tokens, 1);
  Var<S> h1 = relu(linear(pooled, tape.param(*fc1_w_), tape.param(*fc1_b_)));
  return relu(linear(h1, tape.param(*fc2_w_), tape.param(*fc2_b_)));
}

template <typename S>
Var<S> PrognosticHead<S>::mtlr_logits(Var<S> features) const {
  Tape<S>& tape = *features.tape;
  return linear(features, tape.param(*mtlr_w_), tape.param(*mtlr_b_));
}

template class PrognosticHead<float>;
template class PrognosticHead<double>;

}  // namespace segsurv
