#include "segsurv/baselines.hpp"

#include "segsurv/init.hpp"
#include "segsurv/losses.hpp"
#include "segsurv/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace segsurv {

namespace {

// Breslow log partial likelihood with optional gradient and Hessian.
double cox_terms(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const std::vector<int>& event,
                 const Eigen::VectorXd& coef, Eigen::VectorXd* gradient, Eigen::MatrixXd* hessian) {
  const Index n = x.rows(), f = x.cols();
  const Eigen::VectorXd eta = x * coef;
  // Shift by the max linear predictor so the risk-set sums stay finite.
  const double shift = n > 0 ? eta.maxCoeff() : 0.0;
  std::vector<Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return time[a] > time[b]; });

  double ll = 0, risk_sum = 0;
  Eigen::VectorXd weighted = Eigen::VectorXd::Zero(f);
  Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(hessian ? f : 0, hessian ? f : 0);
  if (gradient) *gradient = Eigen::VectorXd::Zero(f);
  if (hessian) *hessian = Eigen::MatrixXd::Zero(f, f);
  Index g = 0;
  while (g < n) {
    Index end = g;
    while (end < n && time[order[static_cast<size_t>(end)]] == time[order[static_cast<size_t>(g)]]) ++end;
    // Breslow: every member of a tie group shares the risk set that includes the whole group.
    for (Index q = g; q < end; ++q) {
      const Index j = order[static_cast<size_t>(q)];
      const double w = std::exp(eta[j] - shift);
      risk_sum += w;
      weighted += w * x.row(j).transpose();
      if (hessian) outer.noalias() += w * x.row(j).transpose() * x.row(j);
    }
    for (Index q = g; q < end; ++q) {
      const Index i = order[static_cast<size_t>(q)];
      if (!event[static_cast<size_t>(i)]) continue;
      ll += eta[i] - shift - std::log(risk_sum);
      if (gradient) *gradient += x.row(i).transpose() - weighted / risk_sum;
      if (hessian) {
        const Eigen::VectorXd mean = weighted / risk_sum;
        *hessian -= outer / risk_sum - mean * mean.transpose();
      }
    }
    g = end;
  }
  return ll;
}

}  // namespace

double cox_log_likelihood(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const std::vector<int>& event,
                          const Eigen::VectorXd& coef, Eigen::VectorXd* gradient) {
  return cox_terms(x, time, event, coef, gradient, nullptr);
}

CoxModel coxph_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const std::vector<int>& event,
                   const CoxConfig& cfg) {
  const Index n = x.rows();
  if (n < 2) throw std::invalid_argument("coxph_fit: need at least 2 subjects");
  if (time.size() != n || static_cast<Index>(event.size()) != n)
    throw std::invalid_argument("coxph_fit: feature, time and event lengths differ");
  if (std::none_of(event.begin(), event.end(), [](int e) { return e != 0; }))
    throw std::invalid_argument("coxph_fit: no events");

  const double scale = 1.0 / static_cast<double>(n);
  const Index f = x.cols();
  auto objective = [&](const Eigen::VectorXd& c, Eigen::VectorXd* g, Eigen::MatrixXd* h) {
    double v = scale * cox_terms(x, time, event, c, g, h) - 0.5 * cfg.l2 * c.squaredNorm();
    if (g) *g = scale * *g - cfg.l2 * c;
    if (h) *h = scale * *h - cfg.l2 * Eigen::MatrixXd::Identity(f, f);
    return v;
  };

  CoxModel m;
  m.coef = Eigen::VectorXd::Zero(f);
  Eigen::VectorXd grad;
  Eigen::MatrixXd hess;
  double value = objective(m.coef, &grad, &hess);
  for (m.iterations = 0; m.iterations < cfg.max_iter; ++m.iterations) {
    if (grad.lpNorm<Eigen::Infinity>() < cfg.tolerance) {
      m.converged = true;
      break;
    }
    // Newton direction on the concave objective; falls back to the gradient
    // when the Hessian is not safely negative definite.
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(-hess);
    Eigen::VectorXd dir = grad;
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
      const Eigen::VectorXd nd = ldlt.solve(grad);
      if (nd.allFinite() && nd.dot(grad) > 0) dir = nd;
    }
    const double slope = grad.dot(dir);
    double step = 1.0;
    Eigen::VectorXd trial;
    while (step > 1e-14) {
      trial = m.coef + step * dir;
      const double tv = objective(trial, nullptr, nullptr);
      if (std::isfinite(tv) && tv >= value + 1e-4 * step * slope) break;
      step *= 0.5;
    }
    if (step <= 1e-14) break;  // no ascent possible at machine precision
    m.coef = trial;
    value = objective(m.coef, &grad, &hess);
  }
  m.log_likelihood = cox_log_likelihood(x, time, event, m.coef);
  return m;
}

MtlrModel::MtlrModel(Index features, const MtlrFitConfig& cfg, std::vector<double> edges)
    : cfg_(cfg), edges_(std::move(edges)), features_(features) {
  if (static_cast<Index>(edges_.size()) != cfg_.bins - 1)
    throw std::invalid_argument("mtlr: expected " + std::to_string(cfg_.bins - 1) + " bin edges");
  const Index in = cfg_.hidden > 0 ? cfg_.hidden : features_;
  if (cfg_.hidden > 0) {
    params_.add("mlp.weight", {features_, cfg_.hidden});
    params_.add("mlp.bias", {cfg_.hidden});
  }
  params_.add("mtlr.weight", {in, cfg_.bins - 1});
  params_.add("mtlr.bias", {cfg_.bins - 1});
  std::mt19937_64 rng(cfg_.seed);
  if (cfg_.hidden > 0) init_truncated_normal(params_.get("mlp.weight"), rng, 1.0 / std::sqrt(double(features_)));
  init_truncated_normal(params_.get("mtlr.weight"), rng, 0.02);
}

Var<double> MtlrModel::forward(Tape<double>& tape, const Eigen::MatrixXd& x) const {
  if (x.cols() != features_) throw std::invalid_argument("mtlr: feature length mismatch");
  Tensor<double> in({x.rows(), x.cols()});
  in.matrix() = x;
  Var<double> h = tape.constant(std::move(in));
  if (cfg_.hidden > 0) h = relu(linear(h, tape.param(params_.get("mlp.weight")), tape.param(params_.get("mlp.bias"))));
  return linear(h, tape.param(params_.get("mtlr.weight")), tape.param(params_.get("mtlr.bias")));
}

MtlrModel MtlrModel::fit(const Eigen::MatrixXd& x, const std::vector<SurvivalLabel>& labels, const MtlrFitConfig& cfg) {
  if (static_cast<Index>(labels.size()) != x.rows() || labels.empty())
    throw std::invalid_argument("mtlr fit: need one label per feature row");
  std::vector<double> times;
  for (const auto& l : labels) times.push_back(l.time);
  MtlrModel m(x.cols(), cfg, quantile_bin_edges(times, cfg.bins));
  std::vector<MtlrLabel> enc;
  for (const auto& l : labels) enc.push_back(encode_mtlr_label(l, m.edges_));
  Optimizer<double> opt(OptimizerKind::AdamW, cfg.weight_decay);
  for (int e = 0; e < cfg.epochs; ++e) {
    Tape<double> tape;
    m.params_.zero_grad();
    Var<double> loss = mtlr_nll(m.forward(tape, x), enc);
    if (!std::isfinite(loss.value().item())) throw std::domain_error("mtlr fit: non-finite loss");
    tape.backward(loss);
    opt.step(m.params_, cfg.lr);
  }
  return m;
}

Eigen::MatrixXd MtlrModel::scores(const Eigen::MatrixXd& x) const {
  Tape<double> tape;
  Var<double> s = forward(tape, x);
  return s.value().matrix();
}

Eigen::MatrixXd MtlrModel::pmf(const Eigen::MatrixXd& x) const { return survival_pmf(Eigen::MatrixXd(scores(x))); }

Eigen::VectorXd MtlrModel::risk(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd p = pmf(x);
  Eigen::VectorXd r(p.rows());
  for (Index i = 0; i < p.rows(); ++i) r[i] = risk_score(p.row(i).transpose());
  return r;
}

double MtlrModel::nll(const Eigen::MatrixXd& x, const std::vector<SurvivalLabel>& labels) const {
  std::vector<MtlrLabel> enc;
  for (const auto& l : labels) enc.push_back(encode_mtlr_label(l, edges_));
  Tape<double> tape;
  return mtlr_nll(forward(tape, x), enc).value().item();
}

}  // namespace segsurv
