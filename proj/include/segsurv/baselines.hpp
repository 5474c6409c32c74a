// Tabular survival baselines on encoded health-record features: Cox
// proportional hazards, linear MTLR and an MLP-fed MTLR.
#pragma once

#include "segsurv/ehr.hpp"
#include "segsurv/prognosis.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace segsurv {

struct CoxConfig {
  double l2 = 1e-3;          // ridge penalty on the per-subject mean log partial likelihood
  int max_iter = 500;
  double tolerance = 1e-8;   // stop when the gradient infinity norm falls below this
};

struct CoxModel {
  Eigen::VectorXd coef;
  int iterations = 0;
  bool converged = false;
  double log_likelihood = 0;  // Breslow, unpenalized, summed over events

  double risk(const Eigen::VectorXd& x) const { return coef.dot(x); }
  Eigen::VectorXd risk(const Eigen::MatrixXd& x) const { return x * coef; }
};

/// Breslow log partial likelihood and its gradient at coef.
double cox_log_likelihood(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const std::vector<int>& event,
                          const Eigen::VectorXd& coef, Eigen::VectorXd* gradient = nullptr);

/// Damped Newton ascent on the penalized mean log partial likelihood, starting
/// from zero. Throws when there are no events; a run that
/// hits max_iter returns with converged = false.
CoxModel coxph_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& time, const std::vector<int>& event,
                   const CoxConfig& cfg = {});

struct MtlrFitConfig {
  Index bins = 10;
  Index hidden = 0;        // 0 → linear MTLR; otherwise one ReLU layer of this width
  int epochs = 500;        // full-batch steps
  double lr = 0.01;
  double weight_decay = 1e-3;
  std::uint64_t seed = 0;
};

/// MTLR on tabular features, trained full-batch with AdamW in double precision.
class MtlrModel {
 public:
  MtlrModel() = default;
  MtlrModel(Index features, const MtlrFitConfig& cfg, std::vector<double> edges);

  /// Fits edges to the training times' quantiles and trains.
  static MtlrModel fit(const Eigen::MatrixXd& x, const std::vector<SurvivalLabel>& labels, const MtlrFitConfig& cfg);

  /// N x (K-1) scores.
  Eigen::MatrixXd scores(const Eigen::MatrixXd& x) const;
  /// N x K pmf.
  Eigen::MatrixXd pmf(const Eigen::MatrixXd& x) const;
  Eigen::VectorXd risk(const Eigen::MatrixXd& x) const;
  /// Mean NLL of labels under the model.
  double nll(const Eigen::MatrixXd& x, const std::vector<SurvivalLabel>& labels) const;

  const std::vector<double>& edges() const { return edges_; }
  ParameterSet<double>& params() { return params_; }

 private:
  Var<double> forward(Tape<double>& tape, const Eigen::MatrixXd& x) const;

  MtlrFitConfig cfg_;
  std::vector<double> edges_;
  Index features_ = 0;
  mutable ParameterSet<double> params_;  // looked up by name, so copies stay valid
};

}  // namespace segsurv
