// Training objectives: soft Dice, focal, MTLR negative log-likelihood, and the
// weighted joint objective beta * (dice + focal) + (1 - beta) * nll.
#pragma once

#include "segsurv/ops.hpp"
#include "segsurv/prognosis.hpp"

#include <vector>

namespace segsurv {

struct LossConfig {
  double alpha = 1.0;      // focal weight on the foreground term
  double gamma = 2.0;      // focusing exponent
  double beta = 0.3;       // segmentation share of the joint objective
  double dice_eps = 1e-6;  // smoothing added to numerator and denominator
  bool focal_mean = true;  // average focal loss over voxels instead of summing

  void validate() const;
};

/// 1 - (2·Σp·y + eps) / (Σp² + Σy² + eps), averaged over samples. A rank-1
/// input is one sample; otherwise axis 0 indexes samples.
template <typename S> Var<S> dice_loss(Var<S> probs, const Tensor<S>& target, S eps = S(1e-6));

/// Per voxel -alpha·y·(1-p)^gamma·log p - (1-y)·p^gamma·log(1-p) with p clamped
/// to [1e-7, 1 - 1e-7]; mean (or sum) over all voxels.
template <typename S>
Var<S> focal_loss(Var<S> probs, const Tensor<S>& target, S alpha = S(1), S gamma = S(2), bool mean = true);

/// Mean over subjects of log Z - log(sum of exp-scores of sequences consistent
/// with the label). Uncensored subjects have exactly one consistent sequence;
/// censored subjects admit every sequence whose event bin ends at or after the
/// censoring time.
template <typename S> Var<S> mtlr_nll(Var<S> scores, const std::vector<MtlrLabel>& labels);

template <typename S> Var<S> combined_loss(Var<S> dice, Var<S> focal, Var<S> nll, S beta);
double combined_loss(double dice, double focal, double nll, double beta);

}  // namespace segsurv
