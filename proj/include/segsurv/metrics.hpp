// Evaluation metrics: Dice similarity on binary masks and Harrell's C-index.
#pragma once

#include "segsurv/tensor.hpp"
#include "segsurv/volume.hpp"

#include <Eigen/Core>

#include <stdexcept>
#include <vector>

namespace segsurv {

/// 2|A∩B| / (|A| + |B|) for binary masks of equal shape. Two empty masks score 0.
double dsc_metric(const Volume& predicted, const Volume& truth);
/// Mean per-subject DSC.
double mean_dsc(const std::vector<Volume>& predicted, const std::vector<Volume>& truth);

struct NoComparablePairs : std::domain_error {
  NoComparablePairs() : std::domain_error("c_index: no comparable pairs") {}
};

struct ConcordanceCounts {
  double concordant = 0;  // tied risks add 0.5
  long long comparable = 0;
  double value() const;
};

/// Harrell's C-index. A pair (i, j) is comparable when t_i < t_j and subject i
/// had the event; it is concordant when risk_i > risk_j and counts one half when
/// the risks tie. Pairs with tied times are never comparable. O(n log n).
ConcordanceCounts concordance(const Eigen::VectorXd& risk, const Eigen::VectorXd& time,
                              const std::vector<int>& event);
/// Throws NoComparablePairs when the data admit no comparable pair.
double c_index(const Eigen::VectorXd& risk, const Eigen::VectorXd& time, const std::vector<int>& event);

}  // namespace segsurv
