// Parameter initializers.
#pragma once

#include "segsurv/tape.hpp"

#include <random>

namespace segsurv {

/// Zero-mean normal truncated at two standard deviations (resampled).
template <typename Scalar, typename Rng>
void init_truncated_normal(Parameter<Scalar>& p, Rng& rng, double stddev = 0.02) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (Index i = 0; i < p.value.size(); ++i) {
    double z;
    do {
      z = dist(rng);
    } while (z < -2.0 || z > 2.0);
    p.value[i] = static_cast<Scalar>(z * stddev);
  }
}

template <typename Scalar>
void init_constant(Parameter<Scalar>& p, Scalar v) {
  p.value.data.setConstant(v);
}

}  // namespace segsurv
