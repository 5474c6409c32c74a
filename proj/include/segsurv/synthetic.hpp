// Synthetic PET/CT + EHR cohorts with a planted survival signal.
//
// Each subject carries one ellipsoidal tumor whose size is driven by a latent
// size score. Event times are Weibull with log-hazard
//   eta = tumor_effect * z_size + ehr_effect * z_age + nonlinear_effect * (z_weight^2 - 1)
// where every z is a unit-variance standardization of the underlying draw.
// Censoring times are exponential with a rate solved so that the expected
// censored fraction equals censor_fraction.
#pragma once

#include "segsurv/dataset.hpp"

#include <cstdint>
#include <vector>

namespace segsurv {

struct SynthConfig {
  Extent3 shape{40, 40, 24};
  Spacing3 spacing{1.0, 1.0, 1.0};
  double radius_min_mm = 2.5;
  double radius_max_mm = 6.5;
  double tumor_effect = 1.0;
  double ehr_effect = 0.5;
  double nonlinear_effect = 0.0;
  double weibull_shape = 1.5;
  double weibull_scale_days = 900.0;
  double censor_fraction = 0.75;

  void validate() const;
};

/// Ground truth that is not observable from the generated files.
struct SynthTruth {
  double log_hazard = 0;
  double size_score = 0;  // z_size
  double event_time = 0;  // uncensored draw
};

std::vector<Subject> generate_synthetic(Index n, std::uint64_t seed, const SynthConfig& cfg,
                                        std::vector<SynthTruth>* truth = nullptr);

}  // namespace segsurv
