#include "segsurv/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <stdexcept>

namespace segsurv {

void SynthConfig::validate() const {
  for (Index d : shape)
    if (d < 1) throw std::invalid_argument("synth: volume extents must be positive");
  for (double s : spacing)
    if (!(s > 0)) throw std::invalid_argument("synth: spacing must be positive");
  if (!(radius_min_mm > 0) || radius_max_mm < radius_min_mm) throw std::invalid_argument("synth: bad radius range");
  if (!(weibull_shape > 0) || !(weibull_scale_days > 0)) throw std::invalid_argument("synth: bad Weibull parameters");
  if (censor_fraction < 0 || censor_fraction >= 1) throw std::invalid_argument("synth: censor_fraction must be in [0,1)");
}

namespace {

template <typename Rng>
const std::string& pick(Rng& rng, const std::vector<std::string>& options, const std::vector<double>& weights) {
  std::discrete_distribution<size_t> d(weights.begin(), weights.end());
  return options[d(rng)];
}

// Rate c of exponential censoring with mean_i(1 - exp(-c T_i)) = target.
double solve_censoring_rate(const std::vector<double>& times, double target) {
  if (target <= 0) return 0.0;
  auto frac = [&](double c) {
    double s = 0;
    for (double t : times) s += 1.0 - std::exp(-c * t);
    return s / static_cast<double>(times.size());
  };
  double lo = 0, hi = 1.0 / std::max(1e-12, *std::max_element(times.begin(), times.end()));
  while (frac(hi) < target) hi *= 2;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (frac(mid) < target ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

std::vector<Subject> generate_synthetic(Index n, std::uint64_t seed, const SynthConfig& cfg,
                                        std::vector<SynthTruth>* truth) {
  if (n < 1) throw std::invalid_argument("synth: n must be >= 1");
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<Subject> subjects(static_cast<size_t>(n));
  std::vector<SynthTruth> gt(static_cast<size_t>(n));
  const double sqrt12 = std::sqrt(12.0);
  for (Index s = 0; s < n; ++s) {
    Subject& sub = subjects[static_cast<size_t>(s)];
    char id[32];
    std::snprintf(id, sizeof(id), "S%04lld", static_cast<long long>(s));
    sub.id = id;

    // Tumor geometry (physical mm).
    const double size_u = unif(rng);
    std::array<double, 3> radius, center;
    for (int a = 0; a < 3; ++a) {
      const double r = cfg.radius_min_mm + (cfg.radius_max_mm - cfg.radius_min_mm) * (0.8 * size_u + 0.2 * unif(rng));
      radius[a] = a == 2 ? 0.7 * r : r;
      const double extent = static_cast<double>(cfg.shape[a] - 1) * cfg.spacing[a];
      center[a] = 0.5 * extent + (unif(rng) - 0.5) * 0.15 * extent;
    }
    const double uptake = 3.0 + 3.0 * unif(rng);

    sub.ct = Volume(cfg.shape, cfg.spacing, Modality::CT);
    sub.pet = Volume(cfg.shape, cfg.spacing, Modality::PET);
    sub.mask = Volume(cfg.shape, cfg.spacing, Modality::MASK);
    for (Index i = 0; i < cfg.shape[0]; ++i)
      for (Index j = 0; j < cfg.shape[1]; ++j)
        for (Index k = 0; k < cfg.shape[2]; ++k) {
          const double dx = (static_cast<double>(i) * cfg.spacing[0] - center[0]) / radius[0];
          const double dy = (static_cast<double>(j) * cfg.spacing[1] - center[1]) / radius[1];
          const double dz = (static_cast<double>(k) * cfg.spacing[2] - center[2]) / radius[2];
          const bool inside = dx * dx + dy * dy + dz * dz <= 1.0;
          sub.mask.at(i, j, k) = inside ? 1.0f : 0.0f;
          sub.ct.at(i, j, k) = static_cast<float>((inside ? 60.0 : 30.0) + 25.0 * normal(rng));
          sub.pet.at(i, j, k) = static_cast<float>(inside ? uptake + 0.3 * normal(rng) : 1.0 + 0.15 * normal(rng));
        }

    // EHR.
    const double z_age = normal(rng);
    const double z_weight = normal(rng);
    sub.ehr.numeric["age"] = 62.0 + 9.0 * z_age;
    sub.ehr.numeric["weight"] = 78.0 + 14.0 * z_weight;
    sub.ehr.categorical["gender"] = pick(rng, {"F", "M"}, {0.2, 0.8});
    sub.ehr.categorical["t_stage"] = pick(rng, {"T1", "T2", "T3", "T4"}, {1, 1, 1, 1});
    sub.ehr.categorical["n_stage"] = pick(rng, {"N0", "N1", "N2", "N3"}, {1, 1, 1, 1});
    sub.ehr.categorical["m_stage"] = pick(rng, {"M0", "M1"}, {0.95, 0.05});
    sub.ehr.categorical["tnm_edition"] = pick(rng, {"7", "8"}, {0.5, 0.5});
    sub.ehr.categorical["tnm_group"] = pick(rng, {"I", "II", "III", "IV"}, {1, 1, 1, 1});
    sub.ehr.categorical["chemotherapy"] = pick(rng, {"no", "yes"}, {0.3, 0.7});

    SynthTruth& t = gt[static_cast<size_t>(s)];
    t.size_score = (size_u - 0.5) * sqrt12;
    t.log_hazard = cfg.tumor_effect * t.size_score + cfg.ehr_effect * z_age +
                   cfg.nonlinear_effect * (z_weight * z_weight - 1.0);
    const double e = -std::log(1.0 - unif(rng));
    t.event_time = cfg.weibull_scale_days * std::pow(e * std::exp(-t.log_hazard), 1.0 / cfg.weibull_shape);
  }

  std::vector<double> times;
  for (const auto& t : gt) times.push_back(t.event_time);
  const double rate = solve_censoring_rate(times, cfg.censor_fraction);
  for (Index s = 0; s < n; ++s) {
    const double c = rate > 0 ? -std::log(1.0 - unif(rng)) / rate : std::numeric_limits<double>::infinity();
    const double t = gt[static_cast<size_t>(s)].event_time;
    auto& label = subjects[static_cast<size_t>(s)].label;
    label.event = t <= c ? 1 : 0;
    label.time = std::min(t, c);
  }
  if (truth) *truth = std::move(gt);
  return subjects;
}

}  // namespace segsurv
