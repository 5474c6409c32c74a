// Shared fixtures for the test binaries.
#pragma once

#include "segsurv/dataset.hpp"
#include "segsurv/synthetic.hpp"
#include "segsurv/tape.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace testing {

using segsurv::Index;
using segsurv::Shape;
using segsurv::Tensor;

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("segsurv_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Synthetic cohort already resampled, normalized and cropped to `crop`.
inline std::vector<segsurv::Subject> preprocessed_cohort(Index n, std::uint64_t seed, segsurv::SynthConfig cfg,
                                                         segsurv::Extent3 crop) {
  segsurv::PreprocessConfig pc;
  pc.crop = crop;
  std::vector<segsurv::Subject> out;
  for (const auto& s : segsurv::generate_synthetic(n, seed, cfg)) out.push_back(segsurv::preprocess_subject(s, pc));
  return out;
}

inline std::vector<const segsurv::Subject*> pointers(const std::vector<segsurv::Subject>& v) {
  std::vector<const segsurv::Subject*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace testing
