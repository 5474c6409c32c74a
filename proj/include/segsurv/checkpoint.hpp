// Parameter checkpoints.
//
// A checkpoint is a directory holding
//   manifest.json  {"format":"segsurv-checkpoint-v1","precision":"f32"|"f64",
//                   "parameters":[{"name","shape","offset","trainable"}...],
//                   "metadata":{...}}
//   params.bin     every parameter's values, little-endian, concatenated in
//                  manifest order (which is registration order); "offset"
//                  counts scalars from the start of the file.
#pragma once

#include "segsurv/tape.hpp"

#include "json.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace segsurv {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
void save_checkpoint(const ParameterSet<Scalar>& params, const std::filesystem::path& dir,
                     const nlohmann::json& metadata = nlohmann::json::object());

/// Loads values into an already-shaped parameter set. Every parameter in
/// params must be present with an identical shape; otherwise the error lists
/// each mismatch. Precision converts if the file differs from Scalar.
template <typename Scalar>
void load_checkpoint(ParameterSet<Scalar>& params, const std::filesystem::path& dir);

/// Reads only manifest.json (metadata needed to rebuild a model).
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

}  // namespace segsurv
