// Patch and EHR token embedding.
//
// patchify enumerates P×P×P blocks in C-order over the block grid. Each row
// holds the block's CT voxels (C-order inside the block) followed by its PET
// voxels, so a row has P³·2 entries. The embedded sequence is the n patch
// tokens followed by a single EHR token; there is no class token.
#pragma once

#include "segsurv/init.hpp"
#include "segsurv/ops.hpp"
#include "segsurv/volume.hpp"

#include <random>
#include <utility>

namespace segsurv {

struct EmbedConfig {
  Extent3 input{32, 32, 16};
  Index patch = 8;
  Index hidden = 64;
  Index channels = 2;
  Index ehr_features = 22;

  Extent3 grid() const { return {input[0] / patch, input[1] / patch, input[2] / patch}; }
  Index tokens() const { return grid()[0] * grid()[1] * grid()[2]; }
  Index patch_length() const { return patch * patch * patch * channels; }
  void validate() const;
};

template <typename S>
RowMatrix<S> patchify(const Volume& ct, const Volume& pet, Index patch);

/// Inverse of patchify; returns (ct, pet) with unit spacing.
std::pair<Volume, Volume> unpatchify(const RowMatrix<float>& rows, const Extent3& shape, Index patch);

template <typename S>
class Embedder {
 public:
  Embedder(ParameterSet<S>& params, const EmbedConfig& cfg);

  template <typename Rng>
  void initialize(Rng& rng) {
    init_truncated_normal(*patch_w_, rng);
    init_truncated_normal(*ehr_w_, rng);
    init_truncated_normal(*position_, rng);
    patch_b_->value.data.setZero();
    ehr_b_->value.data.setZero();
  }

  /// patches (N, n, P³·C), ehr (N, F) -> tokens (N, n+1, h).
  Var<S> forward(Var<S> patches, Var<S> ehr) const;

  const EmbedConfig& config() const { return cfg_; }

 private:
  EmbedConfig cfg_;
  Parameter<S>* patch_w_;
  Parameter<S>* patch_b_;
  Parameter<S>* ehr_w_;
  Parameter<S>* ehr_b_;
  Parameter<S>* position_;
};

}  // namespace segsurv

