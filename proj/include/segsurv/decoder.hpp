// Convolutional segmentation decoder fed by encoder skip taps.
//
// With S = log2(P) upsampling levels, level r has resolution input / 2^r and
// widths[r] channels (widths[0] is full resolution). Starting from the last
// tap reshaped to the token grid (level S), each level r = S-1..0 does
//   up = deconv2x(prev) -> concat(up, skips at r [, stem at r = 0])
//      -> conv3-BN-ReLU -> conv3-BN-ReLU
// The j-th tap counted back from the last (j = 1, 2, ...) reaches level
// max(S - j, 0) through j' = S - level steps of deconv2x-BN-ReLU. The stem is
// two conv3-BN-ReLU blocks over the raw 2-channel CT/PET input. A final 1×1×1
// convolution emits one logit per voxel. Only image-token rows are read from
// the taps; the EHR row is dropped before reshaping.
#pragma once

#include "segsurv/embedder.hpp"
#include "segsurv/encoder.hpp"
#include "segsurv/init.hpp"
#include "segsurv/ops.hpp"
#include "segsurv/volume.hpp"

#include <map>
#include <vector>

namespace segsurv {

struct DecoderConfig {
  std::vector<Index> widths{8, 16, 32};  // full resolution first; size log2(P)
};

/// (N, m, h) tokens with m = n or n + 1 -> (N, h, gx, gy, gz); row n (EHR) is dropped.
template <typename S> Var<S> tokens_to_grid(Var<S> tokens, const Extent3& grid);
/// (N, h, gx, gy, gz) -> (N, n, h), rows in patch enumeration order.
template <typename S> Var<S> grid_to_tokens(Var<S> grid);

/// sigmoid(logit) >= threshold -> 1. Ties at the threshold go to foreground.
Volume logits_to_mask(const Volume& logits, double threshold = 0.5);

template <typename S>
struct ConvBlock {
  Parameter<S>*weight, *bias, *gamma, *beta, *running_mean, *running_var;
};

template <typename S>
class Decoder {
 public:
  Decoder(ParameterSet<S>& params, const DecoderConfig& cfg, const EmbedConfig& embed, const EncoderConfig& encoder);

  template <typename Rng>
  void initialize(Rng& rng) {
    for (auto* b : all_blocks_) {
      init_truncated_normal(*b->weight, rng);
      b->bias->value.data.setZero();
      if (b->gamma) {
        b->gamma->value.data.setOnes();
        b->beta->value.data.setZero();
        b->running_mean->value.data.setZero();
        b->running_var->value.data.setOnes();
      }
    }
  }

  /// image (N, 2, H, W, D); taps as returned by Encoder::forward.
  Var<S> forward(Var<S> image, const std::map<Index, Var<S>>& taps, NormMode mode) const;

  Index levels() const { return levels_; }

 private:
  ConvBlock<S> make_block(ParameterSet<S>& params, const std::string& name, Index cin, Index cout, Index kernel,
                          bool transposed, bool norm);
  Var<S> apply(const ConvBlock<S>& b, Var<S> x, bool transposed, NormMode mode, ConvGeometry g) const;

  DecoderConfig cfg_;
  EmbedConfig embed_;
  std::vector<Index> taps_;
  Index levels_ = 0;

  std::vector<ConvBlock<S>> stem_;                     // 2 blocks
  std::vector<std::vector<ConvBlock<S>>> skip_paths_;  // per tap j = 1..T-1
  std::vector<Index> skip_level_;
  std::vector<ConvBlock<S>> up_;                       // per level, index r
  std::vector<std::vector<ConvBlock<S>>> fuse_;        // per level, 2 blocks
  ConvBlock<S> head_{};
  std::vector<ConvBlock<S>*> all_blocks_;
};

}  // namespace segsurv
