// Pre-norm transformer encoder over the (n+1)-token sequence.
//
// Each layer computes
//   x = x + Attn(LN1(x));  x = x + MLP(LN2(x))
// with per-head scaled dot-product attention softmax(Q Kᵀ / sqrt(h/A)) V and a
// GELU MLP of width mlp_hidden. Outputs after the requested layers (1-based)
// are returned as skip taps.
#pragma once

#include "segsurv/init.hpp"
#include "segsurv/ops.hpp"

#include <map>
#include <vector>

namespace segsurv {

struct EncoderConfig {
  Index layers = 4;
  Index heads = 4;
  Index hidden = 64;
  Index mlp_hidden = 256;
  std::vector<Index> taps{1, 2, 3, 4};

  Index head_dim() const { return hidden / heads; }
  void validate() const;
  /// Four evenly spaced taps ending at the last layer: {L/4, L/2, 3L/4, L}.
  static std::vector<Index> default_taps(Index layers);
};

template <typename S>
struct EncoderLayer {
  Parameter<S>*ln1_gain, *ln1_bias;
  Parameter<S>*wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
  Parameter<S>*ln2_gain, *ln2_bias;
  Parameter<S>*mlp_w1, *mlp_b1, *mlp_w2, *mlp_b2;
};

template <typename S>
struct AttentionResult {
  Var<S> output;   // (N, m, h)
  Var<S> weights;  // (N, A, m, m), rows sum to one
};

template <typename S>
class Encoder {
 public:
  Encoder(ParameterSet<S>& params, const EncoderConfig& cfg);

  template <typename Rng>
  void initialize(Rng& rng) {
    for (auto& l : layers_) {
      for (auto* w : {l.wq, l.wk, l.wv, l.wo, l.mlp_w1, l.mlp_w2}) init_truncated_normal(*w, rng);
      for (auto* b : {l.bq, l.bk, l.bv, l.bo, l.mlp_b1, l.mlp_b2, l.ln1_bias, l.ln2_bias}) b->value.data.setZero();
      l.ln1_gain->value.data.setOnes();
      l.ln2_gain->value.data.setOnes();
    }
  }

  /// Multi-head self-attention of one layer applied to x (N, m, h), no norm or residual.
  AttentionResult<S> attention(Var<S> x, Index layer) const;

  /// Runs every layer; returns {tap -> output after that layer}.
  std::map<Index, Var<S>> forward(Var<S> x) const;

  const EncoderConfig& config() const { return cfg_; }
  const EncoderLayer<S>& layer(Index i) const { return layers_.at(static_cast<size_t>(i)); }

 private:
  EncoderConfig cfg_;
  std::vector<EncoderLayer<S>> layers_;
};

}  // namespace segsurv
