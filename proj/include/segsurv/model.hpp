// The joint segmentation + survival network: embedder, transformer encoder,
// convolutional decoder and MTLR prognostic head over one shared token stream.
#pragma once

#include "segsurv/dataset.hpp"
#include "segsurv/decoder.hpp"
#include "segsurv/embedder.hpp"
#include "segsurv/encoder.hpp"
#include "segsurv/losses.hpp"
#include "segsurv/prognosis.hpp"

#include "json.hpp"

#include <cstdint>
#include <memory>
#include <vector>

namespace segsurv {

struct ModelConfig {
  EmbedConfig embed;
  EncoderConfig encoder;
  DecoderConfig decoder;
  HeadConfig head;

  /// 32×32×16 input, P=8, h=64, 4 layers, 4 heads.
  static ModelConfig desk();
  /// 80×80×48 input, P=16, h=768, 12 layers, 12 heads, MLP 3072.
  static ModelConfig full();
  /// 8×8×8 input, P=4, h=8, 2 layers, 2 heads; small enough for finite differences.
  static ModelConfig toy(Index ehr_features = 3);

  /// Checks internal consistency (shared widths, taps ending at the last layer).
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep the desk defaults.
  static ModelConfig from_json(const nlohmann::json& j);
};

template <typename S>
struct Batch {
  Tensor<S> patches;  // (N, n, P³·2)
  Tensor<S> ehr;      // (N, F)
  Tensor<S> image;    // (N, 2, H, W, D)
  Tensor<S> mask;     // (N, 1, H, W, D)
  std::vector<MtlrLabel> labels;
  std::vector<std::string> ids;

  Index size() const { return patches.shape.empty() ? 0 : patches.dim(0); }
};

/// Stacks preprocessed subjects. `ehr_features` rows come from `encoder`;
/// labels are binned with `edges` (pass empty edges to skip labels).
template <typename S>
Batch<S> make_batch(const std::vector<const Subject*>& subjects, const EhrEncoder& encoder,
                    const std::vector<double>& edges, const ModelConfig& cfg);

template <typename S>
struct ForwardResult {
  Var<S> tokens;                // (N, n+1, h) after embedding
  std::map<Index, Var<S>> taps; // encoder outputs by layer
  Var<S> logits;                // (N, 1, H, W, D)
  Var<S> scores;                // (N, K-1)
};

template <typename S>
struct LossTerms {
  Var<S> dice, focal, nll, total;
};

template <typename S>
class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  /// Truncated normal (std 0.02) weights, zero biases, unit norm gains.
  void initialize(std::uint64_t seed);

  ForwardResult<S> forward(Tape<S>& tape, const Batch<S>& batch, NormMode mode) const;

  ParameterSet<S>& params() { return *params_; }
  const ParameterSet<S>& params() const { return *params_; }
  const ModelConfig& config() const { return cfg_; }
  const Embedder<S>& embedder() const { return *embed_; }
  const Encoder<S>& encoder() const { return *encoder_; }
  const Decoder<S>& decoder() const { return *decoder_; }
  const PrognosticHead<S>& head() const { return *head_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<ParameterSet<S>> params_;
  std::unique_ptr<Embedder<S>> embed_;
  std::unique_ptr<Encoder<S>> encoder_;
  std::unique_ptr<Decoder<S>> decoder_;
  std::unique_ptr<PrognosticHead<S>> head_;
};

/// dice and focal on sigmoid(logits) against the batch masks, MTLR NLL on the
/// scores, and total = beta·(dice + focal) + (1 - beta)·nll.
template <typename S>
LossTerms<S> joint_loss(const ForwardResult<S>& out, const Batch<S>& batch, const LossConfig& cfg);

/// Parameter group of a parameter name: "embed", "encoder", "decoder", "head" or "mtlr".
std::string parameter_group(const std::string& name);

}  // namespace segsurv
