#include "segsurv/model.hpp"

#include <random>
#include <stdexcept>

namespace segsurv {

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
  ModelConfig c;
  c.embed.input = {80, 80, 48};
  c.embed.patch = 16;
  c.embed.hidden = 768;
  c.encoder.layers = 12;
  c.encoder.heads = 12;
  c.encoder.hidden = 768;
  c.encoder.mlp_hidden = 3072;
  c.encoder.taps = EncoderConfig::default_taps(12);
  c.decoder.widths = {64, 128, 256, 512};
  c.head.hidden = 768;
  return c;
}

ModelConfig ModelConfig::toy(Index ehr_features) {
  ModelConfig c;
  c.embed.input = {8, 8, 8};
  c.embed.patch = 4;
  c.embed.hidden = 8;
  c.embed.ehr_features = ehr_features;
  c.encoder.layers = 2;
  c.encoder.heads = 2;
  c.encoder.hidden = 8;
  c.encoder.mlp_hidden = 16;
  c.encoder.taps = {1, 2};
  c.decoder.widths = {2, 3};
  c.head = {8, 8, 4, 4};
  return c;
}

void ModelConfig::validate() const {
  embed.validate();
  encoder.validate();
  if (encoder.hidden != embed.hidden || head.hidden != embed.hidden)
    throw std::invalid_argument("model config: embed, encoder and head widths differ (" + std::to_string(embed.hidden) +
                                ", " + std::to_string(encoder.hidden) + ", " + std::to_string(head.hidden) + ")");
  Index last = 0;
  for (Index t : encoder.taps) last = std::max(last, t);
  if (last != encoder.layers) throw std::invalid_argument("model config: encoder taps must include the last layer");
  if (head.bins < 2) throw std::invalid_argument("model config: need at least 2 time bins");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"input", {embed.input[0], embed.input[1], embed.input[2]}},
          {"patch", embed.patch},
          {"hidden", embed.hidden},
          {"ehr_features", embed.ehr_features},
          {"layers", encoder.layers},
          {"heads", encoder.heads},
          {"mlp_hidden", encoder.mlp_hidden},
          {"taps", encoder.taps},
          {"decoder_widths", decoder.widths},
          {"fc1", head.fc1},
          {"fc2", head.fc2},
          {"bins", head.bins}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (j.contains("preset")) {
    const std::string p = j.at("preset");
    if (p == "full") c = full();
    else if (p == "toy") c = toy();
    else if (p != "desk") throw std::invalid_argument("model config: unknown preset '" + p + "'");
  }
  if (j.contains("input")) {
    const auto v = j.at("input").get<std::vector<Index>>();
    if (v.size() != 3) throw std::invalid_argument("model config: input needs 3 extents");
    c.embed.input = {v[0], v[1], v[2]};
  }
  c.embed.patch = j.value("patch", c.embed.patch);
  c.embed.hidden = j.value("hidden", c.embed.hidden);
  c.encoder.hidden = c.head.hidden = c.embed.hidden;
  c.embed.ehr_features = j.value("ehr_features", c.embed.ehr_features);
  const Index old_layers = c.encoder.layers;
  c.encoder.layers = j.value("layers", c.encoder.layers);
  c.encoder.heads = j.value("heads", c.encoder.heads);
  c.encoder.mlp_hidden = j.value("mlp_hidden", c.encoder.mlp_hidden);
  if (j.contains("taps")) c.encoder.taps = j.at("taps").get<std::vector<Index>>();
  else if (c.encoder.layers != old_layers) c.encoder.taps = EncoderConfig::default_taps(c.encoder.layers);
  if (j.contains("decoder_widths")) c.decoder.widths = j.at("decoder_widths").get<std::vector<Index>>();
  c.head.fc1 = j.value("fc1", c.head.fc1);
  c.head.fc2 = j.value("fc2", c.head.fc2);
  c.head.bins = j.value("bins", c.head.bins);
  c.validate();
  return c;
}

template <typename S>
Batch<S> make_batch(const std::vector<const Subject*>& subjects, const EhrEncoder& encoder,
                    const std::vector<double>& edges, const ModelConfig& cfg) {
  if (subjects.empty()) throw std::invalid_argument("make_batch: no subjects");
  const Index n = static_cast<Index>(subjects.size());
  const Extent3& in = cfg.embed.input;
  const Index vox = in[0] * in[1] * in[2];
  const Index tokens = cfg.embed.tokens(), plen = cfg.embed.patch_length();
  if (encoder.length() != cfg.embed.ehr_features)
    throw std::invalid_argument("make_batch: EHR encoder yields " + std::to_string(encoder.length()) +
                                " features but the model expects " + std::to_string(cfg.embed.ehr_features));
  Batch<S> b;
  b.patches = Tensor<S>({n, tokens, plen});
  b.ehr = Tensor<S>({n, cfg.embed.ehr_features});
  b.image = Tensor<S>({n, 2, in[0], in[1], in[2]});
  b.mask = Tensor<S>({n, 1, in[0], in[1], in[2]});
  for (Index i = 0; i < n; ++i) {
    const Subject& s = *subjects[static_cast<size_t>(i)];
    check_subject_geometry(s);
    if (s.ct.shape != in)
      throw ShapeError("make_batch: subject " + s.id + " has extent " +
                       shape_str({s.ct.shape[0], s.ct.shape[1], s.ct.shape[2]}) + ", model expects " +
                       shape_str({in[0], in[1], in[2]}));
    const RowMatrix<S> p = patchify<S>(s.ct, s.pet, cfg.embed.patch);
    b.patches.data.segment(i * tokens * plen, tokens * plen) =
        Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(p.data(), p.size());
    b.ehr.data.segment(i * cfg.embed.ehr_features, cfg.embed.ehr_features) =
        encoder.encode(s.ehr).array().template cast<S>();
    b.image.data.segment(2 * i * vox, vox) = s.ct.data.template cast<S>();
    b.image.data.segment((2 * i + 1) * vox, vox) = s.pet.data.template cast<S>();
    b.mask.data.segment(i * vox, vox) = s.mask.data.template cast<S>();
    if (!edges.empty()) b.labels.push_back(encode_mtlr_label(s.label, edges));
    b.ids.push_back(s.id);
  }
  return b;
}

template <typename S>
Model<S>::Model(const ModelConfig& cfg) : cfg_(cfg), params_(std::make_unique<ParameterSet<S>>()) {
  cfg_.validate();
  embed_ = std::make_unique<Embedder<S>>(*params_, cfg_.embed);
  encoder_ = std::make_unique<Encoder<S>>(*params_, cfg_.encoder);
  decoder_ = std::make_unique<Decoder<S>>(*params_, cfg_.decoder, cfg_.embed, cfg_.encoder);
  head_ = std::make_unique<PrognosticHead<S>>(*params_, cfg_.head);
}

template <typename S>
void Model<S>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  embed_->initialize(rng);
  encoder_->initialize(rng);
  decoder_->initialize(rng);
  head_->initialize(rng);
}

template <typename S>
ForwardResult<S> Model<S>::forward(Tape<S>& tape, const Batch<S>& batch, NormMode mode) const {
  ForwardResult<S> out;
  out.tokens = embed_->forward(tape.constant(batch.patches), tape.constant(batch.ehr));
  out.taps = encoder_->forward(out.tokens);
  out.logits = decoder_->forward(tape.constant(batch.image), out.taps, mode);
  out.scores = head_->mtlr_logits(head_->features(out.taps.at(cfg_.encoder.layers)));
  return out;
}

template <typename S>
LossTerms<S> joint_loss(const ForwardResult<S>& out, const Batch<S>& batch, const LossConfig& cfg) {
  cfg.validate();
  LossTerms<S> t;
  Var<S> probs = sigmoid(out.logits);
  t.dice = dice_loss(probs, batch.mask, static_cast<S>(cfg.dice_eps));
  t.focal = focal_loss(probs, batch.mask, static_cast<S>(cfg.alpha), static_cast<S>(cfg.gamma), cfg.focal_mean);
  t.nll = mtlr_nll(out.scores, batch.labels);
  t.total = combined_loss(t.dice, t.focal, t.nll, static_cast<S>(cfg.beta));
  return t;
}

std::string parameter_group(const std::string& name) {
  const auto dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

template Batch<float> make_batch(const std::vector<const Subject*>&, const EhrEncoder&, const std::vector<double>&,
                                 const ModelConfig&);
template Batch<double> make_batch(const std::vector<const Subject*>&, const EhrEncoder&, const std::vector<double>&,
                                  const ModelConfig&);
template class Model<float>;
template class Model<double>;
template LossTerms<float> joint_loss(const ForwardResult<float>&, const Batch<float>&, const LossConfig&);
template LossTerms<double> joint_loss(const ForwardResult<double>&, const Batch<double>&, const LossConfig&);

}  // namespace segsurv
