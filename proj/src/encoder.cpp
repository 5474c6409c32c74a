#include "segsurv/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace segsurv {

void EncoderConfig::validate() const {
  if (layers < 1 || heads < 1 || hidden < 1 || mlp_hidden < 1)
    throw std::invalid_argument("encoder config: sizes must be positive");
  if (hidden % heads != 0)
    throw std::invalid_argument("encoder config: hidden " + std::to_string(hidden) + " not divisible by heads " +
                                std::to_string(heads));
  if (taps.empty()) throw std::invalid_argument("encoder config: no taps");
  for (Index t : taps)
    if (t < 1 || t > layers) throw std::invalid_argument("encoder config: tap " + std::to_string(t) + " out of range");
}

std::vector<Index> EncoderConfig::default_taps(Index layers) {
  if (layers % 4 != 0) throw std::invalid_argument("default taps need a layer count divisible by 4");
  return {layers / 4, layers / 2, 3 * layers / 4, layers};
}

template <typename S>
Encoder<S>::Encoder(ParameterSet<S>& params, const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const Index h = cfg_.hidden;
  for (Index i = 0; i < cfg_.layers; ++i) {
    const std::string p = "encoder.layer" + std::to_string(i + 1) + ".";
    EncoderLayer<S> l;
    l.ln1_gain = &params.add(p + "ln1.gain", {h});
    l.ln1_bias = &params.add(p + "ln1.bias", {h});
    l.wq = &params.add(p + "attn.q.weight", {h, h});
    l.bq = &params.add(p + "attn.q.bias", {h});
    l.wk = &params.add(p + "attn.k.weight", {h, h});
    l.bk = &params.add(p + "attn.k.bias", {h});
    l.wv = &params.add(p + "attn.v.weight", {h, h});
    l.bv = &params.add(p + "attn.v.bias", {h});
    l.wo = &params.add(p + "attn.out.weight", {h, h});
    l.bo = &params.add(p + "attn.out.bias", {h});
    l.ln2_gain = &params.add(p + "ln2.gain", {h});
    l.ln2_bias = &params.add(p + "ln2.bias", {h});
    l.mlp_w1 = &params.add(p + "mlp.fc1.weight", {h, cfg_.mlp_hidden});
    l.mlp_b1 = &params.add(p + "mlp.fc1.bias", {cfg_.mlp_hidden});
    l.mlp_w2 = &params.add(p + "mlp.fc2.weight", {cfg_.mlp_hidden, h});
    l.mlp_b2 = &params.add(p + "mlp.fc2.bias", {h});
    layers_.push_back(l);
  }
}

template <typename S>
AttentionResult<S> Encoder<S>::attention(Var<S> x, Index layer) const {
  Tape<S>& tape = *x.tape;
  const EncoderLayer<S>& l = layers_.at(static_cast<size_t>(layer));
  const Shape& xs = x.shape();
  if (xs.size() != 3 || xs[2] != cfg_.hidden) throw_shape_error("attention", xs, {cfg_.hidden});
  const Index n = xs[0], m = xs[1], a = cfg_.heads, d = cfg_.head_dim();

  // (N, m, h) -> (N, A, m, d)
  auto heads = [&](Var<S> t) { return transpose(reshape(t, {n, m, a, d}), {0, 2, 1, 3}); };
  Var<S> q = heads(linear(x, tape.param(*l.wq), tape.param(*l.bq)));
  Var<S> k = heads(linear(x, tape.param(*l.wk), tape.param(*l.bk)));
  Var<S> v = heads(linear(x, tape.param(*l.wv), tape.param(*l.bv)));

  Var<S> scores = scale(matmul(q, transpose(k, {0, 1, 3, 2})), S(1) / std::sqrt(static_cast<S>(d)));
  Var<S> weights = softmax_axis(scores, -1);
  Var<S> z = reshape(transpose(matmul(weights, v), {0, 2, 1, 3}), {n, m, cfg_.hidden});
  return {linear(z, tape.param(*l.wo), tape.param(*l.bo)), weights};
}

template <typename S>
std::map<Index, Var<S>> Encoder<S>::forward(Var<S> x) const {
  Tape<S>& tape = *x.tape;
  std::map<Index, Var<S>> taps;
  for (Index i = 0; i < cfg_.layers; ++i) {
    const EncoderLayer<S>& l = layers_[static_cast<size_t>(i)];
    Var<S> normed = layer_norm(x, tape.param(*l.ln1_gain), tape.param(*l.ln1_bias));
    x = add(x, attention(normed, i).output);
    normed = layer_norm(x, tape.param(*l.ln2_gain), tape.param(*l.ln2_bias));
    Var<S> hidden = gelu(linear(normed, tape.param(*l.mlp_w1), tape.param(*l.mlp_b1)));
    x = add(x, linear(hidden, tape.param(*l.mlp_w2), tape.param(*l.mlp_b2)));
    if (std::find(cfg_.taps.begin(), cfg_.taps.end(), i + 1) != cfg_.taps.end()) taps.emplace(i + 1, x);
  }
  return taps;
}

template class Encoder<float>;
template class Encoder<double>;

}  // namespace segsurv
