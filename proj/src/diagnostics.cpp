#include "segsurv/diagnostics.hpp"

#include "segsurv/losses.hpp"
#include "segsurv/model.hpp"

#include <random>
#include <stdexcept>

namespace segsurv {

namespace {

Tensor<double> uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng);
  return t;
}

Tensor<double> binary(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::bernoulli_distribution d(0.4);
  for (Index i = 0; i < t.size(); ++i) t[i] = d(rng) ? 1.0 : 0.0;
  return t;
}

GradCheckReport check_dice(const GradCheckOptions& opts) {
  std::mt19937_64 rng(opts.seed);
  const Tensor<double> target = binary({2, 1, 3, 3, 3}, rng);
  return grad_check([&](Tape<double>&, const std::vector<Var<double>>& in) { return dice_loss(in[0], target, 1e-6); },
                    {uniform({2, 1, 3, 3, 3}, 0.05, 0.95, rng)}, opts);
}

GradCheckReport check_focal(const GradCheckOptions& opts) {
  std::mt19937_64 rng(opts.seed + 1);
  const Tensor<double> target = binary({2, 1, 3, 3, 3}, rng);
  return grad_check(
      [&](Tape<double>&, const std::vector<Var<double>>& in) { return focal_loss(in[0], target, 1.0, 2.0, true); },
      {uniform({2, 1, 3, 3, 3}, 0.05, 0.95, rng)}, opts);
}

GradCheckReport check_mtlr(const GradCheckOptions& opts) {
  std::mt19937_64 rng(opts.seed + 2);
  const Index k = 5;
  std::vector<MtlrLabel> labels;
  for (Index i = 0; i < 6; ++i) {
    MtlrLabel l;
    l.bin = i % k;
    l.event = i % 2;
    labels.push_back(l);
  }
  return grad_check([&](Tape<double>&, const std::vector<Var<double>>& in) { return mtlr_nll(in[0], labels); },
                    {uniform({6, k - 1}, -2.0, 2.0, rng)}, opts);
}

void randomize(ParameterSet<double>& params, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  for (auto& p : params)
    if (p.trainable)
      for (Index i = 0; i < p.value.size(); ++i) p.value[i] = d(rng);
}

GradCheckReport check_attention(const GradCheckOptions& opts) {
  std::mt19937_64 rng(opts.seed + 3);
  EncoderConfig cfg;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.hidden = 8;
  cfg.mlp_hidden = 16;
  cfg.taps = {1};
  ParameterSet<double> params;
  Encoder<double> enc(params, cfg);
  Parameter<double>& x = params.add("input", {2, 5, 8});
  randomize(params, rng, 0.5);
  const Tensor<double> weights = uniform({2, 5, 8}, -1.0, 1.0, rng);
  return grad_check(
      [&](Tape<double>& tape) {
        return sum(mul(enc.attention(tape.param(x), 0).output, tape.constant(weights)));
      },
      params, opts);
}

GradCheckReport check_model(const GradCheckOptions& opts) {
  std::mt19937_64 rng(opts.seed + 4);
  const ModelConfig cfg = ModelConfig::toy(3);
  Model<double> model(cfg);
  model.initialize(opts.seed);
  // Larger weights than the training initializer so every gradient is well above
  // the finite-difference noise floor.
  randomize(model.params(), rng, 0.3);
  for (auto& p : model.params())
    if (p.name.find(".bn.gamma") != std::string::npos) p.value.data.setOnes();

  Batch<double> batch;
  const Index n = 2, tokens = cfg.embed.tokens(), plen = cfg.embed.patch_length();
  const Extent3& in = cfg.embed.input;
  batch.patches = uniform({n, tokens, plen}, -1.0, 1.0, rng);
  batch.ehr = uniform({n, cfg.embed.ehr_features}, -1.0, 1.0, rng);
  batch.image = uniform({n, 2, in[0], in[1], in[2]}, -1.0, 1.0, rng);
  batch.mask = binary({n, 1, in[0], in[1], in[2]}, rng);
  MtlrLabel a, b;
  a.bin = 1;
  a.event = 1;
  b.bin = 2;
  b.event = 0;
  batch.labels = {a, b};
  LossConfig loss;
  return grad_check(
      [&](Tape<double>& tape) {
        return joint_loss(model.forward(tape, batch, NormMode::Train), batch, loss).total;
      },
      model.params(), opts);
}

}  // namespace

GradCheckOptions gradient_suite_options() {
  GradCheckOptions o;
  o.tolerance = 1e-4;
  o.step = 3e-5;
  return o;
}

std::vector<std::string> gradient_suite_components() { return {"dice", "focal", "mtlr_nll", "attention", "model"}; }

std::vector<std::pair<std::string, GradCheckReport>> run_gradient_suite(const std::string& component,
                                                                        const GradCheckOptions& opts) {
  std::vector<std::pair<std::string, GradCheckReport>> out;
  for (const std::string& c : gradient_suite_components()) {
    if (component != "all" && component != c) continue;
    if (c == "dice") out.emplace_back(c, check_dice(opts));
    else if (c == "focal") out.emplace_back(c, check_focal(opts));
    else if (c == "mtlr_nll") out.emplace_back(c, check_mtlr(opts));
    else if (c == "attention") out.emplace_back(c, check_attention(opts));
    else out.emplace_back(c, check_model(opts));
  }
  if (out.empty()) throw std::invalid_argument("gradcheck: unknown component '" + component + "'");
  return out;
}

}  // namespace segsurv
