#include "doctest.h"
#include "helpers.hpp"

#include "segsurv/decoder.hpp"
#include "segsurv/embedder.hpp"
#include "segsurv/encoder.hpp"
#include "segsurv/gradcheck.hpp"
#include "segsurv/losses.hpp"

#include <cmath>

using namespace segsurv;
using testing::random_tensor;

namespace {

Volume random_volume(Extent3 shape, Modality m, std::mt19937_64& rng) {
  Volume v(shape, {1, 1, 1}, m);
  std::uniform_real_distribution<float> d(-1.f, 1.f);
  for (Index i = 0; i < v.voxels(); ++i) v.data[i] = d(rng);
  return v;
}

template <typename S>
void randomize(ParameterSet<S>& params, std::mt19937_64& rng, double scale = 0.3) {
  std::normal_distribution<double> d(0.0, scale);
  for (auto& p : params)
    if (p.trainable)
      for (Index i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<S>(d(rng));
}

EncoderConfig small_encoder(Index layers, Index heads, Index hidden, std::vector<Index> taps) {
  EncoderConfig c;
  c.layers = layers;
  c.heads = heads;
  c.hidden = hidden;
  c.mlp_hidden = 2 * hidden;
  c.taps = std::move(taps);
  return c;
}


// Direct per-element multi-head attention for one sample.
Eigen::MatrixXd dense_attention(const Eigen::MatrixXd& x, const EncoderLayer<double>& l, Index heads,
                                Eigen::MatrixXd* weights_out) {
  auto mat = [](const Parameter<double>& p) {
    return Eigen::MatrixXd(p.value.matrix(p.value.dim(0), p.value.size() / p.value.dim(0)));
  };
  auto vec = [](const Parameter<double>& p) { return Eigen::VectorXd(p.value.data.matrix()); };
  const Index m = x.rows(), h = x.cols(), d = h / heads;
  Eigen::MatrixXd q(m, h), k(m, h), v(m, h);
  const auto wq = mat(*l.wq), wk = mat(*l.wk), wv = mat(*l.wv), wo = mat(*l.wo);
  const auto bq = vec(*l.bq), bk = vec(*l.bk), bv = vec(*l.bv), bo = vec(*l.bo);
  for (Index i = 0; i < m; ++i)
    for (Index c = 0; c < h; ++c) {
      double sq = bq[c], sk = bk[c], sv = bv[c];
      for (Index r = 0; r < h; ++r) {
        sq += x(i, r) * wq(r, c);
        sk += x(i, r) * wk(r, c);
        sv += x(i, r) * wv(r, c);
      }
      q(i, c) = sq;
      k(i, c) = sk;
      v(i, c) = sv;
    }
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(m, h);
  if (weights_out) weights_out->resize(heads * m, m);
  for (Index a = 0; a < heads; ++a)
    for (Index i = 0; i < m; ++i) {
      std::vector<double> s(static_cast<size_t>(m));
      double mx = -1e300;
      for (Index j = 0; j < m; ++j) {
        double dot = 0;
        for (Index c = 0; c < d; ++c) dot += q(i, a * d + c) * k(j, a * d + c);
        s[static_cast<size_t>(j)] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[static_cast<size_t>(j)]);
      }
      double tot = 0;
      for (auto& e : s) tot += (e = std::exp(e - mx));
      for (Index j = 0; j < m; ++j) {
        const double w = s[static_cast<size_t>(j)] / tot;
        if (weights_out) (*weights_out)(a * m + i, j) = w;
        for (Index c = 0; c < d; ++c) z(i, a * d + c) += w * v(j, a * d + c);
      }
    }
  Eigen::MatrixXd out(m, h);
  for (Index i = 0; i < m; ++i)
    for (Index c = 0; c < h; ++c) {
      double s = bo[c];
      for (Index r = 0; r < h; ++r) s += z(i, r) * wo(r, c);
      out(i, c) = s;
    }
  return out;
}

}  // namespace

// ---------------------------------------------------------------- embedder

TEST_CASE("patchify: 80x80x48 with P=16 gives 75 rows of 8192") {
  std::mt19937_64 rng(1);
  const auto ct = random_volume({80, 80, 48}, Modality::CT, rng), pet = random_volume({80, 80, 48}, Modality::PET, rng);
  const auto rows = patchify<float>(ct, pet, 16);
  CHECK(rows.rows() == 75);
  CHECK(rows.cols() == 8192);
  const auto [ct2, pet2] = unpatchify(rows, {80, 80, 48}, 16);
  CHECK((ct2.data == ct.data).all());
  CHECK((pet2.data == pet.data).all());
}

TEST_CASE("patchify: a 16^3 volume with P=16 is one row holding CT then PET in C-order") {
  std::mt19937_64 rng(2);
  const auto ct = random_volume({16, 16, 16}, Modality::CT, rng), pet = random_volume({16, 16, 16}, Modality::PET, rng);
  const auto rows = patchify<double>(ct, pet, 16);
  REQUIRE(rows.rows() == 1);
  for (Index i = 0; i < 4096; ++i) {
    CHECK(rows(0, i) == static_cast<double>(ct.data[i]));
    CHECK(rows(0, 4096 + i) == static_cast<double>(pet.data[i]));
  }
}

TEST_CASE("patchify: constant volumes give identical rows and enumeration is C-order over blocks") {
  const Volume ct({8, 8, 4}, {1, 1, 1}, Modality::CT, 0.25f), pet({8, 8, 4}, {1, 1, 1}, Modality::PET, -2.f);
  const auto rows = patchify<float>(ct, pet, 4);
  REQUIRE(rows.rows() == 4);
  CHECK((rows.leftCols(64).array() == 0.25f).all());
  CHECK((rows.rightCols(64).array() == -2.f).all());

  Volume idx({8, 8, 4}, {1, 1, 1}, Modality::CT);
  for (Index i = 0; i < idx.voxels(); ++i) idx.data[i] = static_cast<float>(i);
  const auto r2 = patchify<float>(idx, pet, 4);
  CHECK(r2(0, 0) == idx.at(0, 0, 0));
  CHECK(r2(1, 0) == idx.at(0, 4, 0));
  CHECK(r2(2, 0) == idx.at(4, 0, 0));
  CHECK(r2(3, 63) == idx.at(7, 7, 3));
  CHECK_THROWS(patchify<float>(Volume({9, 8, 4}, {1, 1, 1}, Modality::CT), Volume({9, 8, 4}, {1, 1, 1}, Modality::PET), 4));
}

TEST_CASE("embedder: full-size token matrix is 76 x 768") {
  EmbedConfig cfg;
  cfg.input = {80, 80, 48};
  cfg.patch = 16;
  cfg.hidden = 768;
  cfg.ehr_features = 22;
  ParameterSet<float> params;
  Embedder<float> emb(params, cfg);
  std::mt19937_64 rng(3);
  emb.initialize(rng);
  CHECK(cfg.tokens() == 75);
  Tape<float> tape;
  auto y = emb.forward(tape.constant(Tensor<float>::constant({1, 75, 8192}, 0.1f)),
                       tape.constant(Tensor<float>::constant({1, 22}, 0.5f)));
  CHECK(y.shape() == Shape{1, 76, 768});
  CHECK(y.value().allfinite());
}

TEST_CASE("embedder: zero projections reproduce the positional table") {
  EmbedConfig cfg;
  cfg.input = {8, 8, 8};
  cfg.patch = 4;
  cfg.hidden = 6;
  cfg.ehr_features = 3;
  ParameterSet<double> params;
  Embedder<double> emb(params, cfg);
  std::mt19937_64 rng(4);
  emb.initialize(rng);
  for (const char* n : {"embed.patch.weight", "embed.patch.bias", "embed.ehr.weight", "embed.ehr.bias"})
    params.get(n).value.data.setZero();
  Tape<double> tape;
  auto y = emb.forward(tape.constant(random_tensor({2, 8, 128}, rng)), tape.constant(random_tensor({2, 3}, rng)));
  const auto& pos = params.get("embed.position").value;
  for (Index s = 0; s < 2; ++s)
    for (Index i = 0; i < pos.size(); ++i) CHECK(y.value()[s * pos.size() + i] == pos[i]);
}

TEST_CASE("embedder: EHR change touches only the last row; embedding is affine") {
  EmbedConfig cfg;
  cfg.input = {8, 8, 8};
  cfg.patch = 4;
  cfg.hidden = 6;
  cfg.ehr_features = 3;
  ParameterSet<double> params;
  Embedder<double> emb(params, cfg);
  std::mt19937_64 rng(5);
  emb.initialize(rng);
  randomize(params, rng);
  const auto patches = random_tensor({1, 8, 128}, rng);
  auto ehr = random_tensor({1, 3}, rng);
  Tape<double> tape;
  const auto a = emb.forward(tape.constant(patches), tape.constant(ehr)).value();
  ehr[1] += 0.7;
  const auto b = emb.forward(tape.constant(patches), tape.constant(ehr)).value();
  const auto am = a.matrix(9, 6), bm = b.matrix(9, 6);
  CHECK((am.topRows(8).array() == bm.topRows(8).array()).all());
  CHECK((am.row(8) - bm.row(8)).cwiseAbs().maxCoeff() > 0);

  // embed(αx) - positional = α (embed(x) - positional), biases zeroed.
  params.get("embed.patch.bias").value.data.setZero();
  params.get("embed.ehr.bias").value.data.setZero();
  const auto& pos = params.get("embed.position").value;
  Tensor<double> p2 = patches, e2 = ehr;
  p2.data *= 2.5;
  e2.data *= 2.5;
  // A tape snapshots a parameter on first use, so edited parameters need a fresh tape.
  Tape<double> t2;
  const auto x1 = emb.forward(t2.constant(patches), t2.constant(ehr)).value();
  const auto x2 = emb.forward(t2.constant(p2), t2.constant(e2)).value();
  for (Index i = 0; i < x1.size(); ++i)
    CHECK(x2[i] - pos[i] == doctest::Approx(2.5 * (x1[i] - pos[i])).epsilon(1e-12));

  CHECK_THROWS_AS(emb.forward(tape.constant(patches), tape.constant(Tensor<double>::zeros({1, 4}))), ShapeError);
}

// ---------------------------------------------------------------- encoder

TEST_CASE("attention: matches a dense loop and rows sum to one") {
  ParameterSet<double> params;
  Encoder<double> enc(params, small_encoder(1, 2, 8, {1}));
  std::mt19937_64 rng(6);
  enc.initialize(rng);
  randomize(params, rng, 0.5);
  const auto x = random_tensor({1, 5, 8}, rng);
  Tape<double> tape;
  const auto r = enc.attention(tape.constant(x), 0);
  Eigen::MatrixXd w;
  const Eigen::MatrixXd ref = dense_attention(x.matrix(5, 8).cast<double>(), enc.layer(0), 2, &w);
  const auto out = r.output.value().matrix(5, 8);
  CHECK((out - ref).cwiseAbs().maxCoeff() < 1e-12);
  const auto wv = r.weights.value().matrix(10, 5);
  CHECK((wv - w).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((wv.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
}

TEST_CASE("attention: one token is a linear map and zero queries attend uniformly") {
  ParameterSet<double> params;
  Encoder<double> enc(params, small_encoder(1, 2, 8, {1}));
  std::mt19937_64 rng(7);
  enc.initialize(rng);
  randomize(params, rng, 0.5);
  const auto& l = enc.layer(0);

  const auto x1 = random_tensor({1, 1, 8}, rng);
  Tape<double> tape;
  const auto r1 = enc.attention(tape.constant(x1), 0);
  const Eigen::RowVectorXd xv = x1.matrix(1, 8);
  const Eigen::RowVectorXd v = xv * l.wv->value.matrix(8, 8) + l.bv->value.data.matrix().transpose();
  const Eigen::RowVectorXd expect = v * l.wo->value.matrix(8, 8) + l.bo->value.data.matrix().transpose();
  CHECK((r1.output.value().matrix(1, 8) - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((r1.weights.value().data == 1.0).all());

  l.wq->value.data.setZero();
  l.bq->value.data.setZero();
  Tape<double> t2;
  const auto r = enc.attention(t2.constant(random_tensor({2, 6, 8}, rng)), 0);
  CHECK((r.weights.value().data - 1.0 / 6.0).abs().maxCoeff() < 1e-15);
}

TEST_CASE("encoder: zero residual branches make every tap the input") {
  ParameterSet<double> params;
  Encoder<double> enc(params, small_encoder(4, 2, 8, {1, 2, 3, 4}));
  std::mt19937_64 rng(8);
  enc.initialize(rng);
  for (auto& p : params)
    if (p.name.find("gain") == std::string::npos) p.value.data.setZero();
  const auto x = random_tensor({1, 5, 8}, rng);
  Tape<double> tape;
  const auto taps = enc.forward(tape.constant(x));
  REQUIRE(taps.size() == 4);
  for (const auto& [layer, z] : taps) CHECK((z.value().data == x.data).all());
}

TEST_CASE("encoder: last-layer tap equals the full forward and shapes are preserved") {
  std::mt19937_64 rng(9);
  ParameterSet<double> pa, pb;
  Encoder<double> a(pa, small_encoder(3, 2, 8, {1, 2, 3})), b(pb, small_encoder(3, 2, 8, {3}));
  a.initialize(rng);
  randomize(pa, rng);
  for (size_t i = 0; i < pa.size(); ++i) pb[i].value = pa[i].value;
  const auto x = random_tensor({2, 5, 8}, rng);
  Tape<double> tape;
  const auto ta = a.forward(tape.constant(x)), tb = b.forward(tape.constant(x));
  REQUIRE(tb.size() == 1);
  for (const auto& [layer, z] : ta) CHECK(z.shape() == x.shape);
  CHECK((ta.at(3).value().data == tb.at(3).value().data).all());
}

TEST_CASE("encoder: EHR token perturbation reaches image tokens at the first tap") {
  ParameterSet<double> params;
  Encoder<double> enc(params, small_encoder(4, 2, 8, {1, 2, 3, 4}));
  std::mt19937_64 rng(10);
  enc.initialize(rng);
  randomize(params, rng);
  auto x = random_tensor({1, 5, 8}, rng);
  Tape<double> tape;
  const auto z1 = enc.forward(tape.constant(x)).at(1).value();
  // A uniform shift would be removed by the layer norm; perturb one feature.
  x[4 * 8 + 3] += 0.5;
  const auto z2 = enc.forward(tape.constant(x)).at(1).value();
  CHECK((z1.matrix(5, 8).topRows(4) - z2.matrix(5, 8).topRows(4)).cwiseAbs().maxCoeff() > 1e-6);

  // Directional derivative of the image rows with respect to the EHR row is nonzero.
  Tape<double> t2;
  auto xv = t2.input(x);
  auto out = enc.forward(xv).at(4);
  auto w = random_tensor({1, 4, 8}, rng);
  t2.backward(sum(mul(slice(out, 1, 0, 4), t2.constant(w))));
  const auto g = t2.grad(xv);
  CHECK(g.matrix(5, 8).row(4).cwiseAbs().maxCoeff() > 1e-8);
}

TEST_CASE("encoder: permutation equivariant without positions") {
  ParameterSet<double> params;
  Encoder<double> enc(params, small_encoder(2, 2, 8, {1, 2}));
  std::mt19937_64 rng(11);
  enc.initialize(rng);
  randomize(params, rng);
  const auto x = random_tensor({1, 5, 8}, rng);
  const std::vector<Index> perm{3, 0, 4, 1, 2};
  Tensor<double> xp({1, 5, 8});
  for (Index i = 0; i < 5; ++i) xp.matrix(5, 8).row(i) = x.matrix(5, 8).row(perm[static_cast<size_t>(i)]);
  Tape<double> tape;
  const auto z = enc.forward(tape.constant(x)).at(2).value();
  const auto zp = enc.forward(tape.constant(xp)).at(2).value();
  for (Index i = 0; i < 5; ++i)
    CHECK((zp.matrix(5, 8).row(i) - z.matrix(5, 8).row(perm[static_cast<size_t>(i)])).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("encoder: invalid configurations are rejected") {
  ParameterSet<double> params;
  CHECK_THROWS(Encoder<double>(params, small_encoder(2, 3, 8, {2})));
  CHECK_THROWS(Encoder<double>(params, small_encoder(2, 2, 8, {3})));
  CHECK(EncoderConfig::default_taps(12) == std::vector<Index>{3, 6, 9, 12});
}

// ---------------------------------------------------------------- decoder

TEST_CASE("tokens_to_grid: 75 rows on a 5x5x3 grid, EHR row dropped, round trip") {
  std::mt19937_64 rng(12);
  const auto t = random_tensor({2, 76, 4}, rng);
  Tape<double> tape;
  auto g = tokens_to_grid(tape.constant(t), Extent3{5, 5, 3});
  CHECK(g.shape() == Shape{2, 4, 5, 5, 3});
  // Token r sits at grid cell r in C-order: value of (sample 1, channel 2, cell (1,2,0)).
  const Index r = (1 * 5 + 2) * 3 + 0;
  CHECK(g.value()[((1 * 4 + 2) * 75) + r] == t[(1 * 76 + r) * 4 + 2]);
  auto back = grid_to_tokens(g);
  CHECK(back.shape() == Shape{2, 75, 4});
  CHECK((back.value().matrix(150, 4).topRows(75).array() == t.matrix(152, 4).topRows(75).array()).all());

  Tensor<double> c({1, 76, 3});
  for (Index i = 0; i < 76; ++i) c.matrix(76, 3).row(i) << 1.0, -2.0, 0.5;
  const auto gc = tokens_to_grid(tape.constant(c), Extent3{5, 5, 3}).value();
  CHECK((gc.data.segment(0, 75) == 1.0).all());
  CHECK((gc.data.segment(75, 75) == -2.0).all());
  CHECK_THROWS(tokens_to_grid(tape.constant(Tensor<double>::zeros({1, 74, 3})), Extent3{5, 5, 3}));
}

namespace {

struct DecoderRig {
  EmbedConfig embed;
  EncoderConfig enc;
  DecoderConfig dec;
  ParameterSet<double> params;
  std::unique_ptr<Decoder<double>> decoder;

  DecoderRig(Extent3 input, Index patch, std::vector<Index> widths, Index hidden = 4) {
    embed.input = input;
    embed.patch = patch;
    embed.hidden = hidden;
    embed.ehr_features = 3;
    enc = small_encoder(4, 2, hidden, {1, 2, 3, 4});
    dec.widths = std::move(widths);
    decoder = std::make_unique<Decoder<double>>(params, dec, embed, enc);
  }

  std::map<Index, Var<double>> taps(Tape<double>& tape, std::mt19937_64& rng, Index n = 1) {
    std::map<Index, Var<double>> t;
    for (Index l : enc.taps) t.emplace(l, tape.constant(random_tensor({n, embed.tokens() + 1, embed.hidden}, rng)));
    return t;
  }
};

}  // namespace

TEST_CASE("decoder: logits shape equals the input volume shape") {
  std::mt19937_64 rng(13);
  SUBCASE("80x80x48, P=16") {
    DecoderRig rig({80, 80, 48}, 16, {2, 2, 2, 2});
    rig.decoder->initialize(rng);
    CHECK(rig.decoder->levels() == 4);
    Tape<double> tape;
    const auto image = tape.constant(random_tensor({1, 2, 80, 80, 48}, rng));
    CHECK(rig.decoder->forward(image, rig.taps(tape, rng), NormMode::Train).shape() == Shape{1, 1, 80, 80, 48});
  }
  SUBCASE("16^3, P=16, one token") {
    DecoderRig rig({16, 16, 16}, 16, {2, 3, 4, 5});
    rig.decoder->initialize(rng);
    Tape<double> tape;
    const auto image = tape.constant(random_tensor({2, 2, 16, 16, 16}, rng));
    CHECK(rig.decoder->forward(image, rig.taps(tape, rng, 2), NormMode::Eval).shape() == Shape{2, 1, 16, 16, 16});
  }
  SUBCASE("32x32x16, P=8") {
    DecoderRig rig({32, 32, 16}, 8, {3, 4, 5});
    rig.decoder->initialize(rng);
    Tape<double> tape;
    const auto image = tape.constant(random_tensor({1, 2, 32, 32, 16}, rng));
    CHECK(rig.decoder->forward(image, rig.taps(tape, rng), NormMode::Train).shape() == Shape{1, 1, 32, 32, 16});
  }
  SUBCASE("missing tap is an error") {
    DecoderRig rig({16, 16, 8}, 8, {2, 2, 2});
    rig.decoder->initialize(rng);
    Tape<double> tape;
    auto t = rig.taps(tape, rng);
    t.erase(2);
    CHECK_THROWS(rig.decoder->forward(tape.constant(random_tensor({1, 2, 16, 16, 8}, rng)), t, NormMode::Train));
  }
}

TEST_CASE("decoder: all-zero parameters give spatially constant logits") {
  std::mt19937_64 rng(14);
  DecoderRig rig({16, 16, 8}, 8, {2, 3, 4});
  rig.decoder->initialize(rng);
  for (auto& p : rig.params) p.value.data.setZero();
  Tape<double> tape;
  const auto y = rig.decoder
                     ->forward(tape.constant(random_tensor({1, 2, 16, 16, 8}, rng)), rig.taps(tape, rng),
                               NormMode::Train)
                     .value();
  CHECK((y.data == y.data[0]).all());
}

TEST_CASE("decoder: never reads the EHR row of the taps") {
  std::mt19937_64 rng(15);
  DecoderRig rig({16, 16, 8}, 8, {2, 3, 4});
  rig.decoder->initialize(rng);
  randomize(rig.params, rng);
  const auto image = random_tensor({1, 2, 16, 16, 8}, rng);
  std::map<Index, Tensor<double>> taps;
  for (Index l : rig.enc.taps) taps.emplace(l, random_tensor({1, rig.embed.tokens() + 1, 4}, rng));
  auto run = [&]() {
    Tape<double> tape;
    std::map<Index, Var<double>> t;
    for (auto& [l, v] : taps) t.emplace(l, tape.constant(v));
    return rig.decoder->forward(tape.constant(image), t, NormMode::Eval).value();
  };
  const auto a = run();
  for (auto& [l, v] : taps)
    for (Index c = 0; c < 4; ++c) v.matrix(rig.embed.tokens() + 1, 4)(rig.embed.tokens(), c) += 3.0;
  const auto b = run();
  CHECK((a.data == b.data).all());
}

TEST_CASE("decoder: dice gradient matches finite differences on a 16^3 configuration") {
  std::mt19937_64 rng(16);
  DecoderRig rig({16, 16, 16}, 8, {2, 2, 3});
  rig.decoder->initialize(rng);
  randomize(rig.params, rng, 0.3);
  for (auto& p : rig.params)
    if (p.name.find(".bn.gamma") != std::string::npos) p.value.data.setOnes();
  const auto image = random_tensor({1, 2, 16, 16, 16}, rng);
  Tensor<double> mask({1, 1, 16, 16, 16});
  for (Index i = 0; i < mask.size(); ++i) mask[i] = (i % 7) < 3 ? 1.0 : 0.0;
  std::map<Index, Tensor<double>> taps;
  for (Index l : rig.enc.taps) taps.emplace(l, random_tensor({1, rig.embed.tokens() + 1, 4}, rng));
  GradCheckOptions opts;
  opts.tolerance = 1e-4;
  opts.max_entries = 6;
  // Many ReLU inputs sit near zero at 16^3, so a smaller step keeps probes off
  // the kinks. Biases ahead of batch norm have exactly zero gradient; their
  // finite differences are pure roundoff (about 1e-10), hence the larger floor.
  opts.step = 1e-6;
  opts.floor = 1e-5;
  const auto report = grad_check(
      [&](Tape<double>& tape) {
        std::map<Index, Var<double>> t;
        for (auto& [l, v] : taps) t.emplace(l, tape.constant(v));
        return dice_loss(sigmoid(rig.decoder->forward(tape.constant(image), t, NormMode::Train)), mask, 1e-6);
      },
      rig.params, opts);
  for (const auto& e : report.entries)
    if (e.max_rel_error > opts.tolerance) MESSAGE(e.name << " rel " << e.max_rel_error << " abs " << e.max_abs_error);
  CHECK_MESSAGE(report.passed, "max rel error " << report.max_rel_error);
}

TEST_CASE("logits_to_mask: threshold rules") {
  Volume l({1, 1, 4}, {1, 1, 1}, Modality::PET);
  l.data << 0.0f, 10.0f, -10.0f, 0.1f;
  const auto m = logits_to_mask(l);
  CHECK(m.modality == Modality::MASK);
  CHECK(m.data[0] == 1.0f);
  CHECK(m.data[1] == 1.0f);
  CHECK(m.data[2] == 0.0f);
  CHECK(m.data[3] == 1.0f);
  CHECK((logits_to_mask(l, 1.0).data == 0.0f).all());
}
