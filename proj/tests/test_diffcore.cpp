#include "doctest.h"
#include "helpers.hpp"

#include "segsurv/gradcheck.hpp"
#include "segsurv/ops.hpp"

#include <cmath>

using namespace segsurv;
using testing::random_tensor;

namespace {

using Fn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

// Reduces any output to a scalar with fixed random weights so every output
// entry contributes a distinct gradient.
Var<double> weighted(Var<double> y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, y.tape->constant(random_tensor(y.shape(), rng))));
}

void expect_gradients(const Fn& f, const std::vector<Tensor<double>>& inputs, double tol = 1e-6) {
  GradCheckOptions opts;
  opts.tolerance = tol;
  const auto report = grad_check(f, inputs, opts);
  for (const auto& e : report.entries) CAPTURE(e.name);
  CHECK_MESSAGE(report.passed, "max rel error " << report.max_rel_error);
}

// Direct sevenfold loop; w is (Cout, Cin, k, k, k).
Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                          const ConvGeometry& g) {
  const Index n = x.dim(0), cin = x.dim(1), cout = w.dim(0), k = g.kernel;
  const Index X = x.dim(2), Y = x.dim(3), Z = x.dim(4);
  const Index ox = conv_out_extent(X, g), oy = conv_out_extent(Y, g), oz = conv_out_extent(Z, g);
  Tensor<double> out({n, cout, ox, oy, oz});
  auto xat = [&](Index s, Index c, Index i, Index j, Index l) { return x[(((s * cin + c) * X + i) * Y + j) * Z + l]; };
  for (Index s = 0; s < n; ++s)
    for (Index co = 0; co < cout; ++co)
      for (Index i = 0; i < ox; ++i)
        for (Index j = 0; j < oy; ++j)
          for (Index l = 0; l < oz; ++l) {
            double acc = b[co];
            for (Index ci = 0; ci < cin; ++ci)
              for (Index a = 0; a < k; ++a)
                for (Index bb = 0; bb < k; ++bb)
                  for (Index c = 0; c < k; ++c) {
                    const Index xi = i * g.stride - g.padding + a, yj = j * g.stride - g.padding + bb,
                                zl = l * g.stride - g.padding + c;
                    if (xi < 0 || yj < 0 || zl < 0 || xi >= X || yj >= Y || zl >= Z) continue;
                    acc += w[(((co * cin + ci) * k + a) * k + bb) * k + c] * xat(s, ci, xi, yj, zl);
                  }
            out[(((s * cout + co) * ox + i) * oy + j) * oz + l] = acc;
          }
  return out;
}

// Scatter form of the transposed convolution; w is (Cin, Cout, k, k, k).
Tensor<double> naive_conv_transpose(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                    const ConvGeometry& g) {
  const Index n = x.dim(0), cin = x.dim(1), cout = w.dim(1), k = g.kernel;
  const Index X = x.dim(2), Y = x.dim(3), Z = x.dim(4);
  const Index ox = conv_transpose_out_extent(X, g), oy = conv_transpose_out_extent(Y, g),
              oz = conv_transpose_out_extent(Z, g);
  Tensor<double> out({n, cout, ox, oy, oz});
  for (Index s = 0; s < n; ++s)
    for (Index co = 0; co < cout; ++co)
      for (Index v = 0; v < ox * oy * oz; ++v) out[(s * cout + co) * ox * oy * oz + v] = b[co];
  for (Index s = 0; s < n; ++s)
    for (Index ci = 0; ci < cin; ++ci)
      for (Index i = 0; i < X; ++i)
        for (Index j = 0; j < Y; ++j)
          for (Index l = 0; l < Z; ++l) {
            const double xv = x[(((s * cin + ci) * X + i) * Y + j) * Z + l];
            for (Index co = 0; co < cout; ++co)
              for (Index a = 0; a < k; ++a)
                for (Index bb = 0; bb < k; ++bb)
                  for (Index c = 0; c < k; ++c) {
                    const Index oi = i * g.stride - g.padding + a, oj = j * g.stride - g.padding + bb,
                                ol = l * g.stride - g.padding + c;
                    if (oi < 0 || oj < 0 || ol < 0 || oi >= ox || oj >= oy || ol >= oz) continue;
                    out[(((s * cout + co) * ox + oi) * oy + oj) * oz + ol] +=
                        w[(((ci * cout + co) * k + a) * k + bb) * k + c] * xv;
                  }
          }
  return out;
}

}  // namespace

TEST_CASE("tape: gradient of sum is all ones") {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  auto x = tape.input(random_tensor({2, 3, 4}, rng));
  tape.backward(sum(x));
  const auto g = tape.grad(x);
  CHECK(g.shape == Shape{2, 3, 4});
  CHECK((g.data == 1.0).all());
}

TEST_CASE("tape: x squared at 3 has gradient 6") {
  Tape<double> tape;
  auto x = tape.input(Tensor<double>::scalar(3.0));
  auto y = mul(x, x);
  CHECK(y.value().item() == 9.0);
  tape.backward(y);
  CHECK(tape.grad(x).item() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("tape: parameter not on the loss path gets exactly zero gradient") {
  ParameterSet<double> params;
  auto& used = params.add("used", {3});
  auto& unused = params.add("unused", {3});
  used.value.data << 1, 2, 3;
  unused.value.data << 4, 5, 6;
  Tape<double> tape;
  auto u = tape.param(used);
  tape.param(unused);
  tape.backward(sum(mul(u, u)));
  CHECK((unused.grad.data == 0.0).all());
  CHECK(used.grad[2] == doctest::Approx(6.0));
}

TEST_CASE("tape: parameter gradients accumulate across repeated use") {
  ParameterSet<double> params;
  auto& p = params.add("p", {2});
  p.value.data << 1.5, -2.0;
  Tape<double> tape;
  auto a = tape.param(p);
  auto b = tape.param(p);
  CHECK(a.id == b.id);
  tape.backward(sum(add(a, b)));
  CHECK((p.grad.data == 2.0).all());
}

TEST_CASE("tape: backward twice and non-scalar loss are rejected") {
  Tape<double> tape;
  auto x = tape.input(Tensor<double>::constant({2}, 1.0));
  CHECK_THROWS(tape.backward(x));
  auto s = sum(x);
  tape.backward(s);
  CHECK_THROWS(tape.backward(s));
  tape.reset();
  CHECK(tape.size() == 0);
}

TEST_CASE("ops: shape mismatches raise ShapeError naming the primitive") {
  Tape<double> tape;
  auto a = tape.input(Tensor<double>::zeros({2, 3}));
  auto b = tape.input(Tensor<double>::zeros({4, 5}));
  CHECK_THROWS_AS(matmul(a, b), ShapeError);
  CHECK_THROWS_AS(add(a, b), ShapeError);
  try {
    mul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("mul") != std::string::npos);
  }
  CHECK_THROWS_AS(reshape(a, {7}), ShapeError);
}

TEST_CASE("ops: forward values against hand computations") {
  Tape<double> tape;
  Tensor<double> av({2, 2}), bv({2, 2});
  av.data << 1, 2, 3, 4;
  bv.data << 5, 6, 7, 8;
  auto a = tape.constant(av);
  auto b = tape.constant(bv);
  const auto m = matmul(a, b).value();
  CHECK(m.data[0] == 19);
  CHECK(m.data[1] == 22);
  CHECK(m.data[2] == 43);
  CHECK(m.data[3] == 50);

  Tensor<double> lv({3});
  lv.data << 1, 2, 3;
  const auto sm = softmax_axis(tape.constant(lv), 0).value();
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(sm[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-14));
  CHECK(sm[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-14));
  CHECK(sm.data.sum() == doctest::Approx(1.0).epsilon(1e-15));

  Tensor<double> rv({4});
  rv.data << -1, 0, 0.5, 2;
  const auto r = relu(tape.constant(rv)).value();
  CHECK(r[0] == 0);
  CHECK(r[1] == 0);
  CHECK(r[2] == 0.5);
  CHECK(r[3] == 2);

  const auto t = transpose(a, {1, 0}).value();
  CHECK(t[1] == 3);
  CHECK(t[2] == 2);

  const auto c = concat<double>({a, b}, 1).value();
  CHECK(c.shape == Shape{2, 4});
  CHECK(c[2] == 5);
  CHECK(c[4] == 3);

  const auto sl = slice(a, 0, 1, 2).value();
  CHECK(sl.shape == Shape{1, 2});
  CHECK(sl[0] == 3);

  const auto mn = mean_axis(a, 0).value();
  CHECK(mn[0] == 2);
  CHECK(mn[1] == 3);
}

TEST_CASE("ops: softmax is stable for large logits") {
  Tape<double> tape;
  Tensor<double> v({3});
  v.data << 1000, 1000, 999;
  const auto s = softmax_axis(tape.constant(v), 0).value();
  CHECK(s.allfinite());
  CHECK(s[0] == doctest::Approx(s[1]));
}

TEST_CASE("ops: layer norm output has zero mean and unit variance per row") {
  Tape<double> tape;
  std::mt19937_64 rng(4);
  auto x = tape.constant(random_tensor({3, 8}, rng, -5, 5));
  auto y = layer_norm(x, tape.constant(Tensor<double>::constant({8}, 1.0)), tape.constant(Tensor<double>::zeros({8})))
               .value();
  for (Index r = 0; r < 3; ++r) {
    const auto row = y.matrix().row(r);
    CHECK(row.mean() == doctest::Approx(0.0).epsilon(1e-12));
    CHECK((row.array().square().mean()) == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("ops: finite-difference gradients of every primitive") {
  std::mt19937_64 rng(11);
  const auto A = random_tensor({2, 3, 4}, rng);
  const auto B = random_tensor({2, 3, 4}, rng);
  const auto W = random_tensor({4, 5}, rng);
  const auto bias = random_tensor({5}, rng);
  const auto pos = random_tensor({3, 4}, rng);

  SUBCASE("matmul shared") { expect_gradients([](auto&, auto& in) { return weighted(matmul(in[0], in[1])); }, {A, W}); }
  SUBCASE("matmul batched") {
    const auto Bt = random_tensor({2, 4, 3}, rng);
    expect_gradients([](auto&, auto& in) { return weighted(matmul(in[0], in[1])); }, {A, Bt});
  }
  SUBCASE("linear") {
    expect_gradients([](auto&, auto& in) { return weighted(linear(in[0], in[1], in[2])); }, {A, W, bias});
  }
  SUBCASE("add/sub/mul full") {
    expect_gradients([](auto&, auto& in) { return weighted(mul(add(in[0], in[1]), sub(in[0], in[1]))); }, {A, B});
  }
  SUBCASE("suffix broadcast") {
    expect_gradients([](auto&, auto& in) { return weighted(mul(add(in[0], in[1]), in[1])); }, {A, pos});
  }
  SUBCASE("scale and reshape") {
    expect_gradients([](auto&, auto& in) { return weighted(reshape(scale(in[0], 2.5), {6, 4})); }, {A});
  }
  SUBCASE("transpose") {
    expect_gradients([](auto&, auto& in) { return weighted(transpose(in[0], {2, 0, 1})); }, {A});
  }
  SUBCASE("concat and slice") {
    expect_gradients(
        [](auto&, auto& in) { return weighted(slice(concat<double>({in[0], in[1]}, 1), 1, 1, 5)); }, {A, B});
  }
  SUBCASE("mean_axis, mean, sum") {
    expect_gradients([](auto&, auto& in) { return add(weighted(mean_axis(in[0], 1)), mean(in[0])); }, {A});
  }
  SUBCASE("softmax") { expect_gradients([](auto&, auto& in) { return weighted(softmax_axis(in[0], 1)); }, {A}); }
  SUBCASE("exp and log") {
    const auto P = random_tensor({2, 3, 4}, rng, 0.5, 2.0);
    expect_gradients([](auto&, auto& in) { return weighted(log(exp(mul(in[0], in[0])))); }, {P});
  }
  SUBCASE("relu away from the kink") {
    auto R = random_tensor({2, 3, 4}, rng, 0.1, 1.0);
    for (Index i = 0; i < R.size(); i += 2) R[i] = -R[i];
    expect_gradients([](auto&, auto& in) { return weighted(relu(in[0])); }, {R});
  }
  SUBCASE("gelu") { expect_gradients([](auto&, auto& in) { return weighted(gelu(in[0])); }, {A}); }
  SUBCASE("sigmoid") { expect_gradients([](auto&, auto& in) { return weighted(sigmoid(in[0])); }, {A}); }
  SUBCASE("layer norm") {
    const auto g = random_tensor({4}, rng), b = random_tensor({4}, rng);
    expect_gradients([](auto&, auto& in) { return weighted(layer_norm(in[0], in[1], in[2])); }, {A, g, b});
  }
  SUBCASE("embedding add") {
    expect_gradients([](auto&, auto& in) { return weighted(embedding_add(in[0], in[1])); }, {A, pos});
  }
}

TEST_CASE("ops: batch norm gradients in train mode") {
  std::mt19937_64 rng(12);
  const auto X = random_tensor({2, 3, 2, 3, 2}, rng);
  const auto g = random_tensor({3}, rng, 0.5, 1.5), b = random_tensor({3}, rng);
  ParameterSet<double> buffers;
  auto& rm = buffers.add("rm", {3}, false);
  auto& rv = buffers.add("rv", {3}, false);
  expect_gradients(
      [&](auto&, auto& in) { return weighted(batch_norm_3d(in[0], in[1], in[2], rm, rv, NormMode::Train)); },
      {X, g, b});
}

TEST_CASE("ops: batch norm running statistics follow the momentum update") {
  std::mt19937_64 rng(13);
  const auto X = random_tensor({2, 2, 2, 2, 3}, rng, -2, 3);
  ParameterSet<double> buffers;
  auto& rm = buffers.add("rm", {2}, false);
  auto& rv = buffers.add("rv", {2}, false);
  rv.value.data.setOnes();
  Tape<double> tape;
  auto x = tape.constant(X);
  auto gamma = tape.constant(Tensor<double>::constant({2}, 1.0));
  auto beta = tape.constant(Tensor<double>::zeros({2}));
  const auto y = batch_norm_3d(x, gamma, beta, rm, rv, NormMode::Train, 0.1).value();

  const Index vox = 12;
  for (Index c = 0; c < 2; ++c) {
    std::vector<double> vals;
    for (Index s = 0; s < 2; ++s)
      for (Index v = 0; v < vox; ++v) vals.push_back(X[(s * 2 + c) * vox + v]);
    double m = 0;
    for (double v : vals) m += v;
    m /= static_cast<double>(vals.size());
    double ss = 0;
    for (double v : vals) ss += (v - m) * (v - m);
    const double biased = ss / static_cast<double>(vals.size());
    const double unbiased = ss / static_cast<double>(vals.size() - 1);
    CHECK(rm.value[c] == doctest::Approx(0.1 * m).epsilon(1e-12));
    CHECK(rv.value[c] == doctest::Approx(0.9 + 0.1 * unbiased).epsilon(1e-12));
    CHECK(y[c * vox] == doctest::Approx((X[c * vox] - m) / std::sqrt(biased + 1e-5)).epsilon(1e-10));
  }

  // Eval mode uses the buffers and leaves them untouched.
  const double rm0 = rm.value[0];
  Tape<double> t2;
  const auto ye = batch_norm_3d(t2.constant(X), t2.constant(Tensor<double>::constant({2}, 1.0)),
                                t2.constant(Tensor<double>::zeros({2})), rm, rv, NormMode::Eval)
                      .value();
  CHECK(rm.value[0] == rm0);
  CHECK(ye[0] == doctest::Approx((X[0] - rm.value[0]) / std::sqrt(rv.value[0] + 1e-5)).epsilon(1e-12));
}

TEST_CASE("ops: conv3d matches the direct loop on both code paths") {
  std::mt19937_64 rng(21);
  struct Case {
    ConvGeometry g;
    Shape x;
  };
  const std::vector<Case> cases{
      {{3, 1, 1}, {2, 3, 5, 4, 6}},  // unit stride, same padding
      {{1, 1, 0}, {1, 4, 3, 3, 3}},  // pointwise
      {{3, 1, 0}, {1, 2, 5, 6, 4}},  // unit stride, valid
      {{2, 2, 0}, {2, 2, 4, 6, 4}},  // strided
      {{3, 2, 1}, {1, 2, 5, 5, 6}},  // strided and padded
  };
  for (const auto& c : cases) {
    CAPTURE(c.g.kernel);
    CAPTURE(c.g.stride);
    const Index cin = c.x[1], cout = 3, k = c.g.kernel;
    const auto X = random_tensor(c.x, rng), W = random_tensor({cout, cin, k, k, k}, rng),
               B = random_tensor({cout}, rng);
    Tape<double> tape;
    const auto y = conv3d(tape.constant(X), tape.constant(W), tape.constant(B), c.g).value();
    const auto ref = naive_conv(X, W, B, c.g);
    REQUIRE(y.shape == ref.shape);
    CHECK((y.data - ref.data).abs().maxCoeff() < 1e-12);

    expect_gradients([&](auto&, auto& in) { return weighted(conv3d(in[0], in[1], in[2], c.g)); }, {X, W, B});
  }
}

TEST_CASE("ops: conv_transpose3d matches the scatter loop and is the adjoint of conv3d") {
  std::mt19937_64 rng(22);
  const ConvGeometry g{2, 2, 0};
  const auto X = random_tensor({2, 3, 2, 3, 2}, rng);
  const auto W = random_tensor({3, 2, 2, 2, 2}, rng), B = random_tensor({2}, rng);
  Tape<double> tape;
  const auto y = conv_transpose3d(tape.constant(X), tape.constant(W), tape.constant(B), g).value();
  const auto ref = naive_conv_transpose(X, W, B, g);
  REQUIRE(y.shape == (Shape{2, 2, 4, 6, 4}));
  CHECK((y.data - ref.data).abs().maxCoeff() < 1e-12);

  // <conv(u), v> == <u, convT(v)> with zero biases; conv3d weight layout is
  // (Cout, Cin) = (3, 2) and the transposed layout (Cin, Cout) = (3, 2) shares the buffer.
  const auto U = random_tensor({2, 2, 4, 6, 4}, rng);
  const Tensor<double> zb3 = Tensor<double>::zeros({3}), zb2 = Tensor<double>::zeros({2});
  Tape<double> t2;
  const auto cu = conv3d(t2.constant(U), t2.constant(W), t2.constant(zb3), g).value();
  const auto tv = conv_transpose3d(t2.constant(X), t2.constant(W), t2.constant(zb2), g).value();
  CHECK((cu.data * X.data).sum() == doctest::Approx((U.data * tv.data).sum()).epsilon(1e-12));

  expect_gradients([&](auto&, auto& in) { return weighted(conv_transpose3d(in[0], in[1], in[2], g)); }, {X, W, B});
}

TEST_CASE("ops: float and double instantiations agree") {
  std::mt19937_64 rng(23);
  const auto X = random_tensor({1, 2, 4, 4, 4}, rng), W = random_tensor({3, 2, 3, 3, 3}, rng),
             B = random_tensor({3}, rng);
  Tape<double> td;
  Tape<float> tf;
  const auto yd = conv3d(td.constant(X), td.constant(W), td.constant(B), ConvGeometry{}).value();
  const auto yf =
      conv3d(tf.constant(X.cast<float>()), tf.constant(W.cast<float>()), tf.constant(B.cast<float>()), ConvGeometry{})
          .value();
  CHECK((yd.data - yf.data.cast<double>()).abs().maxCoeff() < 1e-4);
}

TEST_CASE("gradcheck: detects a wrong gradient") {
  // A primitive with a deliberately wrong backward rule must fail the check.
  auto bad = [](Tape<double>& tape, const std::vector<Var<double>>& in) {
    Tensor<double> v = in[0].value();
    v.data = v.data.square();
    auto y = tape.record(v, {in[0]}, [](BackwardArgs<double>& a) {
      a.in_grads[0]->data += a.out_grad.data * (*a.in_values[0]).data;  // missing factor 2
    });
    return sum(y);
  };
  std::mt19937_64 rng(5);
  const auto report = grad_check(bad, {random_tensor({4}, rng, 0.5, 1.0)});
  CHECK_FALSE(report.passed);
}

TEST_CASE("ops: matmul 3x4 by 4x2 passes the finite-difference check at 1e-5") {
  std::mt19937_64 rng(30);
  GradCheckOptions opts;
  opts.tolerance = 1e-5;
  const auto r = grad_check([](auto&, auto& in) { return weighted(matmul(in[0], in[1])); },
                            {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}, opts);
  CHECK(r.passed);
}

TEST_CASE("ops: randomized-shape gradient property over all primitives") {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<Index> ext(1, 4);
  const int kinds = 16;
  int cases = 0;
  for (int trial = 0; trial < 128; ++trial) {
    const int kind = trial % kinds;
    const Index a = ext(rng), b = ext(rng), c = ext(rng) + 1;
    CAPTURE(kind);
    CAPTURE(trial);
    Fn f;
    std::vector<Tensor<double>> in;
    switch (kind) {
      case 0:
        f = [](auto&, auto& v) { return weighted(matmul(v[0], v[1])); };
        in = {random_tensor({a, b, c}, rng), random_tensor({c, a}, rng)};
        break;
      case 1:
        f = [](auto&, auto& v) { return weighted(add(v[0], v[1])); };
        in = {random_tensor({a, b, c}, rng), random_tensor({c}, rng)};
        break;
      case 2:
        f = [](auto&, auto& v) { return weighted(mul(v[0], v[1])); };
        in = {random_tensor({a, b, c}, rng), random_tensor({b, c}, rng)};
        break;
      case 3:
        f = [a, b, c](auto&, auto& v) { return weighted(reshape(v[0], {c, a * b})); };
        in = {random_tensor({a, b, c}, rng)};
        break;
      case 4:
        f = [](auto&, auto& v) { return weighted(transpose(v[0], {1, 2, 0})); };
        in = {random_tensor({a, b, c}, rng)};
        break;
      case 5:
        f = [](auto&, auto& v) { return weighted(concat<double>({v[0], v[1]}, 2)); };
        in = {random_tensor({a, b, c}, rng), random_tensor({a, b, 1}, rng)};
        break;
      case 6:
        f = [](auto&, auto& v) { return weighted(slice(v[0], 2, 1, v[0].dim(2))); };
        in = {random_tensor({a, b, c}, rng)};
        break;
      case 7:
        f = [](auto&, auto& v) { return weighted(mean_axis(v[0], 1)); };
        in = {random_tensor({a, b, c}, rng)};
        break;
      case 8:
        f = [](auto&, auto& v) { return weighted(softmax_axis(v[0], 2)); };
        in = {random_tensor({a, b, c}, rng, -3, 3)};
        break;
      case 9:
        f = [](auto&, auto& v) { return weighted(exp(v[0])); };
        in = {random_tensor({a, b, c}, rng)};
        break;
      case 10:
        f = [](auto&, auto& v) { return weighted(log(v[0])); };
        in = {random_tensor({a, b, c}, rng, 0.3, 3.0)};
        break;
      case 11: {
        auto t = random_tensor({a, b, c}, rng, 0.05, 1.0);
        for (Index i = 0; i < t.size(); i += 2) t[i] = -t[i];
        f = [](auto&, auto& v) { return weighted(relu(v[0])); };
        in = {t};
        break;
      }
      case 12:
        f = [](auto&, auto& v) { return weighted(gelu(v[0])); };
        in = {random_tensor({a, b, c}, rng, -3, 3)};
        break;
      case 13:
        f = [](auto&, auto& v) { return weighted(layer_norm(v[0], v[1], v[2])); };
        in = {random_tensor({a, b, c}, rng, -2, 2), random_tensor({c}, rng), random_tensor({c}, rng)};
        break;
      case 14:
        f = [](auto&, auto& v) { return weighted(embedding_add(v[0], v[1])); };
        in = {random_tensor({a, b, c}, rng), random_tensor({b, c}, rng)};
        break;
      default: {
        const Index k = (trial / kinds) % 2 == 0 ? 3 : 2;
        const ConvGeometry g{k, k == 3 ? 1 : 2, k == 3 ? 1 : 0};
        const Index ex = k == 3 ? c : 2 * c;
        if (trial % 2 == 0) {
          f = [g](auto&, auto& v) { return weighted(conv3d(v[0], v[1], v[2], g)); };
          in = {random_tensor({1, a, ex, ex, 2 * k - 2}, rng), random_tensor({b, a, k, k, k}, rng),
                random_tensor({b}, rng)};
        } else {
          f = [g](auto&, auto& v) { return weighted(conv_transpose3d(v[0], v[1], v[2], g)); };
          in = {random_tensor({1, a, c, c, 2}, rng), random_tensor({a, b, k, k, k}, rng), random_tensor({b}, rng)};
        }
      }
    }
    GradCheckOptions opts;
    opts.tolerance = 1e-5;
    const auto r = grad_check(f, in, opts);
    CHECK_MESSAGE(r.passed, "max rel error " << r.max_rel_error);
    ++cases;
  }
  CHECK(cases >= 100);
}

TEST_CASE("ops: conv3d with a centred unit kernel is the identity") {
  std::mt19937_64 rng(32);
  const auto X = random_tensor({2, 1, 4, 5, 3}, rng);
  Tensor<double> w({1, 1, 3, 3, 3});
  w[13] = 1.0;
  Tape<double> tape;
  const auto y = conv3d(tape.constant(X), tape.constant(w), tape.constant(Tensor<double>::zeros({1})), ConvGeometry{})
                     .value();
  CHECK(y.shape == X.shape);
  CHECK((y.data == X.data).all());
}

TEST_CASE("tape: gradients of a sum of two branches add exactly") {
  std::mt19937_64 rng(33);
  const auto X = random_tensor({3, 4}, rng);
  auto grad_of = [&](int which) {
    Tape<double> tape;
    auto x = tape.input(X);
    auto f = weighted(exp(x), 1);
    auto g = weighted(gelu(x), 2);
    tape.backward(which == 0 ? f : which == 1 ? g : add(f, g));
    return tape.grad(x);
  };
  const auto gf = grad_of(0), gg = grad_of(1), gs = grad_of(2);
  CHECK((gs.data == gf.data + gg.data).all());
}

TEST_CASE("tape: forward and backward are bitwise deterministic") {
  std::mt19937_64 rng(34);
  const auto X = random_tensor({1, 2, 4, 4, 4}, rng), W = random_tensor({3, 2, 3, 3, 3}, rng);
  auto run = [&]() {
    Tape<double> tape;
    auto x = tape.input(X);
    auto y = weighted(gelu(conv3d(x, tape.constant(W), tape.constant(Tensor<double>::zeros({3})), ConvGeometry{})));
    tape.backward(y);
    return std::make_pair(y.value().item(), tape.grad(x));
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK((a.second.data == b.second.data).all());
}

TEST_CASE("gradcheck: non-finite forward value is an error") {
  CHECK_THROWS(grad_check([](auto&, auto& in) { return sum(log(in[0])); }, {Tensor<double>::constant({2}, -1.0)}));
}

TEST_CASE("ops: relu keeps NaN so non-finite inputs stay visible downstream") {
  Tensor<double> x({3});
  x[0] = -1.0;
  x[1] = std::nan("");
  x[2] = 2.0;
  Tape<double> tape;
  const auto y = relu(tape.constant(x)).value();
  CHECK(y[0] == 0.0);
  CHECK(std::isnan(y[1]));
  CHECK(y[2] == 2.0);
}
