#include "segsurv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace segsurv {
namespace {

Index normalize_axis(Index axis, Index rank, const char* op) {
  Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

// outer x len x inner decomposition around one axis.
struct AxisSplit {
  Index outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[static_cast<size_t>(i)];
  s.len = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// True when b's shape equals a trailing suffix of a's shape.
bool is_suffix(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

template <typename S>
Tape<S>& tape_of(Var<S> a) {
  if (!a.tape) throw std::invalid_argument("operation on a detached Var");
  return *a.tape;
}

template <typename S>
void check_same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape) throw std::invalid_argument("operands recorded on different tapes");
}

// Elementwise binary op with suffix broadcast of b. fa/fb give the local
// partial derivatives given (x, y).
template <typename S, typename Fwd, typename Da, typename Db>
Var<S> broadcast_binary(const char* op, Var<S> a, Var<S> b, Fwd fwd, Da da, Db db) {
  check_same_tape(a, b);
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  if (!is_suffix(av.shape, bv.shape)) throw_shape_error(op, av.shape, bv.shape);
  const Index inner = bv.size();
  const Index outer = inner == 0 ? 0 : av.size() / inner;
  Tensor<S> out(av.shape);
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) out[o * inner + i] = fwd(av[o * inner + i], bv[i]);
  return tape_of(a).record(std::move(out), {a, b}, [outer, inner, da, db](BackwardArgs<S>& g) {
    const Tensor<S>& x = *g.in_values[0];
    const Tensor<S>& y = *g.in_values[1];
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index k = o * inner + i;
        const S go = g.out_grad[k];
        if (g.in_grads[0]) (*g.in_grads[0])[k] += go * da(x[k], y[i]);
        if (g.in_grads[1]) (*g.in_grads[1])[i] += go * db(x[k], y[i]);
      }
    }
  });
}

template <typename S, typename Fwd, typename Deriv>
Var<S> unary(Var<S> a, Fwd fwd, Deriv deriv) {
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.shape);
  out.data = av.data.unaryExpr(fwd);
  return tape_of(a).record(std::move(out), {a}, [deriv](BackwardArgs<S>& g) {
    if (!g.in_grads[0]) return;
    const Tensor<S>& x = *g.in_values[0];
    for (Index k = 0; k < x.size(); ++k) (*g.in_grads[0])[k] += g.out_grad[k] * deriv(x[k], g.out_value[k]);
  });
}

// im2col for one sample: src is (C, X, Y, Z); col is (C·k³) x (OX·OY·OZ).
template <typename S>
void im2col(const S* src, Index c, const std::array<Index, 3>& in, const ConvGeometry& g,
            const std::array<Index, 3>& out, S* col) {
  const Index k = g.kernel;
  const Index ovox = out[0] * out[1] * out[2];
  for (Index ch = 0; ch < c; ++ch) {
    const S* plane = src + ch * in[0] * in[1] * in[2];
    for (Index kx = 0; kx < k; ++kx)
      for (Index ky = 0; ky < k; ++ky)
        for (Index kz = 0; kz < k; ++kz) {
          S* row = col + (((ch * k + kx) * k + ky) * k + kz) * ovox;
          for (Index ox = 0; ox < out[0]; ++ox) {
            const Index ix = ox * g.stride - g.padding + kx;
            const bool xin = ix >= 0 && ix < in[0];
            for (Index oy = 0; oy < out[1]; ++oy) {
              const Index iy = oy * g.stride - g.padding + ky;
              S* dst = row + (ox * out[1] + oy) * out[2];
              if (!xin || iy < 0 || iy >= in[1]) {
                std::fill(dst, dst + out[2], S(0));
                continue;
              }
              const S* line = plane + (ix * in[1] + iy) * in[2];
              for (Index oz = 0; oz < out[2]; ++oz) {
                const Index iz = oz * g.stride - g.padding + kz;
                dst[oz] = (iz >= 0 && iz < in[2]) ? line[iz] : S(0);
              }
            }
          }
        }
  }
}

// Adjoint of im2col: scatters col back onto dst (accumulating).
template <typename S>
void col2im(const S* col, Index c, const std::array<Index, 3>& in, const ConvGeometry& g,
            const std::array<Index, 3>& out, S* dst) {
  const Index k = g.kernel;
  const Index ovox = out[0] * out[1] * out[2];
  for (Index ch = 0; ch < c; ++ch) {
    S* plane = dst + ch * in[0] * in[1] * in[2];
    for (Index kx = 0; kx < k; ++kx)
      for (Index ky = 0; ky < k; ++ky)
        for (Index kz = 0; kz < k; ++kz) {
          const S* row = col + (((ch * k + kx) * k + ky) * k + kz) * ovox;
          for (Index ox = 0; ox < out[0]; ++ox) {
            const Index ix = ox * g.stride - g.padding + kx;
            if (ix < 0 || ix >= in[0]) continue;
            for (Index oy = 0; oy < out[1]; ++oy) {
              const Index iy = oy * g.stride - g.padding + ky;
              if (iy < 0 || iy >= in[1]) continue;
              const S* srcl = row + (ox * out[1] + oy) * out[2];
              S* line = plane + (ix * in[1] + iy) * in[2];
              for (Index oz = 0; oz < out[2]; ++oz) {
                const Index iz = oz * g.stride - g.padding + kz;
                if (iz >= 0 && iz < in[2]) line[iz] += srcl[oz];
              }
            }
          }
        }
  }
}

void check_geometry(const char* op, const ConvGeometry& g) {
  if (g.kernel < 1 || g.stride < 1 || g.padding < 0) {
    throw ShapeError(std::string(op) + ": invalid geometry kernel=" + std::to_string(g.kernel) +
                     " stride=" + std::to_string(g.stride) + " padding=" + std::to_string(g.padding));
  }
}

}  // namespace

Index conv_out_extent(Index in, const ConvGeometry& g) { return (in + 2 * g.padding - g.kernel) / g.stride + 1; }

Index conv_transpose_out_extent(Index in, const ConvGeometry& g) {
  return (in - 1) * g.stride - 2 * g.padding + g.kernel;
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  check_same_tape(a, b);
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  if (av.rank() < 2 || bv.rank() < 2 || av.dim(-1) != bv.dim(-2)) throw_shape_error("matmul", av.shape, bv.shape);
  const Index m = av.dim(-2), k = av.dim(-1), n = bv.dim(-1);
  const bool shared = bv.rank() == 2;
  if (!shared && (bv.rank() != av.rank() || !std::equal(av.shape.begin(), av.shape.end() - 2, bv.shape.begin()))) {
    throw_shape_error("matmul", av.shape, bv.shape);
  }
  Shape out_shape(av.shape.begin(), av.shape.end() - 1);
  out_shape.push_back(n);
  Tensor<S> out(out_shape);
  const Index batch = av.size() / (m * k);
  if (shared) {
    out.matrix(batch * m, n).noalias() = av.matrix(batch * m, k) * bv.matrix(k, n);
  } else {
    for (Index i = 0; i < batch; ++i) {
      using Map = typename Tensor<S>::ConstMatrixMap;
      typename Tensor<S>::MatrixMap(out.data.data() + i * m * n, m, n).noalias() =
          Map(av.data.data() + i * m * k, m, k) * Map(bv.data.data() + i * k * n, k, n);
    }
  }
  return tape_of(a).record(std::move(out), {a, b}, [shared, batch, m, k, n](BackwardArgs<S>& g) {
    using Map = typename Tensor<S>::ConstMatrixMap;
    using MutMap = typename Tensor<S>::MatrixMap;
    const Tensor<S>& x = *g.in_values[0];
    const Tensor<S>& y = *g.in_values[1];
    if (shared) {
      Map dy(g.out_grad.data.data(), batch * m, n);
      if (g.in_grads[0]) g.in_grads[0]->matrix(batch * m, k).noalias() += dy * y.matrix(k, n).transpose();
      if (g.in_grads[1]) g.in_grads[1]->matrix(k, n).noalias() += x.matrix(batch * m, k).transpose() * dy;
      return;
    }
    for (Index i = 0; i < batch; ++i) {
      Map dy(g.out_grad.data.data() + i * m * n, m, n);
      if (g.in_grads[0])
        MutMap(g.in_grads[0]->data.data() + i * m * k, m, k).noalias() +=
            dy * Map(y.data.data() + i * k * n, k, n).transpose();
      if (g.in_grads[1])
        MutMap(g.in_grads[1]->data.data() + i * k * n, k, n).noalias() +=
            Map(x.data.data() + i * m * k, m, k).transpose() * dy;
    }
  });
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  return add(matmul(x, w), b);
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  return broadcast_binary<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); }, [](S, S) { return S(1); });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  return broadcast_binary<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); }, [](S, S) { return S(-1); });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  return broadcast_binary<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; });
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
  return unary<S>(a, [factor](S x) { return x * factor; }, [factor](S, S) { return factor; });
}

template <typename S>
Var<S> reshape(Var<S> a, Shape shape) {
  const Tensor<S>& av = a.value();
  if (numel(shape) != av.size()) throw_shape_error("reshape", av.shape, shape);
  Tensor<S> out(std::move(shape), av.data);
  return tape_of(a).record(std::move(out), {a}, [](BackwardArgs<S>& g) {
    if (g.in_grads[0]) g.in_grads[0]->data += g.out_grad.data;
  });
}

template <typename S>
Var<S> transpose(Var<S> a, std::vector<Index> perm) {
  const Tensor<S>& av = a.value();
  const size_t r = av.shape.size();
  std::vector<Index> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  Shape iota(r);
  std::iota(iota.begin(), iota.end(), Index(0));
  if (sorted != iota) throw_shape_error("transpose", av.shape, Shape(perm.begin(), perm.end()));

  Shape in_strides(r, 1);
  for (size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * av.shape[i];
  Shape out_shape(r);
  Shape src_stride(r);
  for (size_t i = 0; i < r; ++i) {
    out_shape[i] = av.shape[static_cast<size_t>(perm[i])];
    src_stride[i] = in_strides[static_cast<size_t>(perm[i])];
  }
  // Source offset of every output element, computed once and shared with backward.
  auto index = std::make_shared<std::vector<Index>>(static_cast<size_t>(av.size()));
  {
    std::vector<Index> counter(r, 0);
    Index offset = 0;
    for (Index k = 0; k < av.size(); ++k) {
      (*index)[static_cast<size_t>(k)] = offset;
      for (size_t d = r; d-- > 0;) {
        ++counter[d];
        offset += src_stride[d];
        if (counter[d] < out_shape[d]) break;
        offset -= src_stride[d] * counter[d];
        counter[d] = 0;
      }
    }
  }
  Tensor<S> out(out_shape);
  for (Index k = 0; k < av.size(); ++k) out[k] = av[(*index)[static_cast<size_t>(k)]];
  return tape_of(a).record(std::move(out), {a}, [index](BackwardArgs<S>& g) {
    if (!g.in_grads[0]) return;
    for (Index k = 0; k < g.out_grad.size(); ++k) (*g.in_grads[0])[(*index)[static_cast<size_t>(k)]] += g.out_grad[k];
  });
}

template <typename S>
Var<S> concat(const std::vector<Var<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& first = parts[0].shape();
  const Index ax = normalize_axis(axis, static_cast<Index>(first.size()), "concat");
  Shape out_shape = first;
  out_shape[static_cast<size_t>(ax)] = 0;
  std::vector<Index> lens;
  for (const auto& p : parts) {
    check_same_tape(parts[0], p);
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (size_t i = 0; ok && i < s.size(); ++i)
      if (static_cast<Index>(i) != ax && s[i] != first[i]) ok = false;
    if (!ok) throw_shape_error("concat", first, s);
    lens.push_back(s[static_cast<size_t>(ax)]);
    out_shape[static_cast<size_t>(ax)] += s[static_cast<size_t>(ax)];
  }
  const AxisSplit sp = split_at(out_shape, ax);
  Tensor<S> out(out_shape);
  Index start = 0;
  for (size_t p = 0; p < parts.size(); ++p) {
    const Tensor<S>& v = parts[p].value();
    const Index chunk = lens[p] * sp.inner;
    for (Index o = 0; o < sp.outer; ++o)
      out.data.segment(o * sp.len * sp.inner + start * sp.inner, chunk) = v.data.segment(o * chunk, chunk);
    start += lens[p];
  }
  return tape_of(parts[0]).record(std::move(out), parts, [sp, lens](BackwardArgs<S>& g) {
    Index begin = 0;
    for (size_t p = 0; p < lens.size(); ++p) {
      const Index chunk = lens[p] * sp.inner;
      if (g.in_grads[p])
        for (Index o = 0; o < sp.outer; ++o)
          g.in_grads[p]->data.segment(o * chunk, chunk) +=
              g.out_grad.data.segment(o * sp.len * sp.inner + begin * sp.inner, chunk);
      begin += lens[p];
    }
  });
}

template <typename S>
Var<S> slice(Var<S> a, Index axis, Index begin, Index end) {
  const Tensor<S>& av = a.value();
  const Index ax = normalize_axis(axis, av.rank(), "slice");
  const AxisSplit sp = split_at(av.shape, ax);
  if (begin < 0 || end > sp.len || begin >= end) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + shape_str(av.shape));
  }
  Shape out_shape = av.shape;
  out_shape[static_cast<size_t>(ax)] = end - begin;
  const Index chunk = (end - begin) * sp.inner;
  Tensor<S> out(out_shape);
  for (Index o = 0; o < sp.outer; ++o)
    out.data.segment(o * chunk, chunk) = av.data.segment(o * sp.len * sp.inner + begin * sp.inner, chunk);
  return tape_of(a).record(std::move(out), {a}, [sp, begin, chunk](BackwardArgs<S>& g) {
    if (!g.in_grads[0]) return;
    for (Index o = 0; o < sp.outer; ++o)
      g.in_grads[0]->data.segment(o * sp.len * sp.inner + begin * sp.inner, chunk) +=
          g.out_grad.data.segment(o * chunk, chunk);
  });
}

template <typename S>
Var<S> mean_axis(Var<S> a, Index axis) {
  const Tensor<S>& av = a.value();
  const Index ax = normalize_axis(axis, av.rank(), "mean_axis");
  const AxisSplit sp = split_at(av.shape, ax);
  Shape out_shape = av.shape;
  out_shape.erase(out_shape.begin() + ax);
  Tensor<S> out(out_shape);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index l = 0; l < sp.len; ++l)
      out.data.segment(o * sp.inner, sp.inner) += av.data.segment((o * sp.len + l) * sp.inner, sp.inner);
  out.data /= static_cast<S>(sp.len);
  return tape_of(a).record(std::move(out), {a}, [sp](BackwardArgs<S>& g) {
    if (!g.in_grads[0]) return;
    const S inv = S(1) / static_cast<S>(sp.len);
    for (Index o = 0; o < sp.outer; ++o)
      for (Index l = 0; l < sp.len; ++l)
        g.in_grads[0]->data.segment((o * sp.len + l) * sp.inner, sp.inner) +=
            inv * g.out_grad.data.segment(o * sp.inner, sp.inner);
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  Tensor<S> out = Tensor<S>::scalar(a.value().data.sum());
  return tape_of(a).record(std::move(out), {a}, [](BackwardArgs<S>& g) {
    if (g.in_grads[0]) g.in_grads[0]->data += g.out_grad[0];
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  const S n = static_cast<S>(a.value().size());
  return scale(sum(a), S(1) / n);
}

template <typename S>
Var<S> softmax_axis(Var<S> a, Index axis) {
  const Tensor<S>& av = a.value();
  const Index ax = normalize_axis(axis, av.rank(), "softmax_axis");
  const AxisSplit sp = split_at(av.shape, ax);
  Tensor<S> out(av.shape);
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.len * sp.inner + i;
      S mx = av[base];
      for (Index l = 1; l < sp.len; ++l) mx = std::max(mx, av[base + l * sp.inner]);
      S z = 0;
      for (Index l = 0; l < sp.len; ++l) z += (out[base + l * sp.inner] = std::exp(av[base + l * sp.inner] - mx));
      for (Index l = 0; l < sp.len; ++l) out[base + l * sp.inner] /= z;
    }
  return tape_of(a).record(std::move(out), {a}, [sp](BackwardArgs<S>& g) {
    if (!g.in_grads[0]) return;
    const Tensor<S>& y = g.out_value;
    for (Index o = 0; o < sp.outer; ++o)
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.len * sp.inner + i;
        S dot = 0;
        for (Index l = 0; l < sp.len; ++l) dot += g.out_grad[base + l * sp.inner] * y[base + l * sp.inner];
        for (Index l = 0; l < sp.len; ++l) {
          const Index k = base + l * sp.inner;
          (*g.in_grads[0])[k] += y[k] * (g.out_grad[k] - dot);
        }
      }
  });
}

template <typename S>
Var<S> exp(Var<S> a) {
  return unary<S>(a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Var<S> log(Var<S> a) {
  return unary<S>(a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Var<S> relu(Var<S> a) {
  // Written so NaN passes through instead of being clipped to zero.
  return unary<S>(a, [](S x) { return x < S(0) ? S(0) : x; }, [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
Var<S> gelu(Var<S> a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  auto fwd = [](S x) {
    const S t = std::tanh(S(kC) * (x + S(kA) * x * x * x));
    return S(0.5) * x * (S(1) + t);
  };
  auto deriv = [](S x, S) {
    const S t = std::tanh(S(kC) * (x + S(kA) * x * x * x));
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * S(kC) * (S(1) + S(3 * kA) * x * x);
  };
  return unary<S>(a, fwd, deriv);
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  return unary<S>(
      a, [](S x) { return S(1) / (S(1) + std::exp(-x)); }, [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gain, Var<S> bias, S eps) {
  check_same_tape(x, gain);
  check_same_tape(x, bias);
  const Tensor<S>& xv = x.value();
  const Index h = xv.dim(-1);
  if (gain.value().shape != Shape{h}) throw_shape_error("layer_norm", xv.shape, gain.value().shape);
  if (bias.value().shape != Shape{h}) throw_shape_error("layer_norm", xv.shape, bias.value().shape);
  const Index rows = xv.size() / h;
  auto xhat = std::make_shared<Tensor<S>>(xv.shape);
  auto inv_std = std::make_shared<std::vector<S>>(static_cast<size_t>(rows));
  Tensor<S> out(xv.shape);
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (Index r = 0; r < rows; ++r) {
    auto row = xv.data.segment(r * h, h);
    const S mu = row.mean();
    const S var = (row - mu).square().mean();
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = is;
    xhat->data.segment(r * h, h) = (row - mu) * is;
    out.data.segment(r * h, h) = xhat->data.segment(r * h, h) * gv + bv;
  }
  return tape_of(x).record(std::move(out), {x, gain, bias}, [xhat, inv_std, rows, h](BackwardArgs<S>& g) {
    const auto& gv = g.in_values[1]->data;
    for (Index r = 0; r < rows; ++r) {
      auto dy = g.out_grad.data.segment(r * h, h);
      auto xh = xhat->data.segment(r * h, h);
      if (g.in_grads[1]) g.in_grads[1]->data += dy * xh;
      if (g.in_grads[2]) g.in_grads[2]->data += dy;
      if (g.in_grads[0]) {
        Eigen::Array<S, Eigen::Dynamic, 1> dxh = dy * gv;
        const S m1 = dxh.mean();
        const S m2 = (dxh * xh).mean();
        g.in_grads[0]->data.segment(r * h, h) += (*inv_std)[static_cast<size_t>(r)] * (dxh - m1 - xh * m2);
      }
    }
  });
}

template <typename S>
Var<S> batch_norm_3d(Var<S> x, Var<S> gamma, Var<S> beta, Parameter<S>& running_mean, Parameter<S>& running_var,
                     NormMode mode, S momentum, S eps) {
  check_same_tape(x, gamma);
  check_same_tape(x, beta);
  const Tensor<S>& xv = x.value();
  if (xv.rank() != 5) throw_shape_error("batch_norm_3d", xv.shape, gamma.value().shape);
  const Index n = xv.dim(0), c = xv.dim(1), vox = xv.size() / (n * c);
  if (gamma.value().shape != Shape{c}) throw_shape_error("batch_norm_3d", xv.shape, gamma.value().shape);
  if (beta.value().shape != Shape{c}) throw_shape_error("batch_norm_3d", xv.shape, beta.value().shape);
  if (running_mean.value.shape != Shape{c} || running_var.value.shape != Shape{c})
    throw_shape_error("batch_norm_3d", xv.shape, running_mean.value.shape);

  const Index m = n * vox;
  std::vector<S> mu(static_cast<size_t>(c)), inv_std(static_cast<size_t>(c));
  for (Index ch = 0; ch < c; ++ch) {
    if (mode == NormMode::Train) {
      double s = 0, ss = 0;
      for (Index b = 0; b < n; ++b) {
        auto seg = xv.data.segment((b * c + ch) * vox, vox);
        s += static_cast<double>(seg.sum());
      }
      const double mean_v = s / static_cast<double>(m);
      for (Index b = 0; b < n; ++b) {
        auto seg = xv.data.segment((b * c + ch) * vox, vox);
        ss += static_cast<double>((seg - static_cast<S>(mean_v)).square().sum());
      }
      const double var = ss / static_cast<double>(m);
      mu[static_cast<size_t>(ch)] = static_cast<S>(mean_v);
      inv_std[static_cast<size_t>(ch)] = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      const double unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
      running_mean.value[ch] = (S(1) - momentum) * running_mean.value[ch] + momentum * static_cast<S>(mean_v);
      running_var.value[ch] = (S(1) - momentum) * running_var.value[ch] + momentum * static_cast<S>(unbiased);
    } else {
      mu[static_cast<size_t>(ch)] = running_mean.value[ch];
      inv_std[static_cast<size_t>(ch)] = S(1) / std::sqrt(running_var.value[ch] + eps);
    }
  }

  auto xhat = std::make_shared<Tensor<S>>(xv.shape);
  Tensor<S> out(xv.shape);
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch) {
      const Index off = (b * c + ch) * vox;
      xhat->data.segment(off, vox) = (xv.data.segment(off, vox) - mu[static_cast<size_t>(ch)]) * inv_std[static_cast<size_t>(ch)];
      out.data.segment(off, vox) = xhat->data.segment(off, vox) * gv[ch] + bv[ch];
    }
  const bool train = mode == NormMode::Train;
  return tape_of(x).record(
      std::move(out), {x, gamma, beta}, [xhat, inv_std, n, c, vox, m, train](BackwardArgs<S>& g) {
        const auto& gv = g.in_values[1]->data;
        for (Index ch = 0; ch < c; ++ch) {
          S sum_dy = 0, sum_dy_xh = 0;
          for (Index b = 0; b < n; ++b) {
            const Index off = (b * c + ch) * vox;
            sum_dy += g.out_grad.data.segment(off, vox).sum();
            sum_dy_xh += (g.out_grad.data.segment(off, vox) * xhat->data.segment(off, vox)).sum();
          }
          if (g.in_grads[1]) (*g.in_grads[1])[ch] += sum_dy_xh;
          if (g.in_grads[2]) (*g.in_grads[2])[ch] += sum_dy;
          if (!g.in_grads[0]) continue;
          const S scale_ch = gv[ch] * inv_std[static_cast<size_t>(ch)];
          const S mean_dy = sum_dy / static_cast<S>(m);
          const S mean_dy_xh = sum_dy_xh / static_cast<S>(m);
          for (Index b = 0; b < n; ++b) {
            const Index off = (b * c + ch) * vox;
            if (train) {
              g.in_grads[0]->data.segment(off, vox) +=
                  scale_ch * (g.out_grad.data.segment(off, vox) - mean_dy - xhat->data.segment(off, vox) * mean_dy_xh);
            } else {
              g.in_grads[0]->data.segment(off, vox) += scale_ch * g.out_grad.data.segment(off, vox);
            }
          }
        }
      });
}

// Unit-stride convolution without a column buffer. On the zero-padded input
// (extents P), output voxel (ox, oy, oz) sits at anchor a = (ox·Py + oy)·Pz + oz
// and reads input a + delta(kx, ky, kz) with delta = (kx·Py + ky)·Pz + kz, so
// each kernel offset is one GEMM against a contiguous window of padded columns.
// Anchors that fall in the padding are computed and then discarded.
template <typename S>
Var<S> conv3d_unit_stride(Var<S> x, Var<S> w, Var<S> b, ConvGeometry geo, std::array<Index, 3> in,
                          std::array<Index, 3> outd) {
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  const Index n = xv.dim(0), cin = xv.dim(1), cout = wv.dim(0), k = geo.kernel, k3 = k * k * k;
  const std::array<Index, 3> pe{in[0] + 2 * geo.padding, in[1] + 2 * geo.padding, in[2] + 2 * geo.padding};
  const Index np = pe[0] * pe[1] * pe[2];
  const Index anchors = ((outd[0] - 1) * pe[1] + (outd[1] - 1)) * pe[2] + outd[2];
  const Index ivox = in[0] * in[1] * in[2], ovox = outd[0] * outd[1] * outd[2];
  std::vector<Index> delta(static_cast<size_t>(k3));
  for (Index kx = 0; kx < k; ++kx)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kz = 0; kz < k; ++kz) delta[static_cast<size_t>((kx * k + ky) * k + kz)] = (kx * pe[1] + ky) * pe[2] + kz;

  // Per-offset weight slices, (k³·cout) x cin.
  auto offset_weights = [=](const Tensor<S>& wt) {
    RowMatrix<S> wk(k3 * cout, cin);
    for (Index co = 0; co < cout; ++co)
      for (Index ci = 0; ci < cin; ++ci)
        for (Index o = 0; o < k3; ++o) wk(o * cout + co, ci) = wt[(co * cin + ci) * k3 + o];
    return wk;
  };
  auto pad = [=](const S* src, Index c, RowMatrix<S>& dst) {
    dst.setZero(c, np);
    for (Index ch = 0; ch < c; ++ch)
      for (Index ix = 0; ix < in[0]; ++ix)
        for (Index iy = 0; iy < in[1]; ++iy)
          std::copy_n(src + ((ch * in[0] + ix) * in[1] + iy) * in[2], in[2],
                      dst.data() + ch * np + ((ix + geo.padding) * pe[1] + iy + geo.padding) * pe[2] + geo.padding);
  };
  auto anchor_of = [=](Index ox, Index oy) { return (ox * pe[1] + oy) * pe[2]; };

  Tensor<S> out({n, cout, outd[0], outd[1], outd[2]});
  {
    const RowMatrix<S> wk = offset_weights(wv);
    RowMatrix<S> xp, acc(cout, anchors);
    for (Index s = 0; s < n; ++s) {
      pad(xv.data.data() + s * cin * ivox, cin, xp);
      acc.setZero();
      for (Index o = 0; o < k3; ++o)
        acc.noalias() += wk.middleRows(o * cout, cout) * xp.middleCols(delta[static_cast<size_t>(o)], anchors);
      S* dst = out.data.data() + s * cout * ovox;
      for (Index co = 0; co < cout; ++co)
        for (Index ox = 0; ox < outd[0]; ++ox)
          for (Index oy = 0; oy < outd[1]; ++oy) {
            S* line = dst + ((co * outd[0] + ox) * outd[1] + oy) * outd[2];
            const S* srcl = acc.data() + co * anchors + anchor_of(ox, oy);
            for (Index oz = 0; oz < outd[2]; ++oz) line[oz] = srcl[oz] + b.value()[co];
          }
    }
  }
  return tape_of(x).record(std::move(out), {x, w, b}, [=](BackwardArgs<S>& g) {
    const Tensor<S>& xin = *g.in_values[0];
    const RowMatrix<S> wk = offset_weights(*g.in_values[1]);
    RowMatrix<S> xp, dacc = RowMatrix<S>::Zero(cout, anchors), dxp, dwk;
    if (g.in_grads[1]) dwk.setZero(k3 * cout, cin);
    for (Index s = 0; s < n; ++s) {
      const S* dy = g.out_grad.data.data() + s * cout * ovox;
      for (Index co = 0; co < cout; ++co)
        for (Index ox = 0; ox < outd[0]; ++ox)
          for (Index oy = 0; oy < outd[1]; ++oy)
            std::copy_n(dy + ((co * outd[0] + ox) * outd[1] + oy) * outd[2], outd[2],
                        dacc.data() + co * anchors + anchor_of(ox, oy));
      if (g.in_grads[2])
        g.in_grads[2]->data.matrix() +=
            typename Tensor<S>::ConstMatrixMap(dy, cout, ovox).rowwise().sum();
      if (g.in_grads[1]) {
        pad(xin.data.data() + s * cin * ivox, cin, xp);
        for (Index o = 0; o < k3; ++o)
          dwk.middleRows(o * cout, cout).noalias() +=
              dacc * xp.middleCols(delta[static_cast<size_t>(o)], anchors).transpose();
      }
      if (g.in_grads[0]) {
        dxp.setZero(cin, np);
        for (Index o = 0; o < k3; ++o)
          dxp.middleCols(delta[static_cast<size_t>(o)], anchors).noalias() +=
              wk.middleRows(o * cout, cout).transpose() * dacc;
        S* dx = g.in_grads[0]->data.data() + s * cin * ivox;
        for (Index ch = 0; ch < cin; ++ch)
          for (Index ix = 0; ix < in[0]; ++ix)
            for (Index iy = 0; iy < in[1]; ++iy) {
              S* line = dx + ((ch * in[0] + ix) * in[1] + iy) * in[2];
              const S* srcl = dxp.data() + ch * np + ((ix + geo.padding) * pe[1] + iy + geo.padding) * pe[2] + geo.padding;
              for (Index iz = 0; iz < in[2]; ++iz) line[iz] += srcl[iz];
            }
      }
    }
    if (g.in_grads[1])
      for (Index co = 0; co < cout; ++co)
        for (Index ci = 0; ci < cin; ++ci)
          for (Index o = 0; o < k3; ++o) (*g.in_grads[1])[(co * cin + ci) * k3 + o] += dwk(o * cout + co, ci);
  });
}

template <typename S>
Var<S> conv3d(Var<S> x, Var<S> w, Var<S> b, ConvGeometry geo) {
  check_same_tape(x, w);
  check_same_tape(x, b);
  check_geometry("conv3d", geo);
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  if (xv.rank() != 5 || wv.rank() != 5 || wv.dim(1) != xv.dim(1) || wv.dim(2) != geo.kernel ||
      wv.dim(3) != geo.kernel || wv.dim(4) != geo.kernel)
    throw_shape_error("conv3d", xv.shape, wv.shape);
  const Index n = xv.dim(0), cin = xv.dim(1), cout = wv.dim(0);
  if (b.value().shape != Shape{cout}) throw_shape_error("conv3d", wv.shape, b.value().shape);
  const std::array<Index, 3> in{xv.dim(2), xv.dim(3), xv.dim(4)};
  const std::array<Index, 3> outd{conv_out_extent(in[0], geo), conv_out_extent(in[1], geo),
                                  conv_out_extent(in[2], geo)};
  if (outd[0] < 1 || outd[1] < 1 || outd[2] < 1) throw_shape_error("conv3d", xv.shape, wv.shape);
  const Index ivox = in[0] * in[1] * in[2], ovox = outd[0] * outd[1] * outd[2];
  const Index krows = cin * geo.kernel * geo.kernel * geo.kernel;

  if (geo.stride == 1) return conv3d_unit_stride(x, w, b, geo, in, outd);

  Tensor<S> out({n, cout, outd[0], outd[1], outd[2]});
  RowMatrix<S> col(krows, ovox);
  const auto wm = wv.matrix(cout, krows);
  for (Index s = 0; s < n; ++s) {
    im2col(xv.data.data() + s * cin * ivox, cin, in, geo, outd, col.data());
    auto o = typename Tensor<S>::MatrixMap(out.data.data() + s * cout * ovox, cout, ovox);
    o.noalias() = wm * col;
    o.colwise() += b.value().data.matrix();
  }
  return tape_of(x).record(std::move(out), {x, w, b}, [=](BackwardArgs<S>& g) {
    const Tensor<S>& xin = *g.in_values[0];
    const auto wmat = g.in_values[1]->matrix(cout, krows);
    RowMatrix<S> colb(krows, ovox);
    for (Index s = 0; s < n; ++s) {
      typename Tensor<S>::ConstMatrixMap dy(g.out_grad.data.data() + s * cout * ovox, cout, ovox);
      if (g.in_grads[2]) g.in_grads[2]->data.matrix() += dy.rowwise().sum();
      if (g.in_grads[1]) {
        im2col(xin.data.data() + s * cin * ivox, cin, in, geo, outd, colb.data());
        g.in_grads[1]->matrix(cout, krows).noalias() += dy * colb.transpose();
      }
      if (g.in_grads[0]) {
        colb.noalias() = wmat.transpose() * dy;
        col2im(colb.data(), cin, in, geo, outd, g.in_grads[0]->data.data() + s * cin * ivox);
      }
    }
  });
}

template <typename S>
Var<S> conv_transpose3d(Var<S> x, Var<S> w, Var<S> b, ConvGeometry geo) {
  check_same_tape(x, w);
  check_same_tape(x, b);
  check_geometry("conv_transpose3d", geo);
  const Tensor<S>& xv = x.value();
  const Tensor<S>& wv = w.value();
  if (xv.rank() != 5 || wv.rank() != 5 || wv.dim(0) != xv.dim(1) || wv.dim(2) != geo.kernel ||
      wv.dim(3) != geo.kernel || wv.dim(4) != geo.kernel)
    throw_shape_error("conv_transpose3d", xv.shape, wv.shape);
  const Index n = xv.dim(0), cin = xv.dim(1), cout = wv.dim(1);
  if (b.value().shape != Shape{cout}) throw_shape_error("conv_transpose3d", wv.shape, b.value().shape);
  // The input grid plays the role of the convolution output grid.
  const std::array<Index, 3> in{xv.dim(2), xv.dim(3), xv.dim(4)};
  const std::array<Index, 3> outd{conv_transpose_out_extent(in[0], geo), conv_transpose_out_extent(in[1], geo),
                                  conv_transpose_out_extent(in[2], geo)};
  if (outd[0] < 1 || outd[1] < 1 || outd[2] < 1) throw_shape_error("conv_transpose3d", xv.shape, wv.shape);
  for (int d = 0; d < 3; ++d)
    if (conv_out_extent(outd[static_cast<size_t>(d)], geo) != in[static_cast<size_t>(d)])
      throw_shape_error("conv_transpose3d", xv.shape, wv.shape);
  const Index ivox = in[0] * in[1] * in[2], ovox = outd[0] * outd[1] * outd[2];
  const Index krows = cout * geo.kernel * geo.kernel * geo.kernel;

  Tensor<S> out({n, cout, outd[0], outd[1], outd[2]});
  RowMatrix<S> col(krows, ivox);
  const auto wm = wv.matrix(cin, krows);
  for (Index s = 0; s < n; ++s) {
    typename Tensor<S>::ConstMatrixMap xs(xv.data.data() + s * cin * ivox, cin, ivox);
    col.noalias() = wm.transpose() * xs;
    col2im(col.data(), cout, outd, geo, in, out.data.data() + s * cout * ovox);
    auto o = typename Tensor<S>::MatrixMap(out.data.data() + s * cout * ovox, cout, ovox);
    o.colwise() += b.value().data.matrix();
  }
  return tape_of(x).record(std::move(out), {x, w, b}, [=](BackwardArgs<S>& g) {
    const Tensor<S>& xin = *g.in_values[0];
    const auto wmat = g.in_values[1]->matrix(cin, krows);
    RowMatrix<S> colb(krows, ivox);
    for (Index s = 0; s < n; ++s) {
      typename Tensor<S>::ConstMatrixMap dy(g.out_grad.data.data() + s * cout * ovox, cout, ovox);
      if (g.in_grads[2]) g.in_grads[2]->data.matrix() += dy.rowwise().sum();
      if (!g.in_grads[0] && !g.in_grads[1]) continue;
      im2col(g.out_grad.data.data() + s * cout * ovox, cout, outd, geo, in, colb.data());
      if (g.in_grads[0])
        typename Tensor<S>::MatrixMap(g.in_grads[0]->data.data() + s * cin * ivox, cin, ivox).noalias() +=
            wmat * colb;
      if (g.in_grads[1]) {
        typename Tensor<S>::ConstMatrixMap xs(xin.data.data() + s * cin * ivox, cin, ivox);
        g.in_grads[1]->matrix(cin, krows).noalias() += xs * colb.transpose();
      }
    }
  });
}

template <typename S>
Var<S> embedding_add(Var<S> tokens, Var<S> positions) {
  const Shape& ts = tokens.value().shape;
  const Shape& ps = positions.value().shape;
  if (ts.size() < 2 || ps.size() != 2 || !is_suffix(ts, ps)) throw_shape_error("embedding_add", ts, ps);
  return add(tokens, positions);
}

#define SEGSURV_INSTANTIATE_OPS(S)                                                                         \
  template Var<S> matmul(Var<S>, Var<S>);                                                                  \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                                          \
  template Var<S> add(Var<S>, Var<S>);                                                                     \
  template Var<S> sub(Var<S>, Var<S>);                                                                     \
  template Var<S> mul(Var<S>, Var<S>);                                                                     \
  template Var<S> scale(Var<S>, S);                                                                        \
  template Var<S> reshape(Var<S>, Shape);                                                                  \
  template Var<S> transpose(Var<S>, std::vector<Index>);                                                   \
  template Var<S> concat(const std::vector<Var<S>>&, Index);                                               \
  template Var<S> slice(Var<S>, Index, Index, Index);                                                      \
  template Var<S> mean_axis(Var<S>, Index);                                                                \
  template Var<S> sum(Var<S>);                                                                             \
  template Var<S> mean(Var<S>);                                                                            \
  template Var<S> softmax_axis(Var<S>, Index);                                                             \
  template Var<S> exp(Var<S>);                                                                             \
  template Var<S> log(Var<S>);                                                                             \
  template Var<S> relu(Var<S>);                                                                            \
  template Var<S> gelu(Var<S>);                                                                            \
  template Var<S> sigmoid(Var<S>);                                                                         \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, S);                                                   \
  template Var<S> batch_norm_3d(Var<S>, Var<S>, Var<S>, Parameter<S>&, Parameter<S>&, NormMode, S, S);     \
  template Var<S> conv3d(Var<S>, Var<S>, Var<S>, ConvGeometry);                                            \
  template Var<S> conv_transpose3d(Var<S>, Var<S>, Var<S>, ConvGeometry);                                  \
  template Var<S> embedding_add(Var<S>, Var<S>);

SEGSURV_INSTANTIATE_OPS(float)
SEGSURV_INSTANTIATE_OPS(double)

}  // namespace segsurv
