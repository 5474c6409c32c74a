#include "segsurv/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace segsurv {

namespace {

Index log2_exact(Index p) {
  Index l = 0;
  while ((Index(1) << l) < p) ++l;
  if ((Index(1) << l) != p || l == 0) throw std::invalid_argument("decoder: patch size must be a power of two >= 2");
  return l;
}

constexpr ConvGeometry kConv3{3, 1, 1};
constexpr ConvGeometry kUp2{2, 2, 0};
constexpr ConvGeometry kPoint{1, 1, 0};

}  // namespace

template <typename S>
Var<S> tokens_to_grid(Var<S> tokens, const Extent3& grid) {
  const Shape& ts = tokens.shape();
  const Index n = grid[0] * grid[1] * grid[2];
  if (ts.size() != 3 || (ts[1] != n && ts[1] != n + 1))
    throw ShapeError("tokens_to_grid: " + shape_str(ts) + " does not hold " + std::to_string(n) +
                     " image tokens for grid " + shape_str({grid[0], grid[1], grid[2]}));
  Var<S> image = ts[1] == n ? tokens : slice(tokens, 1, 0, n);
  return transpose(reshape(image, {ts[0], grid[0], grid[1], grid[2], ts[2]}), {0, 4, 1, 2, 3});
}

template <typename S>
Var<S> grid_to_tokens(Var<S> grid) {
  const Shape& gs = grid.shape();
  if (gs.size() != 5) throw ShapeError("grid_to_tokens: expected rank-5 grid, got " + shape_str(gs));
  return reshape(transpose(grid, {0, 2, 3, 4, 1}), {gs[0], gs[2] * gs[3] * gs[4], gs[1]});
}

Volume logits_to_mask(const Volume& logits, double threshold) {
  Volume out = logits;
  out.modality = Modality::MASK;
  // sigmoid(x) >= t  <=>  x >= logit(t); compared in logit space so t = 1 admits nothing.
  double cut;
  if (threshold <= 0) cut = -std::numeric_limits<double>::infinity();
  else if (threshold >= 1) cut = std::numeric_limits<double>::infinity();
  else cut = std::log(threshold / (1 - threshold));
  for (Index i = 0; i < out.data.size(); ++i) out.data[i] = static_cast<double>(logits.data[i]) >= cut ? 1.0f : 0.0f;
  return out;
}

template <typename S>
ConvBlock<S> Decoder<S>::make_block(ParameterSet<S>& params, const std::string& name, Index cin, Index cout,
                                    Index kernel, bool transposed, bool norm) {
  ConvBlock<S> b{};
  const Shape w = transposed ? Shape{cin, cout, kernel, kernel, kernel} : Shape{cout, cin, kernel, kernel, kernel};
  b.weight = &params.add(name + ".weight", w);
  b.bias = &params.add(name + ".bias", {cout});
  if (norm) {
    b.gamma = &params.add(name + ".bn.gamma", {cout});
    b.beta = &params.add(name + ".bn.beta", {cout});
    b.running_mean = &params.add(name + ".bn.running_mean", {cout}, false);
    b.running_var = &params.add(name + ".bn.running_var", {cout}, false);
    b.running_var->value.data.setOnes();
  }
  return b;
}

template <typename S>
Decoder<S>::Decoder(ParameterSet<S>& params, const DecoderConfig& cfg, const EmbedConfig& embed,
                    const EncoderConfig& encoder)
    : cfg_(cfg), embed_(embed), taps_(encoder.taps) {
  levels_ = log2_exact(embed.patch);
  if (static_cast<Index>(cfg_.widths.size()) != levels_)
    throw std::invalid_argument("decoder: need " + std::to_string(levels_) + " widths for patch " +
                                std::to_string(embed.patch) + ", got " + std::to_string(cfg_.widths.size()));
  for (Index w : cfg_.widths)
    if (w < 1) throw std::invalid_argument("decoder: widths must be positive");
  std::sort(taps_.begin(), taps_.end());
  const Index h = embed.hidden;
  const auto width = [&](Index level) { return level == levels_ ? h : cfg_.widths[static_cast<size_t>(level)]; };

  stem_.push_back(make_block(params, "decoder.stem.conv1", embed.channels, width(0), 3, false, true));
  stem_.push_back(make_block(params, "decoder.stem.conv2", width(0), width(0), 3, false, true));

  std::vector<Index> skips_at(static_cast<size_t>(levels_), 0);
  const Index skip_count = static_cast<Index>(taps_.size()) - 1;
  for (Index j = 1; j <= skip_count; ++j) {
    const Index level = std::max(levels_ - j, Index(0));
    skip_level_.push_back(level);
    ++skips_at[static_cast<size_t>(level)];
    std::vector<ConvBlock<S>> path;
    for (Index at = levels_; at > level; --at)
      path.push_back(make_block(params, "decoder.skip" + std::to_string(j) + ".up" + std::to_string(levels_ - at + 1),
                                width(at), width(at - 1), 2, true, true));
    skip_paths_.push_back(std::move(path));
  }

  up_.resize(static_cast<size_t>(levels_));
  fuse_.resize(static_cast<size_t>(levels_));
  for (Index r = levels_ - 1; r >= 0; --r) {
    const std::string p = "decoder.level" + std::to_string(r);
    up_[static_cast<size_t>(r)] = make_block(params, p + ".up", width(r + 1), width(r), 2, true, false);
    const Index concat = width(r) * (1 + skips_at[static_cast<size_t>(r)] + (r == 0 ? 1 : 0));
    fuse_[static_cast<size_t>(r)].push_back(make_block(params, p + ".conv1", concat, width(r), 3, false, true));
    fuse_[static_cast<size_t>(r)].push_back(make_block(params, p + ".conv2", width(r), width(r), 3, false, true));
  }
  head_ = make_block(params, "decoder.head", width(0), 1, 1, false, false);

  for (auto& b : stem_) all_blocks_.push_back(&b);
  for (auto& path : skip_paths_)
    for (auto& b : path) all_blocks_.push_back(&b);
  for (auto& b : up_) all_blocks_.push_back(&b);
  for (auto& level : fuse_)
    for (auto& b : level) all_blocks_.push_back(&b);
  all_blocks_.push_back(&head_);
}

template <typename S>
Var<S> Decoder<S>::apply(const ConvBlock<S>& b, Var<S> x, bool transposed, NormMode mode, ConvGeometry g) const {
  Tape<S>& tape = *x.tape;
  Var<S> y = transposed ? conv_transpose3d(x, tape.param(*b.weight), tape.param(*b.bias), g)
                        : conv3d(x, tape.param(*b.weight), tape.param(*b.bias), g);
  if (!b.gamma) return y;
  y = batch_norm_3d(y, tape.param(*b.gamma), tape.param(*b.beta), *b.running_mean, *b.running_var, mode);
  return relu(y);
}

template <typename S>
Var<S> Decoder<S>::forward(Var<S> image, const std::map<Index, Var<S>>& taps, NormMode mode) const {
  const Shape& is = image.shape();
  if (is.size() != 5 || is[1] != embed_.channels || is[2] != embed_.input[0] || is[3] != embed_.input[1] ||
      is[4] != embed_.input[2])
    throw ShapeError("decoder: input image " + shape_str(is) + " does not match configured extent");
  for (Index t : taps_)
    if (!taps.count(t)) throw std::invalid_argument("decoder: missing encoder tap " + std::to_string(t));
  const Extent3 grid = embed_.grid();

  // Skip features per level.
  std::vector<std::vector<Var<S>>> at_level(static_cast<size_t>(levels_));
  for (size_t j = 0; j < skip_paths_.size(); ++j) {
    const Index tap = taps_[taps_.size() - 2 - j];
    Var<S> f = tokens_to_grid(taps.at(tap), grid);
    for (const auto& b : skip_paths_[j]) f = apply(b, f, true, mode, kUp2);
    at_level[static_cast<size_t>(skip_level_[j])].push_back(f);
  }
  Var<S> stem = image;
  for (const auto& b : stem_) stem = apply(b, stem, false, mode, kConv3);
  at_level[0].push_back(stem);

  Var<S> x = tokens_to_grid(taps.at(taps_.back()), grid);
  for (Index r = levels_ - 1; r >= 0; --r) {
    std::vector<Var<S>> parts{apply(up_[static_cast<size_t>(r)], x, true, mode, kUp2)};
    for (const auto& f : at_level[static_cast<size_t>(r)]) {
      if (!std::equal(f.shape().begin() + 2, f.shape().end(), parts[0].shape().begin() + 2))
        throw ShapeError("decoder level " + std::to_string(r) + ": skip " + shape_str(f.shape()) +
                         " does not match upsampled " + shape_str(parts[0].shape()));
      parts.push_back(f);
    }
    x = concat(parts, 1);
    for (const auto& b : fuse_[static_cast<size_t>(r)]) x = apply(b, x, false, mode, kConv3);
  }
  return apply(head_, x, false, mode, kPoint);
}

template Var<float> tokens_to_grid(Var<float>, const Extent3&);
template Var<double> tokens_to_grid(Var<double>, const Extent3&);
template Var<float> grid_to_tokens(Var<float>);
template Var<double> grid_to_tokens(Var<double>);
template class Decoder<float>;
template class Decoder<double>;

}  // namespace segsurv
