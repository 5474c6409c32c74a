#include "segsurv/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace segsurv {

void LossConfig::validate() const {
  if (gamma < 0) throw std::invalid_argument("loss config: gamma must be >= 0");
  if (beta < 0 || beta > 1) throw std::invalid_argument("loss config: beta must lie in [0, 1]");
  if (!(dice_eps > 0)) throw std::invalid_argument("loss config: dice eps must be positive");
}

template <typename S>
Var<S> dice_loss(Var<S> probs, const Tensor<S>& target, S eps) {
  const Tensor<S>& p = probs.value();
  if (p.shape != target.shape) throw_shape_error("dice_loss", p.shape, target.shape);
  const Index samples = p.rank() <= 1 ? 1 : p.dim(0);
  const Index per = samples == 0 ? 0 : p.size() / samples;
  std::vector<S> inter(static_cast<size_t>(samples)), denom(static_cast<size_t>(samples));
  S total = 0;
  for (Index b = 0; b < samples; ++b) {
    auto pb = p.data.segment(b * per, per);
    auto yb = target.data.segment(b * per, per);
    inter[static_cast<size_t>(b)] = (pb * yb).sum();
    denom[static_cast<size_t>(b)] = pb.square().sum() + yb.square().sum() + eps;
    total += S(1) - (S(2) * inter[static_cast<size_t>(b)] + eps) / denom[static_cast<size_t>(b)];
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(samples));
  return probs.tape->record(std::move(out), {probs}, [=](BackwardArgs<S>& g) {
    if (!g.in_grads[0]) return;
    const Tensor<S>& pv = *g.in_values[0];
    const S go = g.out_grad[0] / static_cast<S>(samples);
    for (Index b = 0; b < samples; ++b) {
      const S d = denom[static_cast<size_t>(b)];
      const S num = S(2) * inter[static_cast<size_t>(b)] + eps;
      g.in_grads[0]->data.segment(b * per, per) -=
          go * (S(2) * target.data.segment(b * per, per) * d - num * S(2) * pv.data.segment(b * per, per)) / (d * d);
    }
  });
}

template <typename S>
Var<S> focal_loss(Var<S> probs, const Tensor<S>& target, S alpha, S gamma, bool mean) {
  const Tensor<S>& p = probs.value();
  if (p.shape != target.shape) throw_shape_error("focal_loss", p.shape, target.shape);
  const S lo = S(1e-7), hi = S(1) - S(1e-7);
  S total = 0;
  for (Index i = 0; i < p.size(); ++i) {
    const S q = std::clamp(p[i], lo, hi);
    const S y = target[i];
    total += -alpha * y * std::pow(S(1) - q, gamma) * std::log(q) - (S(1) - y) * std::pow(q, gamma) * std::log(S(1) - q);
  }
  const S norm = mean ? S(1) / static_cast<S>(p.size()) : S(1);
  Tensor<S> out = Tensor<S>::scalar(total * norm);
  return probs.tape->record(std::move(out), {probs}, [=](BackwardArgs<S>& g) {
    if (!g.in_grads[0]) return;
    const Tensor<S>& pv = *g.in_values[0];
    const S go = g.out_grad[0] * norm;
    for (Index i = 0; i < pv.size(); ++i) {
      const S q = pv[i];
      if (q < lo || q > hi) continue;
      const S y = target[i];
      const S pos = gamma == S(0) ? S(0) : gamma * std::pow(S(1) - q, gamma - S(1)) * std::log(q);
      const S neg = gamma == S(0) ? S(0) : gamma * std::pow(q, gamma - S(1)) * std::log(S(1) - q);
      const S d = alpha * y * (pos - std::pow(S(1) - q, gamma) / q) -
                  (S(1) - y) * (neg - std::pow(q, gamma) / (S(1) - q));
      (*g.in_grads[0])[i] += go * d;
    }
  });
}

template <typename S>
Var<S> mtlr_nll(Var<S> scores, const std::vector<MtlrLabel>& labels) {
  const Tensor<S>& s = scores.value();
  if (labels.empty()) throw std::invalid_argument("mtlr_nll: empty batch");
  if (s.rank() != 2 || s.dim(0) != static_cast<Index>(labels.size()))
    throw_shape_error("mtlr_nll", s.shape, {static_cast<Index>(labels.size())});
  const Index n = s.dim(0), k1 = s.dim(1), k = k1 + 1;
  for (const auto& l : labels)
    if (l.bin < 0 || l.bin > k1) throw std::invalid_argument("mtlr_nll: label bin out of range");

  // dL/dc per subject, where c_j = sum_{k>=j} s_k is the sequence log-score.
  Tensor<S> dcum({n, k});
  S total = 0;
  for (Index i = 0; i < n; ++i) {
    std::vector<S> c(static_cast<size_t>(k), S(0));
    for (Index j = k1 - 1; j >= 0; --j) c[static_cast<size_t>(j)] = c[static_cast<size_t>(j + 1)] + s[i * k1 + j];
    const S mx = *std::max_element(c.begin(), c.end());
    S z = 0;
    for (S v : c) z += std::exp(v - mx);
    const S log_z = mx + std::log(z);
    const MtlrLabel& l = labels[static_cast<size_t>(i)];
    const Index first = l.bin, last = l.event ? l.bin : k1;  // consistent sequences [first, last]
    S mxc = c[static_cast<size_t>(first)];
    for (Index j = first; j <= last; ++j) mxc = std::max(mxc, c[static_cast<size_t>(j)]);
    S zc = 0;
    for (Index j = first; j <= last; ++j) zc += std::exp(c[static_cast<size_t>(j)] - mxc);
    const S log_num = mxc + std::log(zc);
    total += log_z - log_num;
    for (Index j = 0; j < k; ++j) {
      S d = std::exp(c[static_cast<size_t>(j)] - log_z);
      if (j >= first && j <= last) d -= std::exp(c[static_cast<size_t>(j)] - log_num);
      dcum[i * k + j] = d;
    }
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(n));
  return scores.tape->record(std::move(out), {scores}, [dcum, n, k1, k](BackwardArgs<S>& g) {
    if (!g.in_grads[0]) return;
    const S go = g.out_grad[0] / static_cast<S>(n);
    for (Index i = 0; i < n; ++i) {
      S prefix = 0;
      for (Index j = 0; j < k1; ++j) {
        prefix += dcum[i * k + j];
        (*g.in_grads[0])[i * k1 + j] += go * prefix;
      }
    }
  });
}

template <typename S>
Var<S> combined_loss(Var<S> dice, Var<S> focal, Var<S> nll, S beta) {
  if (beta < S(0) || beta > S(1)) throw std::invalid_argument("combined_loss: beta must lie in [0, 1]");
  return add(scale(add(dice, focal), beta), scale(nll, S(1) - beta));
}

double combined_loss(double dice, double focal, double nll, double beta) {
  if (beta < 0 || beta > 1) throw std::invalid_argument("combined_loss: beta must lie in [0, 1]");
  return beta * (dice + focal) + (1 - beta) * nll;
}

#define SEGSURV_INSTANTIATE_LOSSES(S)                                         \
  template Var<S> dice_loss(Var<S>, const Tensor<S>&, S);                     \
  template Var<S> focal_loss(Var<S>, const Tensor<S>&, S, S, bool);           \
  template Var<S> mtlr_nll(Var<S>, const std::vector<MtlrLabel>&);            \
  template Var<S> combined_loss(Var<S>, Var<S>, Var<S>, S);

SEGSURV_INSTANTIATE_LOSSES(float)
SEGSURV_INSTANTIATE_LOSSES(double)

}  // namespace segsurv
