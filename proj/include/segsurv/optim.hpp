// First-order optimizers over a ParameterSet. Weight decay is decoupled: it
// shrinks each trainable tensor by lr·wd before the gradient step.
#pragma once

#include "segsurv/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace segsurv {

enum class OptimizerKind { Sgd, Momentum, AdamW };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::Momentum: return "momentum";
    case OptimizerKind::AdamW: return "adamw";
  }
  return "sgd";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "momentum") return OptimizerKind::Momentum;
  if (s == "adamw" || s == "adam") return OptimizerKind::AdamW;
  throw std::invalid_argument("unknown optimizer '" + s + "' (expected sgd, momentum or adamw)");
}

template <typename S>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double weight_decay, double momentum = 0.9, double beta1 = 0.9,
            double beta2 = 0.999, double eps = 1e-8)
      : kind_(kind), wd_(weight_decay), momentum_(momentum), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Applies one update with learning rate lr using the gradients currently
  /// stored in the parameters. Non-trainable entries are left alone.
  void step(ParameterSet<S>& params, double lr) {
    if (m_.empty()) {
      for (auto& p : params) {
        m_.push_back(Tensor<S>::zeros(p.value.shape));
        v_.push_back(kind_ == OptimizerKind::AdamW ? Tensor<S>::zeros(p.value.shape) : Tensor<S>{});
      }
    }
    if (m_.size() != params.size()) throw std::logic_error("optimizer: parameter set changed size");
    ++t_;
    const S lr_s = static_cast<S>(lr);
    const S decay = static_cast<S>(1.0 - lr * wd_);
    size_t i = 0;
    for (auto& p : params) {
      const size_t slot = i++;
      if (!p.trainable) continue;
      if (p.grad.size() != p.value.size()) continue;  // never reached by backward
      p.value.data *= decay;
      switch (kind_) {
        case OptimizerKind::Sgd:
          p.value.data -= lr_s * p.grad.data;
          break;
        case OptimizerKind::Momentum: {
          auto& m = m_[slot].data;
          m = static_cast<S>(momentum_) * m + p.grad.data;
          p.value.data -= lr_s * m;
          break;
        }
        case OptimizerKind::AdamW: {
          auto& m = m_[slot].data;
          auto& v = v_[slot].data;
          m = static_cast<S>(beta1_) * m + static_cast<S>(1 - beta1_) * p.grad.data;
          v = static_cast<S>(beta2_) * v + static_cast<S>(1 - beta2_) * p.grad.data.square();
          const S c1 = static_cast<S>(1 - std::pow(beta1_, static_cast<double>(t_)));
          const S c2 = static_cast<S>(1 - std::pow(beta2_, static_cast<double>(t_)));
          p.value.data -= lr_s * (m / c1) / ((v / c2).sqrt() + static_cast<S>(eps_));
          break;
        }
      }
    }
  }

  long long steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double wd_, momentum_, beta1_, beta2_, eps_;
  long long t_ = 0;
  std::vector<Tensor<S>> m_, v_;
};

}  // namespace segsurv
