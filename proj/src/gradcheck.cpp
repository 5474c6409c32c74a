#include "segsurv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace segsurv {
namespace {

double evaluate(const ScalarFunction& f) {
  Tape<double> tape;
  const double v = f(tape).value().item();
  if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite forward value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarFunction& f, ParameterSet<double>& params, const GradCheckOptions& opts) {
  if (opts.step <= 0) throw std::invalid_argument("grad_check: step must be positive");
  params.zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = f(tape);
    if (!std::isfinite(loss.value().item())) throw std::domain_error("grad_check: non-finite forward value");
    tape.backward(loss);
  }

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  std::mt19937_64 rng(opts.seed);
  for (auto& p : params) {
    if (!p.trainable) continue;
    GradCheckEntry entry;
    entry.name = p.name;
    std::vector<Index> probe(static_cast<size_t>(p.value.size()));
    std::iota(probe.begin(), probe.end(), Index(0));
    if (opts.max_entries >= 0 && static_cast<Index>(probe.size()) > opts.max_entries) {
      std::shuffle(probe.begin(), probe.end(), rng);
      probe.resize(static_cast<size_t>(opts.max_entries));
      std::sort(probe.begin(), probe.end());
    }
    const Tensor<double> analytic = p.grad;
    for (Index k : probe) {
      const double orig = p.value[k];
      p.value[k] = orig + opts.step;
      const double up = evaluate(f);
      p.value[k] = orig - opts.step;
      const double down = evaluate(f);
      p.value[k] = orig;
      const double numeric = (up - down) / (2 * opts.step);
      const double a = analytic[k];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), opts.floor});
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      ++entry.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

GradCheckReport grad_check(const std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>& f,
                           const std::vector<Tensor<double>>& inputs, const GradCheckOptions& opts) {
  ParameterSet<double> params;
  std::vector<Parameter<double>*> slots;
  for (size_t i = 0; i < inputs.size(); ++i) {
    auto& p = params.add("input" + std::to_string(i), inputs[i].shape);
    p.value = inputs[i];
    slots.push_back(&p);
  }
  ScalarFunction wrapped = [&](Tape<double>& tape) {
    std::vector<Var<double>> vars;
    for (auto* p : slots) vars.push_back(tape.param(*p));
    return f(tape, vars);
  };
  return grad_check(wrapped, params, opts);
}

}  // namespace segsurv
