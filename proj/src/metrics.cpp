#include "segsurv/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace segsurv {

double dsc_metric(const Volume& predicted, const Volume& truth) {
  if (predicted.shape != truth.shape)
    throw ShapeError("dsc: shape mismatch " + shape_str({predicted.shape[0], predicted.shape[1], predicted.shape[2]}) +
                     " vs " + shape_str({truth.shape[0], truth.shape[1], truth.shape[2]}));
  double inter = 0, a = 0, b = 0;
  for (Index i = 0; i < predicted.data.size(); ++i) {
    const bool p = predicted.data[i] > 0.5f, t = truth.data[i] > 0.5f;
    inter += p && t;
    a += p;
    b += t;
  }
  if (a + b == 0) return 0.0;
  return 2.0 * inter / (a + b);
}

double mean_dsc(const std::vector<Volume>& predicted, const std::vector<Volume>& truth) {
  if (predicted.size() != truth.size() || predicted.empty())
    throw std::invalid_argument("mean_dsc: need equally many non-zero predicted and reference masks");
  double total = 0;
  for (size_t i = 0; i < predicted.size(); ++i) total += dsc_metric(predicted[i], truth[i]);
  return total / static_cast<double>(predicted.size());
}

double ConcordanceCounts::value() const {
  if (comparable == 0) throw NoComparablePairs();
  return concordant / static_cast<double>(comparable);
}

namespace {

// Fenwick tree over risk ranks.
class Fenwick {
 public:
  explicit Fenwick(size_t n) : tree_(n + 1, 0) {}
  void add(size_t i, long long v) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) tree_[i] += v;
  }
  // Sum over ranks [0, i).
  long long prefix(size_t i) const {
    long long s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<long long> tree_;
};

}  // namespace

ConcordanceCounts concordance(const Eigen::VectorXd& risk, const Eigen::VectorXd& time,
                              const std::vector<int>& event) {
  const size_t n = static_cast<size_t>(risk.size());
  if (static_cast<size_t>(time.size()) != n || event.size() != n)
    throw std::invalid_argument("c_index: risk, time and event lengths differ (" + std::to_string(n) + ", " +
                                std::to_string(time.size()) + ", " + std::to_string(event.size()) + ")");
  if (!risk.allFinite() || !time.allFinite()) throw std::domain_error("c_index: non-finite input");

  std::vector<double> sorted_risk(risk.data(), risk.data() + n);
  std::sort(sorted_risk.begin(), sorted_risk.end());
  sorted_risk.erase(std::unique(sorted_risk.begin(), sorted_risk.end()), sorted_risk.end());
  std::vector<size_t> rank(n);
  for (size_t i = 0; i < n; ++i)
    rank[i] = static_cast<size_t>(std::lower_bound(sorted_risk.begin(), sorted_risk.end(), risk[i]) - sorted_risk.begin());

  // Sweep times from largest to smallest; the tree holds subjects with strictly
  // larger times than the current tie group.
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return time[a] > time[b]; });
  Fenwick tree(sorted_risk.size());
  ConcordanceCounts out;
  long long later = 0;
  size_t g = 0;
  while (g < n) {
    size_t end = g;
    while (end < n && time[order[end]] == time[order[g]]) ++end;
    for (size_t q = g; q < end; ++q) {
      const size_t i = order[q];
      if (!event[i]) continue;
      const long long lower = tree.prefix(rank[i]);
      const long long tied = tree.prefix(rank[i] + 1) - lower;
      out.concordant += static_cast<double>(lower) + 0.5 * static_cast<double>(tied);
      out.comparable += later;
    }
    for (size_t q = g; q < end; ++q) tree.add(rank[order[q]], 1);
    later += static_cast<long long>(end - g);
    g = end;
  }
  return out;
}

double c_index(const Eigen::VectorXd& risk, const Eigen::VectorXd& time, const std::vector<int>& event) {
  return concordance(risk, time, event).value();
}

}  // namespace segsurv
