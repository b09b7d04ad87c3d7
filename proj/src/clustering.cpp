#include "sieve/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "sieve/errors.hpp"

namespace sieve {

namespace {

// Replays the first n - m merges of a full trace; labels follow the order of
// each cluster's smallest member.
ClusterAssignment assignment_from_trace(std::size_t n, std::span<const Merge> trace, std::size_t m) {
  std::vector<std::size_t> owner(n);
  for (std::size_t p = 0; p < n; ++p) owner[p] = p;
  ClusterAssignment out;
  for (std::size_t step = 0; step < n - m; ++step) {
    const Merge& mg = trace[step];
    for (auto& o : owner) {
      if (o == mg.b) o = mg.a;
    }
    out.merge_trace.push_back(mg);
  }
  std::map<std::size_t, std::size_t> label_of_owner;
  for (std::size_t o : owner) label_of_owner.emplace(o, 0);
  std::size_t next = 0;
  for (auto& [o, label] : label_of_owner) label = next++;
  out.labels.resize(n);
  for (std::size_t p = 0; p < n; ++p) out.labels[p] = label_of_owner.at(owner[p]);
  out.m = label_of_owner.size();
  return out;
}

}  // namespace

bool DistanceMatrix::is_valid() const {
  for (std::size_t p = 0; p < n_; ++p) {
    if ((*this)(p, p) != 0.0) return false;
    for (std::size_t q = p + 1; q < n_; ++q) {
      const double v = (*this)(p, q);
      if (!(v >= 0.0) || v != (*this)(q, p)) return false;
    }
  }
  return true;
}

std::vector<std::vector<std::size_t>> ClusterAssignment::members() const {
  std::vector<std::vector<std::size_t>> out(m);
  for (std::size_t p = 0; p < labels.size(); ++p) out.at(labels[p]).push_back(p);
  return out;
}

DistanceMatrix pairwise_euclidean(const EmbeddingTable& features) {
  const std::size_t n = features.n_items();
  DistanceMatrix d(n);
  for (std::size_t p = 0; p < n; ++p) {
    const auto u = features.row(p);
    for (std::size_t q = p + 1; q < n; ++q) {
      const auto v = features.row(q);
      double acc = 0.0;
      for (std::size_t k = 0; k < u.size(); ++k) {
        const double diff = static_cast<double>(u[k]) - static_cast<double>(v[k]);
        acc += diff * diff;
      }
      d.set(p, q, std::sqrt(acc));
    }
  }
  return d;
}

EmbeddingTable normalize_rows(const EmbeddingTable& table) {
  EmbeddingTable out = table;
  const std::size_t dim = table.dim();
  for (std::size_t i = 0; i < table.n_items(); ++i) {
    float* r = out.tensor.data.data() + i * dim;
    double norm = 0.0;
    for (std::size_t k = 0; k < dim; ++k) norm += static_cast<double>(r[k]) * r[k];
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ZeroNormError("cannot normalize zero row " + table.item_ids[i]);
    for (std::size_t k = 0; k < dim; ++k) r[k] = static_cast<float>(r[k] / norm);
  }
  return out;
}

ClusterAssignment ward_agglomerate(const DistanceMatrix& d, std::size_t target_m) {
  const std::size_t n = d.size();
  if (target_m < 1 || target_m > n) {
    throw RangeError("target cluster count " + std::to_string(target_m) + " outside 1.." + std::to_string(n));
  }

  // Lance-Williams on squared distances keeps dist2(A,B) = 2 * Ward cost(A,B).
  std::vector<double> dist2(n * n);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) dist2[p * n + q] = d(p, q) * d(p, q);
  }
  std::vector<double> size(n, 1.0);
  std::vector<bool> active(n, true);
  std::vector<Merge> trace;
  trace.reserve(n - target_m);

  for (std::size_t clusters = n; clusters > target_m; --clusters) {
    bool found = false;
    Merge best;
    for (std::size_t a = 0; a < n; ++a) {
      if (!active[a]) continue;
      for (std::size_t b = a + 1; b < n; ++b) {
        if (!active[b]) continue;
        const double cost = 0.5 * dist2[a * n + b];
        if (!found || cost < best.cost - kWardTieTolerance * std::abs(best.cost)) {
          best = Merge{a, b, cost};
          found = true;
        }
      }
    }
    const std::size_t a = best.a;
    const std::size_t b = best.b;
    const double dab = dist2[a * n + b];
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == a || k == b) continue;
      const double updated = ((size[a] + size[k]) * dist2[a * n + k] + (size[b] + size[k]) * dist2[b * n + k] -
                              size[k] * dab) /
                             (size[a] + size[b] + size[k]);
      dist2[a * n + k] = updated;
      dist2[k * n + a] = updated;
    }
    size[a] += size[b];
    active[b] = false;
    trace.push_back(best);
  }
  return assignment_from_trace(n, trace, target_m);
}

double silhouette(const DistanceMatrix& d, const ClusterAssignment& labels) {
  const std::size_t n = d.size();
  if (labels.m < 2) throw RangeError("silhouette needs at least 2 clusters");
  if (labels.labels.size() != n) throw ValidationError("label count does not match distance matrix");
  std::vector<std::size_t> count(labels.m, 0);
  for (std::size_t l : labels.labels) {
    if (l >= labels.m) throw ValidationError("cluster label out of range");
    ++count[l];
  }
  if (std::find(count.begin(), count.end(), std::size_t{0}) != count.end()) {
    throw ValidationError("silhouette requires every cluster to be non-empty");
  }

  double total = 0.0;
  std::vector<double> sum_to(labels.m);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t own = labels.labels[i];
    if (count[own] == 1) continue;
    std::fill(sum_to.begin(), sum_to.end(), 0.0);
    for (std::size_t j = 0; j < n; ++j) sum_to[labels.labels[j]] += d(i, j);
    const double a = sum_to[own] / static_cast<double>(count[own] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < labels.m; ++c) {
      if (c != own) b = std::min(b, sum_to[c] / static_cast<double>(count[c]));
    }
    const double denom = std::max(a, b);
    if (denom > 0.0) total += (b - a) / denom;
  }
  return total / static_cast<double>(n);
}

ClusterChoice choose_cluster_count(const DistanceMatrix& d, std::size_t max_m) {
  const std::size_t n = d.size();
  if (n < 1) throw EmptyInputError("cannot cluster zero items");

  ClusterChoice choice;
  const ClusterAssignment full = ward_agglomerate(d, 1);
  const std::size_t upper = std::min(max_m, n - 1);
  if (n < 4 || upper < 2) {
    choice.assignment = full;
    return choice;
  }

  std::size_t best_m = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t m = 2; m <= upper; ++m) {
    const double s = silhouette(d, assignment_from_trace(n, full.merge_trace, m));
    choice.curve.push_back({m, s});
    if (s > best_score) {
      best_score = s;
      best_m = m;
    }
  }
  choice.assignment = best_score < kMinSilhouette ? full : assignment_from_trace(n, full.merge_trace, best_m);
  return choice;
}

}  // namespace sieve
