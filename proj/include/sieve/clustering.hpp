#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "sieve/tensor_store.hpp"

namespace sieve {

/// Symmetric n x n Euclidean distance matrix with a zero diagonal.
class DistanceMatrix {
 public:
  DistanceMatrix() = default;
  explicit DistanceMatrix(std::size_t n) : n_(n), d_(n * n, 0.0) {}

  std::size_t size() const { return n_; }
  double operator()(std::size_t p, std::size_t q) const { return d_[p * n_ + q]; }
  /// Sets both (p,q) and (q,p).
  void set(std::size_t p, std::size_t q, double v) {
    d_[p * n_ + q] = v;
    d_[q * n_ + p] = v;
  }
  /// Symmetry, non-negativity and zero diagonal.
  bool is_valid() const;

 private:
  std::size_t n_ = 0;
  std::vector<double> d_;
};

struct Merge {
  std::size_t a = 0;  // surviving cluster id (smallest member index), a < b
  std::size_t b = 0;
  double cost = 0.0;  // Ward variance increase of merging a and b

  bool operator==(const Merge&) const = default;
};

struct ClusterAssignment {
  std::vector<std::size_t> labels;
  std::size_t m = 0;
  std::vector<Merge> merge_trace;

  /// Members of each cluster, ascending.
  std::vector<std::vector<std::size_t>> members() const;
};

struct SilhouettePoint {
  std::size_t m = 0;
  double score = 0.0;
};

struct ClusterChoice {
  ClusterAssignment assignment;
  std::vector<SilhouettePoint> curve;  // one entry per candidate m that was scored
};

/// Relative tolerance under which two Ward costs count as tied.
inline constexpr double kWardTieTolerance = 1e-12;
inline constexpr double kMinSilhouette = 0.10;
inline constexpr std::size_t kDefaultMaxClusters = 10;

DistanceMatrix pairwise_euclidean(const EmbeddingTable& features);

/// Copy of the table with every row scaled to unit L2 norm.
EmbeddingTable normalize_rows(const EmbeddingTable& table);

/// Ward agglomeration from singletons down to target_m clusters using the
/// Lance-Williams recurrence on squared distances. Ties between equal costs go
/// to the lexicographically smallest (a, b) pair of cluster ids, where a
/// cluster's id is its smallest member index.
ClusterAssignment ward_agglomerate(const DistanceMatrix& d, std::size_t target_m);

/// Mean silhouette width. Points in singleton clusters contribute 0.
double silhouette(const DistanceMatrix& d, const ClusterAssignment& labels);

/// Silhouette-maximizing cluster count over 2..min(max_m, n-1); falls back to
/// a single cluster for n < 4 or when the best score is below kMinSilhouette.
ClusterChoice choose_cluster_count(const DistanceMatrix& d, std::size_t max_m = kDefaultMaxClusters);

}  // namespace sieve
