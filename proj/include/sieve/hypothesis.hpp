#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sieve/clustering.hpp"
#include "sieve/tensor_store.hpp"

namespace sieve {

inline constexpr std::size_t kDefaultTopConcepts = 2;

struct ConceptScoreRow {
  std::size_t neuron_id = 0;
  std::size_t cluster_index = 0;
  std::vector<double> scores;  // aligned with the ConceptSet order
};

struct Hypothesis {
  std::size_t neuron_id = 0;
  std::size_t cluster_index = 0;
  std::string concept_text;
  std::size_t concept_index = 0;
  double score = 0.0;
  bool duplicate = false;  // another cluster of the same neuron scored this concept higher

  bool operator==(const Hypothesis&) const = default;
};

/// dot(u,v) / (|u||v|), clamped to [-1, 1]. Throws ZeroNormError.
double cosine_similarity(std::span<const float> u, std::span<const float> v);

/// Concept embeddings arranged in ConceptSet order, unit-normalized once so
/// that scoring a cluster is a plain dot product per (patch, concept) pair.
class ConceptBank {
 public:
  /// Rows are looked up by concept text; every concept must be present.
  ConceptBank(const ConceptSet& concepts, const EmbeddingTable& concept_embs);

  std::size_t size() const { return n_; }
  std::size_t dim() const { return dim_; }
  const std::string& space_id() const { return space_id_; }
  std::span<const double> unit_row(std::size_t concept_index) const { return {unit_.data() + concept_index * dim_, dim_}; }

 private:
  std::size_t n_ = 0;
  std::size_t dim_ = 0;
  std::string space_id_;
  std::vector<double> unit_;
};

/// Mean cosine similarity of each concept against every patch of one cluster.
ConceptScoreRow cluster_concept_scores(const EmbeddingTable& cluster_patch_embs, const ConceptBank& bank);
ConceptScoreRow cluster_concept_scores(const EmbeddingTable& cluster_patch_embs, const ConceptSet& concepts,
                                       const EmbeddingTable& concept_embs);

/// K best concepts, descending score, ties by ascending concept index.
std::vector<Hypothesis> top_k_concepts(const ConceptScoreRow& row, const ConceptSet& concepts, std::size_t k);

/// Per-cluster top-K hypotheses for one neuron. `patch_embs` rows are the
/// neuron's selected patches in the order the cluster labels refer to.
std::vector<Hypothesis> hypothesize_neuron(std::size_t neuron_id, const ClusterAssignment& clusters,
                                           const EmbeddingTable& patch_embs, const ConceptSet& concepts,
                                           const ConceptBank& bank, std::size_t k);

}  // namespace sieve
