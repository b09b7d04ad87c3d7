#include "sieve/hypothesis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "sieve/errors.hpp"

namespace sieve {

double cosine_similarity(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw ValidationError("cosine similarity of vectors with different dimensions");
  double dot = 0.0, nu = 0.0, nv = 0.0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    dot += static_cast<double>(u[k]) * v[k];
    nu += static_cast<double>(u[k]) * u[k];
    nv += static_cast<double>(v[k]) * v[k];
  }
  if (nu == 0.0 || nv == 0.0) throw ZeroNormError("cosine similarity of a zero-norm vector");
  return std::clamp(dot / (std::sqrt(nu) * std::sqrt(nv)), -1.0, 1.0);
}

ConceptBank::ConceptBank(const ConceptSet& concepts, const EmbeddingTable& concept_embs)
    : n_(concepts.size()), dim_(concept_embs.dim()), space_id_(concept_embs.space_id), unit_(n_ * dim_) {
  std::unordered_map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < concept_embs.n_items(); ++i) row_of.emplace(normalize_concept(concept_embs.item_ids[i]), i);
  for (std::size_t c = 0; c < n_; ++c) {
    const auto it = row_of.find(concepts.concepts[c]);
    if (it == row_of.end()) throw ValidationError("no embedding for concept '" + concepts.concepts[c] + "'");
    const auto r = concept_embs.row(it->second);
    double norm = 0.0;
    for (float x : r) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ZeroNormError("zero-norm embedding for concept '" + concepts.concepts[c] + "'");
    for (std::size_t k = 0; k < dim_; ++k) unit_[c * dim_ + k] = r[k] / norm;
  }
}

ConceptScoreRow cluster_concept_scores(const EmbeddingTable& cluster_patch_embs, const ConceptBank& bank) {
  if (cluster_patch_embs.n_items() == 0) throw EmptyInputError("cluster has no patches");
  if (cluster_patch_embs.space_id != bank.space_id()) {
    throw SpaceMismatchError("patch space '" + cluster_patch_embs.space_id + "' vs concept space '" +
                             bank.space_id() + "'");
  }
  if (cluster_patch_embs.dim() != bank.dim()) throw SpaceMismatchError("patch and concept dimensions differ");

  const std::size_t dim = bank.dim();
  ConceptScoreRow row;
  row.scores.assign(bank.size(), 0.0);
  std::vector<double> patch(dim);
  for (std::size_t p = 0; p < cluster_patch_embs.n_items(); ++p) {
    const auto r = cluster_patch_embs.row(p);
    double norm = 0.0;
    for (float x : r) norm += static_cast<double>(x) * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) throw ZeroNormError("zero-norm patch embedding " + cluster_patch_embs.item_ids[p]);
    for (std::size_t k = 0; k < dim; ++k) patch[k] = r[k] / norm;
    for (std::size_t c = 0; c < bank.size(); ++c) {
      const auto t = bank.unit_row(c);
      const double cos = std::inner_product(patch.begin(), patch.end(), t.begin(), 0.0);
      row.scores[c] += std::clamp(cos, -1.0, 1.0);
    }
  }
  const auto count = static_cast<double>(cluster_patch_embs.n_items());
  for (double& s : row.scores) s /= count;
  return row;
}

ConceptScoreRow cluster_concept_scores(const EmbeddingTable& cluster_patch_embs, const ConceptSet& concepts,
                                       const EmbeddingTable& concept_embs) {
  if (cluster_patch_embs.space_id != concept_embs.space_id) {
    throw SpaceMismatchError("patch space '" + cluster_patch_embs.space_id + "' vs concept space '" +
                             concept_embs.space_id + "'");
  }
  return cluster_concept_scores(cluster_patch_embs, ConceptBank(concepts, concept_embs));
}

std::vector<Hypothesis> top_k_concepts(const ConceptScoreRow& row, const ConceptSet& concepts, std::size_t k) {
  const std::size_t n = row.scores.size();
  if (n != concepts.size()) throw ValidationError("score row length does not match the concept set");
  if (k < 1 || k > n) throw RangeError("K=" + std::to_string(k) + " outside 1.." + std::to_string(n));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (row.scores[a] != row.scores[b]) return row.scores[a] > row.scores[b];
                      return a < b;
                    });
  std::vector<Hypothesis> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t c = order[i];
    out.push_back(Hypothesis{row.neuron_id, row.cluster_index, concepts.concepts[c], c, row.scores[c], false});
  }
  return out;
}

std::vector<Hypothesis> hypothesize_neuron(std::size_t neuron_id, const ClusterAssignment& clusters,
                                           const EmbeddingTable& patch_embs, const ConceptSet& concepts,
                                           const ConceptBank& bank, std::size_t k) {
  if (clusters.labels.size() != patch_embs.n_items()) {
    throw ValidationError("cluster labels do not align with patch embeddings");
  }
  std::vector<Hypothesis> out;
  const auto groups = clusters.members();
  for (std::size_t j = 0; j < groups.size(); ++j) {
    ConceptScoreRow row = cluster_concept_scores(patch_embs.subset(groups[j]), bank);
    row.neuron_id = neuron_id;
    row.cluster_index = j;
    auto top = top_k_concepts(row, concepts, k);
    out.insert(out.end(), top.begin(), top.end());
  }

  // Keep the best-scoring instance of each concept unflagged; earlier cluster wins a score tie.
  std::unordered_map<std::size_t, std::size_t> primary;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto [it, inserted] = primary.emplace(out[i].concept_index, i);
    if (!inserted && out[i].score > out[it->second].score) it->second = i;
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].duplicate = primary.at(out[i].concept_index) != i;
  return out;
}

}  // namespace sieve
