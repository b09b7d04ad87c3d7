#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sieve/clustering.hpp"
#include "sieve/hypothesis.hpp"
#include "sieve/selection.hpp"
#include "sieve/tensor_store.hpp"

namespace sieve {

inline constexpr std::size_t kDefaultImagesPerHypothesis = 10;
inline constexpr double kThresholdQuantile = 0.99;

struct PlanEntry {
  std::size_t neuron_id = 0;
  std::size_t cluster_index = 0;
  std::string concept_text;
  std::string prompt_text;
  std::size_t n_images = 0;
  std::uint64_t seed = 0;

  bool operator==(const PlanEntry&) const = default;
};

struct GenerationPlan {
  std::vector<PlanEntry> entries;
  void validate() const;
};

enum class EntryStatus { ok, failed };

/// Where each plan entry's generated images landed in the returned table.
struct GeneratedEntry {
  std::size_t entry_index = 0;
  std::size_t row_offset = 0;
  std::size_t n_images = 0;
  EntryStatus status = EntryStatus::ok;
};

/// What the image generator hands back: activations over generated items
/// (rows) for every neuron of the layer (columns), plus the row map.
struct GeneratedActivations {
  ActivationTable table;
  std::vector<GeneratedEntry> entries;
  bool deterministic = true;
};

struct VerificationRecord {
  std::size_t neuron_id = 0;
  std::size_t cluster_index = 0;
  std::string concept_text;
  double threshold = 0.0;
  double activation_rate = 0.0;
  std::size_t n_images = 0;
  std::size_t n_active = 0;  // activation_rate * n_images
  bool retained = false;
};

struct FilterOutcome {
  std::vector<VerificationRecord> retained;
  double initial_mean = 0.0;
  double retained_mean = 0.0;
};

/// One plan entry per non-duplicate hypothesis; prompt is the concept text,
/// seeds are seed_base + entry index.
GenerationPlan build_generation_plan(std::span<const Hypothesis> hyps, std::size_t n_images, std::uint64_t seed_base);

/// Top-1% activation threshold over the probe set (0.99 quantile).
double activation_threshold(std::span<const double> probe_column);

/// Fraction of generated activations strictly above the threshold.
double activation_rate(std::span<const double> gen_acts, double threshold);

double mean_activation_rate(std::span<const VerificationRecord> records);

/// Single pass: records below the mean of all records are dropped and the
/// mean is recomputed over the survivors. `retained` flags are set.
FilterOutcome filter_by_initial_mean(std::span<const VerificationRecord> records);

/// Scores every successful plan entry against its neuron's probe threshold.
/// Failed entries produce no record.
std::vector<VerificationRecord> score_plan(const GenerationPlan& plan, const GeneratedActivations& generated,
                                           const ActivationTable& probe);

/// Mean cosine between each neuron's predicted-concept embedding and its
/// ground-truth label embedding, keyed by item id (the neuron id).
struct AgreementResult {
  std::string space_id;
  double mean_cosine = 0.0;
  std::size_t n_pairs = 0;
};

AgreementResult agreement_metrics(const EmbeddingTable& pred_embs, const EmbeddingTable& label_embs,
                                  const std::map<std::string, std::string>& pairing);

struct NeuronHypothesisView {
  Hypothesis hypothesis;
  std::optional<double> activation_rate;  // absent when not verified
  bool retained = false;
};

struct NeuronReport {
  std::size_t neuron_id = 0;
  NeuronStats stats;
  bool discriminative = false;
  std::vector<std::string> patch_ids;
  ClusterChoice clusters;
  std::vector<NeuronHypothesisView> hypotheses;
  std::vector<VerificationRecord> records;
  std::vector<std::string> retained_concepts;
  /// Best retained concept: highest AR, then highest score.
  std::optional<std::string> primary_concept;
};

}  // namespace sieve
