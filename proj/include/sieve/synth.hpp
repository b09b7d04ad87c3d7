#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sieve/tensor_store.hpp"
#include "sieve/verification.hpp"

namespace sieve {

/// Parameters of an analytic world with planted neuron -> concept ground truth.
///
/// Concepts are random unit vectors. Each concept owns `samples_per_concept`
/// probe samples (noisy copies of its vector); background samples (random
/// directions) pad the probe set so every concept makes up 1% of it. Planted
/// neuron i tuned to concept c responds max(0, <x, e_c> - margin); distractor
/// neurons respond with i.i.d. noise around 1.
///
/// With `confusable_decoys`, every concept also gets a "<name> context" decoy
/// text whose embedding leans towards a context direction that co-occurs in
/// the concept's probe images. Decoys out-score the true concept on patch
/// similarity but do not drive the neuron.
struct SyntheticWorldSpec {
  std::size_t n_concepts = 40;
  std::size_t embed_dim = 64;
  std::size_t n_planted_neurons = 64;
  std::size_t n_distractor_neurons = 16;
  std::size_t samples_per_concept = 20;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  bool confusable_decoys = false;
  double context_strength = 1.0;  // weight of the context direction in probe images (decoy worlds)
  double decoy_alignment = 0.4;   // cosine between a decoy embedding and its concept vector
  double margin = 0.5;
  std::size_t map_size = 5;

  void validate() const;
};

struct GroundTruth {
  std::map<std::size_t, std::string> planted;  // neuron -> concept text
  std::vector<std::size_t> distractors;
};

struct SyntheticWorld {
  SyntheticWorldSpec spec;
  ConceptSet concepts;
  std::vector<double> concept_vectors;  // [n_concepts_total, D], ConceptSet order
  std::vector<std::optional<std::size_t>> neuron_concept;  // base concept index per neuron, none for distractors
  ActivationTable activations;
  ActivationMapStack maps;
  EmbeddingTable patch_embs;    // one row per probe sample, id = sample id
  EmbeddingTable concept_embs;  // id = concept text
  GroundTruth truth;

  std::size_t n_neurons() const { return neuron_concept.size(); }
  /// Response of every neuron to one input vector. `item_key` identifies the
  /// input for the distractors' noise stream.
  std::vector<float> respond(std::span<const double> x, std::uint64_t item_key) const;
};

inline constexpr const char* kSynthSpaceId = "synth-vl";
inline constexpr const char* kSynthLayerId = "synth-penultimate";

SyntheticWorld generate_world(const SyntheticWorldSpec& spec);

/// Stand-in text-to-image generator: each plan entry yields n_images noisy
/// copies of its concept vector, seeded by the entry seed.
GeneratedActivations synth_generate_images(const GenerationPlan& plan, const SyntheticWorld& world);

struct RecoveryMetrics {
  std::size_t n_planted = 0;
  std::size_t n_distractors = 0;
  double inclusion_recovery = 0.0;    // retained concepts include the planted one
  double primary_recovery = 0.0;      // best retained concept is the planted one
  double distractor_exclusion = 0.0;  // distractors rejected by the discriminative filter
  std::optional<double> mean_ar_planted_correct;
  std::optional<double> mean_ar_mismatched;
  std::size_t n_correct_records = 0;
  std::size_t n_mismatched_records = 0;
};

RecoveryMetrics planted_recovery_check(std::span<const NeuronReport> reports, const GroundTruth& truth);

SyntheticWorldSpec world_spec_from_json(const std::string& json_text);
std::string world_spec_to_json(const SyntheticWorldSpec& spec);

}  // namespace sieve
