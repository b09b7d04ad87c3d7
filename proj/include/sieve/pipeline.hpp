#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sieve/clustering.hpp"
#include "sieve/config.hpp"
#include "sieve/hypothesis.hpp"
#include "sieve/selection.hpp"
#include "sieve/tensor_store.hpp"
#include "sieve/verification.hpp"

namespace sieve {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first exception
/// thrown by any task is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

struct NeuronClusters {
  std::size_t neuron_id = 0;
  std::vector<std::string> patch_ids;  // row order the labels refer to
  ClusterChoice choice;
};

struct HypothesizeOutput {
  std::vector<NeuronClusters> clusters;  // discriminative neurons only, ascending id
  std::vector<Hypothesis> hypotheses;
};

struct VerifyOutput {
  std::vector<VerificationRecord> records;  // every scored entry, `retained` set by the mean filter
  std::optional<double> initial_mean;
  std::optional<double> retained_mean;
};

struct PipelineReport {
  bool verified = false;
  std::optional<double> initial_mean;
  std::optional<double> retained_mean;
  std::vector<NeuronReport> neurons;  // one per neuron of the layer, ascending id
};

std::vector<SelectionResult> run_select(const ActivationTable& acts, const ActivationMapStack* maps,
                                        const SelectionConfig& cfg, std::size_t jobs = 1);

/// Patch row for (sample, neuron): "<sample>#<neuron>" if present, else the bare sample id.
std::size_t find_patch_row(const EmbeddingTable& patch_embs, const std::string& sample_id, std::size_t neuron_id);

HypothesizeOutput run_hypothesize(std::span<const SelectionResult> selection, const EmbeddingTable& patch_embs,
                                  const ConceptSet& concepts, const EmbeddingTable& concept_embs,
                                  const PipelineConfig& cfg, std::size_t jobs = 1);

GenerationPlan plan_for(const HypothesizeOutput& hyp, const PipelineConfig& cfg);

VerifyOutput run_verify(const GenerationPlan& plan, const GeneratedActivations& generated,
                        const ActivationTable& probe);

/// `verify` may be null when verification was disabled.
PipelineReport build_report(std::span<const SelectionResult> selection, const HypothesizeOutput& hyp,
                            const VerifyOutput* verify);

using ImageGenerator = std::function<GeneratedActivations(const GenerationPlan&)>;

struct PipelineInputs {
  const ActivationTable& activations;
  const ActivationMapStack* maps = nullptr;
  const EmbeddingTable& patch_embs;
  const ConceptSet& concepts;
  const EmbeddingTable& concept_embs;
};

/// select -> hypothesize -> (generate -> verify) -> report, all in memory.
PipelineReport run_pipeline(const PipelineInputs& in, const PipelineConfig& cfg, const ImageGenerator& generate,
                            std::size_t jobs = 1);

}  // namespace sieve
