#include "sieve/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <thread>
#include <tuple>

#include "sieve/errors.hpp"

namespace sieve {

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(std::max<std::size_t>(jobs, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n && !failed; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          failed = true;
        }
      }
    });
  }
  pool.clear();
  if (first_error) std::rethrow_exception(first_error);
}

std::vector<SelectionResult> run_select(const ActivationTable& acts, const ActivationMapStack* maps,
                                        const SelectionConfig& cfg, std::size_t jobs) {
  cfg.validate();
  std::vector<SelectionResult> out(acts.n_neurons());
  parallel_for(out.size(), jobs, [&](std::size_t n) {
    const bool has_map = maps != nullptr && maps->covers(n);
    out[n] = select_high_activation(acts, n, cfg, has_map ? maps : nullptr);
  });
  return out;
}

std::size_t find_patch_row(const EmbeddingTable& patch_embs, const std::string& sample_id, std::size_t neuron_id) {
  if (auto row = patch_embs.find(sample_id + "#" + std::to_string(neuron_id))) return *row;
  if (auto row = patch_embs.find(sample_id)) return *row;
  throw KeyError("no patch embedding for sample " + sample_id + " of neuron " + std::to_string(neuron_id));
}

HypothesizeOutput run_hypothesize(std::span<const SelectionResult> selection, const EmbeddingTable& patch_embs,
                                  const ConceptSet& concepts, const EmbeddingTable& concept_embs,
                                  const PipelineConfig& cfg, std::size_t jobs) {
  cfg.validate();
  if (patch_embs.space_id != concept_embs.space_id) {
    throw SpaceMismatchError("patch space '" + patch_embs.space_id + "' vs concept space '" + concept_embs.space_id +
                             "'");
  }
  const ConceptBank bank(concepts, concept_embs);

  std::vector<const SelectionResult*> todo;
  for (const auto& s : selection) {
    if (s.discriminative && !s.selected_sample_ids.empty()) todo.push_back(&s);
  }
  std::sort(todo.begin(), todo.end(), [](auto* a, auto* b) { return a->neuron_id < b->neuron_id; });

  std::vector<NeuronClusters> clusters(todo.size());
  std::vector<std::vector<Hypothesis>> per_neuron(todo.size());
  parallel_for(todo.size(), jobs, [&](std::size_t i) {
    const SelectionResult& sel = *todo[i];
    std::vector<std::size_t> rows;
    for (const auto& sid : sel.selected_sample_ids) rows.push_back(find_patch_row(patch_embs, sid, sel.neuron_id));
    const EmbeddingTable patches = patch_embs.subset(rows);

    NeuronClusters& nc = clusters[i];
    nc.neuron_id = sel.neuron_id;
    nc.patch_ids = patches.item_ids;
    nc.choice = choose_cluster_count(pairwise_euclidean(normalize_rows(patches)), cfg.max_clusters);
    per_neuron[i] = hypothesize_neuron(sel.neuron_id, nc.choice.assignment, patches, concepts, bank, cfg.top_concepts);
  });

  HypothesizeOutput out;
  out.clusters = std::move(clusters);
  for (auto& h : per_neuron) out.hypotheses.insert(out.hypotheses.end(), h.begin(), h.end());
  return out;
}

GenerationPlan plan_for(const HypothesizeOutput& hyp, const PipelineConfig& cfg) {
  if (hyp.hypotheses.empty()) return {};
  return build_generation_plan(hyp.hypotheses, cfg.n_images, cfg.seed);
}

VerifyOutput run_verify(const GenerationPlan& plan, const GeneratedActivations& generated,
                        const ActivationTable& probe) {
  VerifyOutput out;
  out.records = score_plan(plan, generated, probe);
  if (out.records.empty()) return out;

  const FilterOutcome f = filter_by_initial_mean(out.records);
  out.initial_mean = f.initial_mean;
  out.retained_mean = f.retained_mean;
  std::set<std::tuple<std::size_t, std::size_t, std::string>> kept;
  for (const auto& r : f.retained) kept.emplace(r.neuron_id, r.cluster_index, r.concept_text);
  for (auto& r : out.records) r.retained = kept.contains({r.neuron_id, r.cluster_index, r.concept_text});
  return out;
}

PipelineReport build_report(std::span<const SelectionResult> selection, const HypothesizeOutput& hyp,
                            const VerifyOutput* verify) {
  PipelineReport report;
  report.verified = verify != nullptr;
  if (verify) {
    report.initial_mean = verify->initial_mean;
    report.retained_mean = verify->retained_mean;
  }

  std::map<std::size_t, const NeuronClusters*> clusters_of;
  for (const auto& c : hyp.clusters) clusters_of.emplace(c.neuron_id, &c);
  // Duplicates were never planned; they share the (neuron, concept) record of their primary.
  std::map<std::pair<std::size_t, std::string>, const VerificationRecord*> record_of;
  if (verify) {
    for (const auto& r : verify->records) record_of.emplace(std::pair{r.neuron_id, r.concept_text}, &r);
  }

  std::vector<const SelectionResult*> ordered;
  for (const auto& s : selection) ordered.push_back(&s);
  std::sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->neuron_id < b->neuron_id; });

  for (const SelectionResult* sel : ordered) {
    NeuronReport nr;
    nr.neuron_id = sel->neuron_id;
    nr.stats = sel->stats;
    nr.discriminative = sel->discriminative;
    if (const auto it = clusters_of.find(nr.neuron_id); it != clusters_of.end()) {
      nr.patch_ids = it->second->patch_ids;
      nr.clusters = it->second->choice;
    }
    for (const auto& h : hyp.hypotheses) {
      if (h.neuron_id != nr.neuron_id) continue;
      NeuronHypothesisView view{h, std::nullopt, !verify};
      if (verify) {
        if (const auto r = record_of.find({h.neuron_id, h.concept_text}); r != record_of.end()) {
          view.activation_rate = r->second->activation_rate;
          view.retained = r->second->retained;
        }
      }
      nr.hypotheses.push_back(std::move(view));
    }
    if (verify) {
      for (const auto& r : verify->records) {
        if (r.neuron_id == nr.neuron_id) nr.records.push_back(r);
      }
    }

    const NeuronHypothesisView* best = nullptr;
    for (const auto& v : nr.hypotheses) {
      if (!v.retained) continue;
      if (std::find(nr.retained_concepts.begin(), nr.retained_concepts.end(), v.hypothesis.concept_text) ==
          nr.retained_concepts.end()) {
        nr.retained_concepts.push_back(v.hypothesis.concept_text);
      }
      const double ar = v.activation_rate.value_or(0.0);
      if (best == nullptr || ar > best->activation_rate.value_or(0.0) ||
          (ar == best->activation_rate.value_or(0.0) && v.hypothesis.score > best->hypothesis.score)) {
        best = &v;
      }
    }
    if (best) nr.primary_concept = best->hypothesis.concept_text;
    report.neurons.push_back(std::move(nr));
  }
  return report;
}

PipelineReport run_pipeline(const PipelineInputs& in, const PipelineConfig& cfg, const ImageGenerator& generate,
                            std::size_t jobs) {
  const auto selection = run_select(in.activations, in.maps, cfg.selection, jobs);
  const auto hyp = run_hypothesize(selection, in.patch_embs, in.concepts, in.concept_embs, cfg, jobs);
  if (!cfg.verify) return build_report(selection, hyp, nullptr);

  const GenerationPlan plan = plan_for(hyp, cfg);
  VerifyOutput verified;
  if (!plan.entries.empty()) verified = run_verify(plan, generate(plan), in.activations);
  return build_report(selection, hyp, &verified);
}

}  // namespace sieve
