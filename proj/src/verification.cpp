#include "sieve/verification.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <tuple>
#include <unordered_map>

#include "sieve/errors.hpp"

namespace sieve {

void GenerationPlan::validate() const {
  std::set<std::tuple<std::size_t, std::size_t, std::string>> seen;
  for (const auto& e : entries) {
    if (e.n_images < 1) throw ValidationError("plan entry for '" + e.concept_text + "' requests zero images");
    if (e.concept_text.empty()) throw ValidationError("plan entry with empty concept text");
    if (!seen.emplace(e.neuron_id, e.cluster_index, e.concept_text).second) {
      throw ValidationError("duplicate plan entry (neuron " + std::to_string(e.neuron_id) + ", cluster " +
                            std::to_string(e.cluster_index) + ", '" + e.concept_text + "')");
    }
  }
}

GenerationPlan build_generation_plan(std::span<const Hypothesis> hyps, std::size_t n_images, std::uint64_t seed_base) {
  if (hyps.empty()) throw EmptyInputError("no hypotheses to build a generation plan from");
  GenerationPlan plan;
  for (const auto& h : hyps) {
    if (h.concept_text.empty()) throw ValidationError("hypothesis with empty concept text");
    if (h.duplicate) continue;
    PlanEntry e;
    e.neuron_id = h.neuron_id;
    e.cluster_index = h.cluster_index;
    e.concept_text = h.concept_text;
    e.prompt_text = h.concept_text;
    e.n_images = n_images;
    e.seed = seed_base + plan.entries.size();
    plan.entries.push_back(std::move(e));
  }
  plan.validate();
  return plan;
}

double activation_threshold(std::span<const double> probe_column) {
  if (probe_column.empty()) throw EmptyInputError("empty probe column");
  return quantile(probe_column, kThresholdQuantile);
}

double activation_rate(std::span<const double> gen_acts, double threshold) {
  if (gen_acts.empty()) throw EmptyInputError("no generated activations");
  const auto above = std::count_if(gen_acts.begin(), gen_acts.end(), [&](double a) { return a > threshold; });
  return static_cast<double>(above) / static_cast<double>(gen_acts.size());
}

double mean_activation_rate(std::span<const VerificationRecord> records) {
  if (records.empty()) throw EmptyInputError("no verification records");
  double sum = 0.0;
  for (const auto& r : records) sum += r.activation_rate;
  return sum / static_cast<double>(records.size());
}

FilterOutcome filter_by_initial_mean(std::span<const VerificationRecord> records) {
  FilterOutcome out;
  out.initial_mean = mean_activation_rate(records);
  for (const auto& r : records) {
    if (r.activation_rate >= out.initial_mean) {
      out.retained.push_back(r);
      out.retained.back().retained = true;
    }
  }
  // The maximum can land a rounding error below the mean of an all-equal set.
  if (out.retained.empty()) {
    const auto best = std::max_element(records.begin(), records.end(), [](const auto& a, const auto& b) {
      return a.activation_rate < b.activation_rate;
    });
    for (const auto& r : records) {
      if (r.activation_rate == best->activation_rate) {
        out.retained.push_back(r);
        out.retained.back().retained = true;
      }
    }
  }
  out.retained_mean = mean_activation_rate(out.retained);
  return out;
}

std::vector<VerificationRecord> score_plan(const GenerationPlan& plan, const GeneratedActivations& generated,
                                           const ActivationTable& probe) {
  std::unordered_map<std::size_t, const GeneratedEntry*> by_entry;
  for (const auto& g : generated.entries) by_entry.emplace(g.entry_index, &g);

  std::unordered_map<std::size_t, double> thresholds;
  std::vector<VerificationRecord> records;
  for (std::size_t e = 0; e < plan.entries.size(); ++e) {
    const PlanEntry& entry = plan.entries[e];
    const auto it = by_entry.find(e);
    if (it == by_entry.end() || it->second->status != EntryStatus::ok || it->second->n_images == 0) continue;
    const GeneratedEntry& g = *it->second;
    if (g.row_offset + g.n_images > generated.table.n_samples()) {
      throw ValidationError("generated entry " + std::to_string(e) + " exceeds the generated activation table");
    }
    if (entry.neuron_id >= generated.table.n_neurons()) {
      throw KeyError("generated activations do not cover neuron " + std::to_string(entry.neuron_id));
    }

    auto [th, inserted] = thresholds.try_emplace(entry.neuron_id, 0.0);
    if (inserted) th->second = activation_threshold(probe.column(entry.neuron_id));

    std::vector<double> acts(g.n_images);
    for (std::size_t i = 0; i < g.n_images; ++i) acts[i] = generated.table.at(g.row_offset + i, entry.neuron_id);

    VerificationRecord rec;
    rec.neuron_id = entry.neuron_id;
    rec.cluster_index = entry.cluster_index;
    rec.concept_text = entry.concept_text;
    rec.threshold = th->second;
    rec.n_images = g.n_images;
    rec.n_active = static_cast<std::size_t>(
        std::count_if(acts.begin(), acts.end(), [&](double a) { return a > rec.threshold; }));
    rec.activation_rate = activation_rate(acts, rec.threshold);
    records.push_back(std::move(rec));
  }
  return records;
}

AgreementResult agreement_metrics(const EmbeddingTable& pred_embs, const EmbeddingTable& label_embs,
                                  const std::map<std::string, std::string>& pairing) {
  if (pred_embs.space_id != label_embs.space_id) {
    throw SpaceMismatchError("prediction space '" + pred_embs.space_id + "' vs label space '" + label_embs.space_id +
                             "'");
  }
  if (pred_embs.n_items() == 0) throw EmptyInputError("no predictions to compare");
  AgreementResult res;
  res.space_id = pred_embs.space_id;
  double sum = 0.0;
  for (std::size_t i = 0; i < pred_embs.n_items(); ++i) {
    const auto& id = pred_embs.item_ids[i];
    const auto pair = pairing.find(id);
    if (pair == pairing.end()) throw PairingError("no ground-truth label paired with neuron " + id);
    const auto label_row = label_embs.find(pair->second);
    if (!label_row) throw PairingError("label '" + pair->second + "' for neuron " + id + " has no embedding");
    sum += cosine_similarity(pred_embs.row(i), label_embs.row(*label_row));
    ++res.n_pairs;
  }
  res.mean_cosine = sum / static_cast<double>(res.n_pairs);
  return res;
}

}  // namespace sieve
