#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "sieve/pipeline.hpp"

namespace sieve {

// nlohmann adapters for every record that crosses a stage boundary. Infinite
// ratios are written as the string "inf" since JSON has no infinity.

void to_json(nlohmann::json& j, const NeuronStats& s);
void from_json(const nlohmann::json& j, NeuronStats& s);
void to_json(nlohmann::json& j, const CropRect& r);
void from_json(const nlohmann::json& j, CropRect& r);
void to_json(nlohmann::json& j, const SelectionResult& s);
void from_json(const nlohmann::json& j, SelectionResult& s);
void to_json(nlohmann::json& j, const Merge& m);
void from_json(const nlohmann::json& j, Merge& m);
void to_json(nlohmann::json& j, const NeuronClusters& c);
void from_json(const nlohmann::json& j, NeuronClusters& c);
void to_json(nlohmann::json& j, const Hypothesis& h);
void from_json(const nlohmann::json& j, Hypothesis& h);
void to_json(nlohmann::json& j, const PlanEntry& e);
void from_json(const nlohmann::json& j, PlanEntry& e);
void to_json(nlohmann::json& j, const GenerationPlan& p);
void from_json(const nlohmann::json& j, GenerationPlan& p);
void to_json(nlohmann::json& j, const GeneratedEntry& e);
void from_json(const nlohmann::json& j, GeneratedEntry& e);
void to_json(nlohmann::json& j, const VerificationRecord& r);
void from_json(const nlohmann::json& j, VerificationRecord& r);
void to_json(nlohmann::json& j, const NeuronReport& r);
void to_json(nlohmann::json& j, const PipelineReport& r);

/// One compact JSON document per line.
template <typename T>
std::string to_jsonl(const std::vector<T>& items) {
  std::string out;
  for (const auto& item : items) {
    out += nlohmann::json(item).dump();
    out += '\n';
  }
  return out;
}

/// Throws FormatError naming the offending line.
template <typename T>
std::vector<T> from_jsonl(const std::string& text, const std::string& origin);

std::vector<SelectionResult> read_selection(const std::filesystem::path& path);
std::vector<NeuronClusters> read_clusters(const std::filesystem::path& path);
std::vector<Hypothesis> read_hypotheses(const std::filesystem::path& path);
std::vector<VerificationRecord> read_verification(const std::filesystem::path& path);
GenerationPlan read_plan(const std::filesystem::path& path);

/// gen_manifest.json companion of gen_acts.svt1.
std::string gen_manifest_json(const GeneratedActivations& g);
GeneratedActivations read_generated(const std::filesystem::path& dir);
void write_generated(const GeneratedActivations& g, const std::filesystem::path& dir);

/// Markdown table: neuron, concept, score, AR, verdict.
std::string report_markdown(const PipelineReport& r);

}  // namespace sieve
