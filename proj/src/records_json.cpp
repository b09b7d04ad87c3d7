#include "sieve/records_json.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "sieve/errors.hpp"

namespace sieve {

using nlohmann::json;

namespace {

json finite_or_tag(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double number_or_tag(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    throw FormatError("expected a number or \"inf\", got \"" + s + "\"");
  }
  return j.get<double>();
}

json read_json(const std::filesystem::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

void to_json(json& j, const NeuronStats& s) {
  j = json{{"neuron", s.neuron_id},
           {"median", s.median},
           {"p99", s.p99},
           {"ratio", finite_or_tag(s.ratio)},
           {"n_samples", s.n_samples}};
}

void from_json(const json& j, NeuronStats& s) {
  s.neuron_id = j.at("neuron").get<std::size_t>();
  s.median = j.at("median").get<double>();
  s.p99 = j.at("p99").get<double>();
  s.ratio = number_or_tag(j.at("ratio"));
  s.n_samples = j.at("n_samples").get<std::size_t>();
}

void to_json(json& j, const CropRect& r) { j = json::array({r.x0, r.y0, r.x1, r.y1}); }

void from_json(const json& j, CropRect& r) {
  if (!j.is_array() || j.size() != 4) throw FormatError("crop rect must be [x0, y0, x1, y1]");
  r = CropRect{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

void to_json(json& j, const SelectionResult& s) {
  j = json{{"neuron", s.neuron_id},
           {"discriminative", s.discriminative},
           {"stats", s.stats},
           {"selected", s.selected_sample_ids},
           {"crop_rects", s.crop_rects}};
}

void from_json(const json& j, SelectionResult& s) {
  s.neuron_id = j.at("neuron").get<std::size_t>();
  s.discriminative = j.at("discriminative").get<bool>();
  s.stats = j.at("stats").get<NeuronStats>();
  s.selected_sample_ids = j.at("selected").get<std::vector<std::string>>();
  s.crop_rects = j.at("crop_rects").get<std::vector<CropRect>>();
}

void to_json(json& j, const Merge& m) { j = json::array({m.a, m.b, m.cost}); }

void from_json(const json& j, Merge& m) {
  if (!j.is_array() || j.size() != 3) throw FormatError("merge must be [a, b, cost]");
  m = Merge{j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<double>()};
}

void to_json(json& j, const NeuronClusters& c) {
  json curve = json::array();
  for (const auto& p : c.choice.curve) curve.push_back(json{{"m", p.m}, {"score", p.score}});
  j = json{{"neuron", c.neuron_id},
           {"m", c.choice.assignment.m},
           {"patch_ids", c.patch_ids},
           {"labels", c.choice.assignment.labels},
           {"merge_trace", c.choice.assignment.merge_trace},
           {"silhouette_curve", curve},
           {"unit_normalized", true}};
}

void from_json(const json& j, NeuronClusters& c) {
  c.neuron_id = j.at("neuron").get<std::size_t>();
  c.patch_ids = j.at("patch_ids").get<std::vector<std::string>>();
  c.choice.assignment.m = j.at("m").get<std::size_t>();
  c.choice.assignment.labels = j.at("labels").get<std::vector<std::size_t>>();
  c.choice.assignment.merge_trace = j.at("merge_trace").get<std::vector<Merge>>();
  c.choice.curve.clear();
  for (const auto& p : j.at("silhouette_curve")) {
    c.choice.curve.push_back({p.at("m").get<std::size_t>(), p.at("score").get<double>()});
  }
}

void to_json(json& j, const Hypothesis& h) {
  j = json{{"neuron", h.neuron_id},        {"cluster", h.cluster_index}, {"concept", h.concept_text},
           {"concept_index", h.concept_index}, {"score", h.score},           {"duplicate", h.duplicate}};
}

void from_json(const json& j, Hypothesis& h) {
  h.neuron_id = j.at("neuron").get<std::size_t>();
  h.cluster_index = j.at("cluster").get<std::size_t>();
  h.concept_text = j.at("concept").get<std::string>();
  h.concept_index = j.at("concept_index").get<std::size_t>();
  h.score = j.at("score").get<double>();
  h.duplicate = j.at("duplicate").get<bool>();
}

void to_json(json& j, const PlanEntry& e) {
  j = json{{"neuron", e.neuron_id}, {"cluster", e.cluster_index}, {"concept", e.concept_text},
           {"prompt", e.prompt_text}, {"n_images", e.n_images},     {"seed", e.seed}};
}

void from_json(const json& j, PlanEntry& e) {
  e.neuron_id = j.at("neuron").get<std::size_t>();
  e.cluster_index = j.at("cluster").get<std::size_t>();
  e.concept_text = j.at("concept").get<std::string>();
  e.prompt_text = j.at("prompt").get<std::string>();
  e.n_images = j.at("n_images").get<std::size_t>();
  e.seed = j.at("seed").get<std::uint64_t>();
}

void to_json(json& j, const GenerationPlan& p) { j = json{{"entries", p.entries}}; }

void from_json(const json& j, GenerationPlan& p) { p.entries = j.at("entries").get<std::vector<PlanEntry>>(); }

void to_json(json& j, const GeneratedEntry& e) {
  j = json{{"entry", e.entry_index},
           {"row_offset", e.row_offset},
           {"n_images", e.n_images},
           {"status", e.status == EntryStatus::ok ? "ok" : "failed"}};
}

void from_json(const json& j, GeneratedEntry& e) {
  e.entry_index = j.at("entry").get<std::size_t>();
  e.row_offset = j.value("row_offset", std::size_t{0});
  e.n_images = j.value("n_images", std::size_t{0});
  const auto status = j.at("status").get<std::string>();
  if (status != "ok" && status != "failed") throw FormatError("entry status must be \"ok\" or \"failed\"");
  e.status = status == "ok" ? EntryStatus::ok : EntryStatus::failed;
}

void to_json(json& j, const VerificationRecord& r) {
  j = json{{"neuron", r.neuron_id},       {"cluster", r.cluster_index},
           {"concept", r.concept_text},   {"threshold", r.threshold},
           {"activation_rate", r.activation_rate}, {"n_active", r.n_active},
           {"n_images", r.n_images},      {"retained", r.retained}};
}

void from_json(const json& j, VerificationRecord& r) {
  r.neuron_id = j.at("neuron").get<std::size_t>();
  r.cluster_index = j.at("cluster").get<std::size_t>();
  r.concept_text = j.at("concept").get<std::string>();
  r.threshold = j.at("threshold").get<double>();
  r.activation_rate = j.at("activation_rate").get<double>();
  r.n_active = j.at("n_active").get<std::size_t>();
  r.n_images = j.at("n_images").get<std::size_t>();
  r.retained = j.at("retained").get<bool>();
}

void to_json(json& j, const NeuronReport& r) {
  json hyps = json::array();
  for (const auto& v : r.hypotheses) {
    json h = v.hypothesis;
    h.erase("neuron");
    h["activation_rate"] = v.activation_rate ? json(*v.activation_rate) : json(nullptr);
    h["retained"] = v.retained;
    hyps.push_back(std::move(h));
  }
  json curve = json::array();
  for (const auto& p : r.clusters.curve) curve.push_back(json{{"m", p.m}, {"score", p.score}});
  j = json{{"neuron", r.neuron_id},
           {"discriminative", r.discriminative},
           {"stats", r.stats},
           {"patch_ids", r.patch_ids},
           {"m", r.clusters.assignment.m},
           {"labels", r.clusters.assignment.labels},
           {"silhouette_curve", curve},
           {"hypotheses", hyps},
           {"verification", r.records},
           {"retained_concepts", r.retained_concepts},
           {"primary_concept", r.primary_concept ? json(*r.primary_concept) : json(nullptr)}};
}

void to_json(json& j, const PipelineReport& r) {
  j = json{{"verified", r.verified},
           {"initial_mean_ar", r.initial_mean ? json(*r.initial_mean) : json(nullptr)},
           {"retained_mean_ar", r.retained_mean ? json(*r.retained_mean) : json(nullptr)},
           {"neurons", r.neurons}};
}

template <typename T>
std::vector<T> from_jsonl(const std::string& text, const std::string& origin) {
  std::vector<T> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line).get<T>());
    } catch (const json::exception& e) {
      throw FormatError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

template std::vector<SelectionResult> from_jsonl<SelectionResult>(const std::string&, const std::string&);
template std::vector<NeuronClusters> from_jsonl<NeuronClusters>(const std::string&, const std::string&);
template std::vector<Hypothesis> from_jsonl<Hypothesis>(const std::string&, const std::string&);
template std::vector<VerificationRecord> from_jsonl<VerificationRecord>(const std::string&, const std::string&);

std::vector<SelectionResult> read_selection(const std::filesystem::path& path) {
  return from_jsonl<SelectionResult>(read_file(path), path.string());
}

std::vector<NeuronClusters> read_clusters(const std::filesystem::path& path) {
  return from_jsonl<NeuronClusters>(read_file(path), path.string());
}

std::vector<Hypothesis> read_hypotheses(const std::filesystem::path& path) {
  return from_jsonl<Hypothesis>(read_file(path), path.string());
}

std::vector<VerificationRecord> read_verification(const std::filesystem::path& path) {
  return from_jsonl<VerificationRecord>(read_file(path), path.string());
}

GenerationPlan read_plan(const std::filesystem::path& path) {
  try {
    GenerationPlan p = read_json(path).get<GenerationPlan>();
    p.validate();
    return p;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

std::string gen_manifest_json(const GeneratedActivations& g) {
  json j{{"layer_id", g.table.layer_id},
         {"sample_ids", g.table.sample_ids},
         {"entries", g.entries},
         {"deterministic", g.deterministic}};
  return j.dump(2) + "\n";
}

void write_generated(const GeneratedActivations& g, const std::filesystem::path& dir) {
  write_tensor(g.table.tensor, dir / "gen_acts.svt1");
  write_file_atomic(dir / "gen_manifest.json", gen_manifest_json(g));
}

GeneratedActivations read_generated(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "gen_manifest.json";
  const json j = read_json(manifest_path);
  GeneratedActivations g;
  try {
    g.entries = j.at("entries").get<std::vector<GeneratedEntry>>();
    g.deterministic = j.value("deterministic", true);
    g.table = ActivationTable(read_tensor(dir / "gen_acts.svt1"), j.at("sample_ids").get<std::vector<std::string>>(),
                              j.value("layer_id", std::string{}));
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  return g;
}

std::string report_markdown(const PipelineReport& r) {
  std::ostringstream md;
  md << "# Neuron concept report\n\n";
  if (r.initial_mean) md << "Initial mean AR: " << fixed(*r.initial_mean, 4) << "  \n";
  if (r.retained_mean) md << "Retained mean AR: " << fixed(*r.retained_mean, 4) << "  \n";
  md << "\n| neuron | ratio | cluster | concept | score | AR | verdict |\n";
  md << "|---:|---:|---:|---|---:|---:|---|\n";
  for (const auto& n : r.neurons) {
    if (n.hypotheses.empty()) continue;
    const std::string ratio = std::isinf(n.stats.ratio) ? "inf" : fixed(n.stats.ratio, 2);
    for (const auto& v : n.hypotheses) {
      std::string verdict = v.retained ? "kept" : "discarded";
      if (!r.verified) verdict = "unverified";
      if (v.hypothesis.duplicate) verdict += " (dup)";
      md << "| " << n.neuron_id << " | " << ratio << " | " << v.hypothesis.cluster_index << " | "
         << v.hypothesis.concept_text << " | " << fixed(v.hypothesis.score, 4) << " | "
         << (v.activation_rate ? fixed(*v.activation_rate, 2) : std::string("-")) << " | " << verdict << " |\n";
    }
  }
  return md.str();
}

}  // namespace sieve
