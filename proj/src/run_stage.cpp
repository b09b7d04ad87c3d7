#include "sieve/run_stage.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <ctime>
#include <algorithm>
#include <set>
#include <ostream>

#include "sieve/errors.hpp"
#include "sieve/pipeline.hpp"
#include "sieve/records_json.hpp"

namespace sieve {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path resolve(const StageContext& ctx, const std::string& role) {
  const auto it = ctx.config.paths.find(role);
  const fs::path p = it != ctx.config.paths.end() ? fs::path(it->second) : fs::path(default_input_paths().at(role));
  return p.is_absolute() ? p : ctx.run_dir / p;
}

fs::path svt1(const fs::path& base) { return fs::path(base.string() + ".svt1"); }

void require(const fs::path& path, Stage needed_by, const char* producer) {
  if (!fs::exists(path)) {
    throw StageOrderError(std::string(stage_name(needed_by)) + " needs " + path.string() + "; run '" + producer +
                          "' first");
  }
}

// Collects a stage's outputs in a hidden sibling directory and swaps it in on commit.
class StagedDir {
 public:
  StagedDir(const fs::path& run_dir, std::string_view name)
      : final_(run_dir / name), tmp_(run_dir / ("." + std::string(name) + ".tmp")) {
    fs::remove_all(tmp_);
    fs::create_directories(tmp_);
  }
  ~StagedDir() {
    std::error_code ec;
    if (!committed_) fs::remove_all(tmp_, ec);
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;

  fs::path operator/(std::string_view file) const { return tmp_ / file; }
  const fs::path& path() const { return tmp_; }

  void commit() {
    std::error_code ec;
    fs::remove_all(final_, ec);
    if (ec) throw IoError("cannot replace " + final_.string() + ": " + ec.message());
    fs::rename(tmp_, final_, ec);
    if (ec) throw IoError("cannot move " + tmp_.string() + " into place: " + ec.message());
    committed_ = true;
  }

 private:
  fs::path final_;
  fs::path tmp_;
  bool committed_ = false;
};

void finish_stage(StagedDir& dir, Stage stage, const StageContext& ctx, std::map<std::string, std::string> inputs) {
  RunManifest m;
  m.stage = stage;
  m.inputs = std::move(inputs);
  m.config_digest = config_digest(ctx.config);
  m.created_at = utc_now();
  m.check_inputs_exist();
  write_manifest(m, dir / "manifest.json");
  write_file_atomic(dir / "config.json", config_to_json(ctx.config) + "\n");
  dir.commit();
}

ActivationTable load_probe(const StageContext& ctx) { return load_activation_table(resolve(ctx, "activations")); }

void check_alignment(const AlignmentReport& report) {
  for (const auto& p : report.pairs) {
    if (p.ids_match) continue;
    std::string msg = p.first_role + " and " + p.second_role + " are misaligned";
    const auto& missing = p.missing_in_second.empty() ? p.missing_in_first : p.missing_in_second;
    if (!missing.empty()) msg += " (e.g. id '" + missing.front() + "')";
    throw ValidationError(msg);
  }
}

void stage_select(const StageContext& ctx, std::ostream& log) {
  const auto acts_base = resolve(ctx, "activations");
  const auto maps_base = resolve(ctx, "maps");
  const ActivationTable acts = load_activation_table(acts_base);
  std::optional<ActivationMapStack> maps;
  if (fs::exists(svt1(maps_base))) {
    maps = load_map_stack(maps_base);
    check_alignment(AlignmentReport{{compare_ids(acts.sample_ids, maps->sample_ids, "activations", "maps")}});
  }

  const auto selection = run_select(acts, maps ? &*maps : nullptr, ctx.config.selection, ctx.jobs);
  StagedDir out(ctx.run_dir, "select");
  write_file_atomic(out / "selection.jsonl", to_jsonl(selection));

  std::map<std::string, std::string> inputs{{"activations", svt1(acts_base).string()}};
  if (maps) inputs["maps"] = svt1(maps_base).string();
  finish_stage(out, Stage::select, ctx, inputs);

  const auto kept = std::count_if(selection.begin(), selection.end(), [](const auto& s) { return s.discriminative; });
  log << "select: " << kept << " of " << selection.size() << " neurons discriminative (beta "
      << ctx.config.selection.beta << ")\n";
}

void stage_hypothesize(const StageContext& ctx, std::ostream& log) {
  const fs::path selection_path = ctx.run_dir / "select" / "selection.jsonl";
  require(selection_path, Stage::hypothesize, "sieve select");
  const auto selection = read_selection(selection_path);

  const auto patch_base = resolve(ctx, "patch_embeddings");
  const auto concept_base = resolve(ctx, "concept_embeddings");
  const auto concepts_path = resolve(ctx, "concepts");
  const EmbeddingTable patches = load_embedding_table(patch_base);
  const EmbeddingTable concept_embs = load_embedding_table(concept_base);
  const ConceptSet concepts = load_concept_set(concepts_path);

  const ActivationTable acts = load_probe(ctx);
  IdPairStatus emb;
  emb.first_role = "activations";
  emb.second_role = "patch embeddings";
  const std::set<std::string_view> known(acts.sample_ids.begin(), acts.sample_ids.end());
  for (const auto& id : patches.item_ids) {
    if (!known.contains(patch_sample_id(id))) emb.missing_in_first.push_back(id);
  }
  emb.ids_match = emb.missing_in_first.empty();
  check_alignment(AlignmentReport{{emb}});

  const auto hyp = run_hypothesize(selection, patches, concepts, concept_embs, ctx.config, ctx.jobs);
  const GenerationPlan plan = plan_for(hyp, ctx.config);

  StagedDir out(ctx.run_dir, "hypothesize");
  write_file_atomic(out / "clusters.jsonl", to_jsonl(hyp.clusters));
  write_file_atomic(out / "hypotheses.jsonl", to_jsonl(hyp.hypotheses));
  write_file_atomic(out / "genplan.json", json(plan).dump(2) + "\n");
  finish_stage(out, Stage::hypothesize, ctx,
               {{"selection", selection_path.string()},
                {"patch_embeddings", svt1(patch_base).string()},
                {"concept_embeddings", svt1(concept_base).string()},
                {"concepts", concepts_path.string()}});

  log << "hypothesize: " << hyp.hypotheses.size() << " hypotheses over " << hyp.clusters.size()
      << " neurons; plan has " << plan.entries.size() << " entries\n";
}

// Fulfills the plan from the synthetic world when no adapter output exists.
void ensure_generated(const StageContext& ctx, const GenerationPlan& plan, std::ostream& log) {
  const fs::path gen_dir = ctx.run_dir / "generate";
  const fs::path world_spec = ctx.run_dir / "inputs" / "world_spec.json";
  const std::string plan_text = json(plan).dump(2) + "\n";
  if (fs::exists(gen_dir / "gen_manifest.json")) {
    // A synthesized batch is only reusable for the exact plan it was made for.
    const bool synthesized = fs::exists(gen_dir / "genplan.json");
    if (!synthesized || read_file(gen_dir / "genplan.json") == plan_text) return;
  }
  if (!fs::exists(world_spec)) {
    throw StageOrderError("verify needs " + (gen_dir / "gen_manifest.json").string() +
                          "; fulfill hypothesize/genplan.json with the generation adapter first");
  }
  const SyntheticWorld world = generate_world(world_spec_from_json(read_file(world_spec)));
  const GeneratedActivations generated = synth_generate_images(plan, world);
  StagedDir out(ctx.run_dir, "generate");
  write_generated(generated, out.path());
  write_file_atomic(out / "genplan.json", plan_text);
  out.commit();
  log << "generate: synthesized " << generated.table.n_samples() << " images for " << plan.entries.size()
      << " plan entries\n";
}

void stage_verify(const StageContext& ctx, std::ostream& log) {
  const fs::path plan_path = ctx.run_dir / "hypothesize" / "genplan.json";
  require(plan_path, Stage::verify, "sieve hypothesize");
  if (!ctx.config.verify) {
    log << "verify: disabled by config; nothing to do\n";
    return;
  }
  const GenerationPlan plan = read_plan(plan_path);

  VerifyOutput verified;
  if (!plan.entries.empty()) {
    ensure_generated(ctx, plan, log);
    const GeneratedActivations generated = read_generated(ctx.run_dir / "generate");
    verified = run_verify(plan, generated, load_probe(ctx));
  }

  StagedDir out(ctx.run_dir, "verify");
  write_file_atomic(out / "verification.jsonl", to_jsonl(verified.records));
  json summary{{"initial_mean_ar", verified.initial_mean ? json(*verified.initial_mean) : json(nullptr)},
               {"retained_mean_ar", verified.retained_mean ? json(*verified.retained_mean) : json(nullptr)},
               {"n_records", verified.records.size()}};
  write_file_atomic(out / "summary.json", summary.dump(2) + "\n");
  std::map<std::string, std::string> inputs{{"plan", plan_path.string()}, {"activations", svt1(resolve(ctx, "activations")).string()}};
  if (!plan.entries.empty()) inputs["gen_acts"] = (ctx.run_dir / "generate" / "gen_acts.svt1").string();
  finish_stage(out, Stage::verify, ctx, inputs);

  const auto kept = std::count_if(verified.records.begin(), verified.records.end(), [](const auto& r) { return r.retained; });
  log << "verify: " << kept << " of " << verified.records.size() << " hypotheses retained";
  if (verified.initial_mean) {
    log << " (mean AR " << *verified.initial_mean << " -> " << *verified.retained_mean << ")";
  }
  log << "\n";
}

void stage_report(const StageContext& ctx, std::ostream& log) {
  const fs::path selection_path = ctx.run_dir / "select" / "selection.jsonl";
  const fs::path clusters_path = ctx.run_dir / "hypothesize" / "clusters.jsonl";
  const fs::path hyps_path = ctx.run_dir / "hypothesize" / "hypotheses.jsonl";
  const fs::path records_path = ctx.run_dir / "verify" / "verification.jsonl";
  const fs::path summary_path = ctx.run_dir / "verify" / "summary.json";
  require(selection_path, Stage::report, "sieve select");
  require(hyps_path, Stage::report, "sieve hypothesize");

  const auto selection = read_selection(selection_path);
  HypothesizeOutput hyp;
  hyp.clusters = read_clusters(clusters_path);
  hyp.hypotheses = read_hypotheses(hyps_path);

  std::map<std::string, std::string> inputs{{"selection", selection_path.string()},
                                            {"clusters", clusters_path.string()},
                                            {"hypotheses", hyps_path.string()}};
  PipelineReport report;
  if (ctx.config.verify) {
    require(records_path, Stage::report, "sieve verify");
    VerifyOutput verified;
    verified.records = read_verification(records_path);
    const json summary = json::parse(read_file(summary_path));
    if (!summary.at("initial_mean_ar").is_null()) verified.initial_mean = summary.at("initial_mean_ar").get<double>();
    if (!summary.at("retained_mean_ar").is_null()) verified.retained_mean = summary.at("retained_mean_ar").get<double>();
    report = build_report(selection, hyp, &verified);
    inputs["verification"] = records_path.string();
  } else {
    report = build_report(selection, hyp, nullptr);
  }

  StagedDir out(ctx.run_dir, "report");
  write_file_atomic(out / "report.json", json(report).dump(2) + "\n");
  write_file_atomic(out / "summary.md", report_markdown(report));
  finish_stage(out, Stage::report, ctx, inputs);

  std::size_t labelled = 0;
  for (const auto& n : report.neurons) labelled += n.primary_concept ? 1 : 0;
  log << "report: " << labelled << " neurons labelled; see " << (ctx.run_dir / "report" / "summary.md").string()
      << "\n";
}

}  // namespace

ExitCode exit_code_for(const std::exception& e) {
  if (dynamic_cast<const StageOrderError*>(&e)) return ExitCode::stage_order;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) return ExitCode::io;
  return ExitCode::validation;
}

RunLock::RunLock(const fs::path& run_dir) : path_(run_dir / ".lock") {
  std::error_code ec;
  fs::create_directories(run_dir, ec);
  if (ec) throw IoError("cannot create run directory " + run_dir.string() + ": " + ec.message());
  const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd < 0) {
    if (errno == EEXIST) throw IoError("run directory is locked by another stage: " + path_.string());
    throw IoError("cannot create lock " + path_.string() + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  [[maybe_unused]] const auto written = ::write(fd, pid.data(), pid.size());
  ::close(fd);
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

void run_stage(Stage stage, const StageContext& ctx, std::ostream& log) {
  ctx.config.validate();
  RunLock lock(ctx.run_dir);
  switch (stage) {
    case Stage::select: stage_select(ctx, log); break;
    case Stage::hypothesize: stage_hypothesize(ctx, log); break;
    case Stage::verify: stage_verify(ctx, log); break;
    case Stage::report: stage_report(ctx, log); break;
  }
}

void run_all(const StageContext& ctx, std::ostream& log) {
  for (Stage s : {Stage::select, Stage::hypothesize, Stage::verify, Stage::report}) run_stage(s, ctx, log);
}

void write_synthetic_run(const SyntheticWorld& world, const fs::path& run_dir) {
  const fs::path in = run_dir / "inputs";
  save_activation_table(world.activations, in / "activations");
  save_map_stack(world.maps, in / "maps");
  save_embedding_table(world.patch_embs, in / "patch_embs");
  save_embedding_table(world.concept_embs, in / "concept_embs");
  save_concept_set(world.concepts, in / "concepts.json");
  write_file_atomic(in / "world_spec.json", world_spec_to_json(world.spec));

  json planted = json::array();
  for (const auto& [neuron, concept_text] : world.truth.planted) {
    planted.push_back(json{{"neuron", neuron}, {"concept", concept_text}});
  }
  write_file_atomic(in / "ground_truth.json",
                    json{{"planted", planted}, {"distractors", world.truth.distractors}}.dump(2) + "\n");
}

}  // namespace sieve
