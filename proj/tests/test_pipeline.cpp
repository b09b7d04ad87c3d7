#include <doctest.h>

#include <sys/wait.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "fixtures.hpp"
#include "sieve/config.hpp"
#include "sieve/errors.hpp"
#include "sieve/pipeline.hpp"
#include "sieve/records_json.hpp"
#include "sieve/run_stage.hpp"
#include "sieve/synth.hpp"

using namespace sieve;
namespace fs = std::filesystem;

namespace {

struct Cli {
  int code;
  std::string out;
  std::string err;
};

Cli sieve_cli(const std::string& args, const fixture::TempDir& scratch) {
  const auto out = scratch / "stdout.txt";
  const auto err = scratch / "stderr.txt";
  const std::string cmd = std::string(SIEVE_BINARY) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

void write_small_world(const fs::path& run_dir) {
  SyntheticWorldSpec s;
  s.n_concepts = 8;
  s.n_planted_neurons = 8;
  s.n_distractor_neurons = 3;
  s.samples_per_concept = 5;
  write_synthetic_run(generate_world(s), run_dir);
}

}  // namespace

TEST_CASE("config JSON") {
  const auto c = config_from_json(R"({"beta": 4, "K": 3, "verify": false, "paths": {"concepts": "x.json"}})");
  CHECK(c.selection.beta == 4.0);
  CHECK(c.top_concepts == 3);
  CHECK_FALSE(c.verify);
  CHECK(c.paths.at("concepts") == "x.json");
  CHECK_FALSE(c.paths.contains("activations"));
  CHECK(default_input_paths().contains("activations"));

  CHECK(config_from_json(config_to_json(c)).top_concepts == 3);
  CHECK(config_digest(c) == config_digest(config_from_json(config_to_json(c))));
  CHECK(config_digest(c) != config_digest(PipelineConfig{}));

  CHECK_THROWS_AS(config_from_json(R"({"betta": 4})"), ValidationError);
  CHECK_THROWS_AS(config_from_json(R"({"K": 0})"), ValidationError);
  CHECK_THROWS_AS(config_from_json(R"({"n_images": 0})"), ValidationError);
  CHECK_THROWS_AS(config_from_json("{"), ValidationError);

  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("parallel_for") {
  std::vector<int> hit(1000, 0);
  parallel_for(hit.size(), 4, [&](std::size_t i) { hit[i] += 1; });
  CHECK(std::count(hit.begin(), hit.end(), 1) == 1000);

  std::atomic<int> ran{0};
  CHECK_THROWS_AS(parallel_for(100, 3,
                               [&](std::size_t i) {
                                 ++ran;
                                 if (i == 17) throw RangeError("boom");
                               }),
                  RangeError);
  parallel_for(0, 4, [&](std::size_t) { FAIL("no work expected"); });
}

TEST_CASE("records survive a JSON round trip") {
  SelectionResult s;
  s.neuron_id = 4;
  s.discriminative = true;
  s.stats = {4, 0.0, 2.5, std::numeric_limits<double>::infinity(), 100};
  s.selected_rows = {3, 1};
  s.selected_sample_ids = {"a", "b"};
  s.crop_rects = {CropRect{0.25, 0, 0.75, 1}, CropRect{}};
  const auto text = to_jsonl(std::vector<SelectionResult>{s, s});
  CHECK(nlohmann::json::parse(text.substr(0, text.find('\n')))["stats"]["ratio"] == "inf");
  const auto back = from_jsonl<SelectionResult>(text, "t");
  REQUIRE(back.size() == 2);
  CHECK(std::isinf(back[0].stats.ratio));
  CHECK(back[0].crop_rects == s.crop_rects);
  CHECK(back[1].selected_sample_ids == s.selected_sample_ids);

  Hypothesis h{1, 2, "dog", 3, 0.5, true};
  CHECK(from_jsonl<Hypothesis>(to_jsonl(std::vector<Hypothesis>{h}), "t")[0] == h);

  CHECK_THROWS_AS(from_jsonl<Hypothesis>("{\"neuron_id\": 1}\n", "t"), FormatError);
  CHECK_THROWS_AS(from_jsonl<Hypothesis>("nope\n", "t"), FormatError);
}

TEST_CASE("generated activations round trip through the adapter files") {
  fixture::TempDir dir;
  GeneratedActivations g{ActivationTable(DenseTensor({3, 2}, {1, 2, 3, 4, 5, 6}), {"g0", "g1", "g2"}, "l"),
                         {{0, 0, 2, EntryStatus::ok}, {1, 2, 1, EntryStatus::failed}},
                         false};
  write_generated(g, dir.path());
  const auto back = read_generated(dir.path());
  CHECK(back.table.tensor == g.table.tensor);
  CHECK(back.table.sample_ids == g.table.sample_ids);
  REQUIRE(back.entries.size() == 2);
  CHECK(back.entries[1].status == EntryStatus::failed);
  CHECK_FALSE(back.deterministic);
}

TEST_CASE("find_patch_row prefers neuron-specific patches") {
  sieve::DenseTensor t({3, 2}, {1, 0, 0, 1, 1, 1});
  const EmbeddingTable e(t, {"s1", "s1#7", "s2"}, "vl");
  CHECK(find_patch_row(e, "s1", 7) == 1);
  CHECK(find_patch_row(e, "s1", 3) == 0);
  CHECK(find_patch_row(e, "s2", 7) == 2);
  CHECK_THROWS_AS(find_patch_row(e, "s9", 0), KeyError);
}

TEST_CASE("report without verification keeps every hypothesis") {
  SyntheticWorldSpec spec;
  spec.n_concepts = 6;
  spec.n_planted_neurons = 6;
  spec.n_distractor_neurons = 2;
  spec.samples_per_concept = 5;
  const auto w = generate_world(spec);
  PipelineConfig cfg;
  cfg.verify = false;
  const PipelineInputs in{w.activations, &w.maps, w.patch_embs, w.concepts, w.concept_embs};
  const auto r = run_pipeline(in, cfg, nullptr);
  CHECK_FALSE(r.verified);
  CHECK(r.neurons.size() == 8);
  for (const auto& n : r.neurons)
    for (const auto& h : n.hypotheses) {
      CHECK(h.retained);
      CHECK_FALSE(h.activation_rate.has_value());
    }
  const auto md = report_markdown(r);
  CHECK(md.find("| neuron |") != std::string::npos);
}

TEST_CASE("duplicates inherit the verdict of their primary") {
  SyntheticWorldSpec spec;
  spec.n_concepts = 6;
  spec.n_planted_neurons = 6;
  spec.n_distractor_neurons = 2;
  spec.samples_per_concept = 5;
  const auto w = generate_world(spec);
  const PipelineInputs in{w.activations, &w.maps, w.patch_embs, w.concepts, w.concept_embs};
  PipelineConfig cfg;
  cfg.max_clusters = 10;
  const auto r = run_pipeline(in, cfg, [&](const GenerationPlan& p) { return synth_generate_images(p, w); });
  std::size_t dups = 0;
  for (const auto& n : r.neurons) {
    for (const auto& h : n.hypotheses) {
      if (!h.hypothesis.duplicate) continue;
      ++dups;
      for (const auto& other : n.hypotheses)
        if (!other.hypothesis.duplicate && other.hypothesis.concept_text == h.hypothesis.concept_text) {
          CHECK(h.activation_rate == other.activation_rate);
          CHECK(h.retained == other.retained);
        }
    }
    for (const auto& c : n.retained_concepts) {
      bool hypothesized = false;
      for (const auto& h : n.hypotheses) hypothesized = hypothesized || h.hypothesis.concept_text == c;
      CHECK(hypothesized);
    }
  }
  CHECK(dups > 0);
}

TEST_CASE("run directory stages") {
  fixture::TempDir dir;
  const auto run = dir / "run";
  write_small_world(run);
  StageContext ctx{run, PipelineConfig{}, 2};
  std::ostringstream log;

  CHECK_THROWS_AS(run_stage(Stage::hypothesize, ctx, log), StageOrderError);
  run_stage(Stage::select, ctx, log);
  CHECK(fs::exists(run / "select" / "selection.jsonl"));
  CHECK(fs::exists(run / "select" / "manifest.json"));
  CHECK(read_manifest(run / "select" / "manifest.json").config_digest == config_digest(ctx.config));
  CHECK_THROWS_AS(run_stage(Stage::verify, ctx, log), StageOrderError);
  run_stage(Stage::hypothesize, ctx, log);
  run_stage(Stage::verify, ctx, log);
  run_stage(Stage::report, ctx, log);
  CHECK(fs::exists(run / "report" / "report.json"));
  CHECK(fs::exists(run / "report" / "summary.md"));
  for (const auto& entry : fs::directory_iterator(run))
    CHECK(entry.path().filename().string().find(".tmp") == std::string::npos);
  CHECK_FALSE(fs::exists(run / ".lock"));

  SUBCASE("a held lock blocks other stages") {
    RunLock held(run);
    CHECK_THROWS_AS(run_stage(Stage::select, ctx, log), IoError);
  }
  SUBCASE("missing inputs are an I/O error") {
    fs::remove(run / "inputs" / "concepts.json");
    CHECK_THROWS_AS(run_stage(Stage::hypothesize, ctx, log), IoError);
  }
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(StageOrderError("x")) == ExitCode::stage_order);
  CHECK(exit_code_for(ValidationError("x")) == ExitCode::validation);
  CHECK(exit_code_for(FormatError("x")) == ExitCode::validation);
  CHECK(exit_code_for(IoError("x")) == ExitCode::io);
}

TEST_CASE("sieve CLI") {
  fixture::TempDir dir;
  const auto run = (dir / "run").string();

  CHECK(sieve_cli("", dir).code == 1);
  CHECK(sieve_cli("select", dir).code == 1);
  CHECK(sieve_cli("--help", dir).code == 0);

  const auto synth = sieve_cli("synth --out " + run + " --seed 3", dir);
  REQUIRE(synth.code == 0);
  CHECK(fs::exists(fs::path(run) / "inputs" / "world_spec.json"));

  const auto early = sieve_cli("verify --run-dir " + run, dir);
  CHECK(early.code == 2);
  CHECK_FALSE(early.err.empty());

  CHECK(sieve_cli("select --run-dir " + run + " --beta -1", dir).code == 3);

  REQUIRE(sieve_cli("run --run-dir " + run + " --jobs 3", dir).code == 0);
  const auto first = read_file(fs::path(run) / "report" / "report.json");
  REQUIRE(sieve_cli("run --run-dir " + run, dir).code == 0);
  CHECK(read_file(fs::path(run) / "report" / "report.json") == first);
  CHECK(nlohmann::json::parse(first).contains("neurons"));

  const auto sel = read_file(fs::path(run) / "select" / "selection.jsonl");
  CHECK(std::count(sel.begin(), sel.end(), '\n') == 80);
  CHECK(first.find(synth.out) == std::string::npos);
  CHECK(synth.out.find('{') == std::string::npos);

  const auto staged = sieve_cli("report --run-dir " + run + " --no-verify", dir);
  CHECK(staged.code == 0);
  CHECK(sieve_cli("select --run-dir " + (dir / "missing").string(), dir).code == 4);
}
