// sieve: stage-oriented front end for the neuron concept pipeline.
//
//   sieve synth --spec world.json --out runs/demo
//   sieve run --run-dir runs/demo
//   sieve select|hypothesize|verify|report --run-dir runs/demo [--config cfg.json] [overrides]
//
// Exit codes: 0 ok, 1 usage, 2 stage order, 3 validation, 4 I/O.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "sieve/errors.hpp"
#include "sieve/run_stage.hpp"
#include "sieve/synth.hpp"

namespace {

struct Overrides {
  std::string config_path;
  std::optional<double> beta;
  std::optional<std::size_t> top_k;
  std::optional<std::string> concepts;
  std::optional<std::size_t> n_images;
  std::optional<std::uint64_t> seed;
  bool no_verify = false;
};

sieve::PipelineConfig resolve_config(const Overrides& o) {
  sieve::PipelineConfig cfg;
  if (!o.config_path.empty()) cfg = sieve::config_from_json(sieve::read_file(o.config_path));
  if (o.beta) cfg.selection.beta = *o.beta;
  if (o.top_k) cfg.selection.top_k_samples = *o.top_k;
  if (o.concepts) cfg.paths["concepts"] = *o.concepts;
  if (o.n_images) cfg.n_images = *o.n_images;
  if (o.seed) cfg.seed = *o.seed;
  if (o.no_verify) cfg.verify = false;
  cfg.validate();
  return cfg;
}

void add_pipeline_flags(CLI::App* cmd, Overrides& o, std::string& run_dir, std::size_t& jobs) {
  cmd->add_option("--run-dir", run_dir, "Run directory")->required();
  cmd->add_option("--config", o.config_path, "Pipeline config JSON")->check(CLI::ExistingFile);
  cmd->add_option("--jobs", jobs, "Neuron-level worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--beta", o.beta, "Discriminativeness threshold on p99/median");
  cmd->add_option("--top-k", o.top_k, "High-activation samples kept per neuron");
  cmd->add_option("--concepts", o.concepts, "Concept set JSON");
  cmd->add_option("--n-images", o.n_images, "Generated images per hypothesis");
  cmd->add_option("--seed", o.seed, "Base seed for generation");
  cmd->add_flag("--no-verify", o.no_verify, "Skip verification and keep every hypothesis");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Select, hypothesize and verify concepts for individual neurons"};
  app.require_subcommand(1);

  Overrides o;
  std::string run_dir;
  std::size_t jobs = 1;

  std::vector<std::pair<CLI::App*, sieve::Stage>> stage_cmds;
  for (sieve::Stage s : {sieve::Stage::select, sieve::Stage::hypothesize, sieve::Stage::verify, sieve::Stage::report}) {
    auto* cmd = app.add_subcommand(std::string(sieve::stage_name(s)), "Run the " + std::string(sieve::stage_name(s)) + " stage");
    add_pipeline_flags(cmd, o, run_dir, jobs);
    stage_cmds.emplace_back(cmd, s);
  }
  auto* run_cmd = app.add_subcommand("run", "Run every stage in order");
  add_pipeline_flags(run_cmd, o, run_dir, jobs);

  std::string spec_path, out_dir;
  std::optional<std::uint64_t> world_seed;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic world with planted ground truth");
  synth_cmd->add_option("--spec", spec_path, "World spec JSON (defaults when omitted)")->check(CLI::ExistingFile);
  synth_cmd->add_option("--out", out_dir, "Run directory to create")->required();
  synth_cmd->add_option("--seed", world_seed, "Override the world seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(sieve::ExitCode::usage);
  }

  try {
    if (*synth_cmd) {
      sieve::SyntheticWorldSpec spec;
      if (!spec_path.empty()) spec = sieve::world_spec_from_json(sieve::read_file(spec_path));
      if (world_seed) spec.seed = *world_seed;
      const auto world = sieve::generate_world(spec);
      sieve::write_synthetic_run(world, out_dir);
      std::cout << "synth: " << world.activations.n_samples() << " samples, " << world.n_neurons() << " neurons, "
                << world.concepts.size() << " concepts -> " << out_dir << "\n";
      return 0;
    }

    const sieve::StageContext ctx{run_dir, resolve_config(o), jobs};
    if (*run_cmd) {
      sieve::run_all(ctx, std::cout);
      return 0;
    }
    for (const auto& [cmd, stage] : stage_cmds) {
      if (*cmd) sieve::run_stage(stage, ctx, std::cout);
    }
    return 0;
  } catch (const std::exception& e) {
    const auto code = sieve::exit_code_for(e);
    std::cerr << "sieve: " << e.what() << "\n";
    return static_cast<int>(code);
  }
}
