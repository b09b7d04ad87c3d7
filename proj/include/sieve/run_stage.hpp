#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "sieve/config.hpp"
#include "sieve/synth.hpp"
#include "sieve/tensor_store.hpp"

namespace sieve {

// Run directory layout:
//   inputs/        activations, maps, patch and concept embeddings, concepts.json
//                  (plus world_spec.json and ground_truth.json for synthetic worlds)
//   select/        selection.jsonl
//   hypothesize/   clusters.jsonl, hypotheses.jsonl, genplan.json
//   generate/      gen_acts.svt1, gen_manifest.json (written by the adapter, or synthesized)
//   verify/        verification.jsonl, summary.json
//   report/        report.json, summary.md
// Every stage directory also holds manifest.json and the resolved config.json.

enum class ExitCode : int { ok = 0, usage = 1, stage_order = 2, validation = 3, io = 4 };

/// Maps an in-flight exception to the documented exit code.
ExitCode exit_code_for(const std::exception& e);

struct StageContext {
  std::filesystem::path run_dir;
  PipelineConfig config;
  std::size_t jobs = 1;
};

/// Runs one stage under the run-directory lock. Outputs are staged in a
/// temporary directory and renamed into place. Human-readable progress goes to `log`.
void run_stage(Stage stage, const StageContext& ctx, std::ostream& log);

/// All stages in order, fulfilling the generation plan synthetically when the
/// run directory holds a synthetic world.
void run_all(const StageContext& ctx, std::ostream& log);

/// Writes a synthetic world into `run_dir/inputs`.
void write_synthetic_run(const SyntheticWorld& world, const std::filesystem::path& run_dir);

/// Run-directory lock held for the lifetime of the object.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace sieve
