// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "sieve/clustering.hpp"
#include "sieve/config.hpp"
#include "sieve/hypothesis.hpp"
#include "sieve/pipeline.hpp"
#include "sieve/selection.hpp"
#include "sieve/synth.hpp"
#include "sieve/verification.hpp"

using namespace sieve;
namespace fs = std::filesystem;

namespace {

constexpr double kQuantileBudgetS = 5.0;
constexpr double kWardBudgetS = 30.0;
constexpr double kSyntheticBudgetS = 60.0;
constexpr double kWardCostRelTol = 1e-9;
constexpr double kSilhouetteTol = 1e-9;
constexpr double kScoreTol = 1e-9;
constexpr double kMinInclusion = 0.95;
constexpr double kMinDistractorExclusion = 0.90;
constexpr double kMinMatchedAr = 0.90;
constexpr double kMaxMismatchedAr = 0.05;

int failures = 0;

void report(int id, const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s [%d] %s: %s\n", ok ? "PASS" : "FAIL", id, name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

void quantile_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> len(1, 1000);
  std::normal_distribution<double> nd(0.0, 10.0);
  std::size_t mismatches = 0, checks = 0;
  for (int iter = 0; iter < 1000; ++iter) {
    std::vector<double> v(len(rng));
    for (auto& x : v) x = iter % 4 == 0 ? std::round(nd(rng)) : nd(rng);  // rounded arrays carry ties
    for (double q : {0.0, 0.25, 0.5, 0.99, 1.0}) {
      ++checks;
      if (quantile(v, q) != oracle::sorted_reference_quantile(v, q)) ++mismatches;
    }
  }
  const double t = seconds_since(t0);
  report(1, "quantile oracle", mismatches == 0 && t < kQuantileBudgetS,
         fmt("%.0f/%.0f exact matches in %.3f s (budget %.0f s)", static_cast<double>(checks - mismatches),
             static_cast<double>(checks), t, kQuantileBudgetS));
}

void ward_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1002);
  std::size_t bad = 0, steps = 0;
  for (int iter = 0; iter < 100; ++iter) {
    const std::size_t n = 2 + rng() % 63;
    const std::size_t dim = 1 + rng() % 8;
    const auto pts = iter % 3 == 0 ? oracle::grid_points(rng, n, dim, 2) : oracle::random_points(rng, n, dim);
    const auto got = ward_agglomerate(fixture::distances_from(pts), 1).merge_trace;
    const auto ref = oracle::naive_ward(pts, 1, kWardTieTolerance);
    bool ok = got.size() == ref.size();
    for (std::size_t s = 0; ok && s < ref.size(); ++s) {
      ok = got[s].a == ref[s].a && got[s].b == ref[s].b &&
           std::abs(got[s].cost - ref[s].cost) <= kWardCostRelTol * std::max(1.0, std::abs(ref[s].cost));
    }
    steps += ref.size();
    if (!ok) ++bad;
  }
  const double t = seconds_since(t0);
  report(2, "Ward oracle", bad == 0 && t < kWardBudgetS,
         fmt("%.0f/100 merge traces identical (%.0f merges) in %.3f s (budget %.0f s)", 100.0 - static_cast<double>(bad),
             static_cast<double>(steps), t, kWardBudgetS));
}

void silhouette_oracle() {
  std::mt19937_64 rng(1003);
  double worst = 0.0;
  for (int iter = 0; iter < 100; ++iter) {
    const std::size_t n = 3 + rng() % 48;
    const std::size_t m = 2 + rng() % std::min<std::size_t>(n - 1, 8);
    const auto pts = oracle::random_points(rng, n, 1 + rng() % 6);
    ClusterAssignment a;
    a.m = m;
    for (std::size_t i = 0; i < n; ++i) a.labels.push_back(i < m ? i : rng() % m);
    std::shuffle(a.labels.begin(), a.labels.end(), rng);
    const double diff =
        std::abs(silhouette(fixture::distances_from(pts), a) - oracle::textbook_silhouette(pts, a.labels, m));
    worst = std::max(worst, diff);
  }
  report(3, "silhouette oracle", worst <= kSilhouetteTol,
         fmt("max |diff| %.3g over 100 instances (tol %.0e)", worst, kSilhouetteTol));
}

void scoring_oracle() {
  std::mt19937_64 rng(1004);
  double worst = 0.0;
  std::size_t topk_bad = 0;
  const int instances = 100;
  for (int iter = 0; iter < instances; ++iter) {
    const std::size_t np = 1 + rng() % 50, nc = 1 + rng() % 200, dim = 2 + rng() % 32;
    const std::size_t k = 1 + rng() % std::min<std::size_t>(nc, 5);
    auto patches = fixture::as_float(oracle::random_points(rng, np, dim));
    auto cvecs = fixture::as_float(oracle::random_points(rng, nc, dim));
    if (iter % 5 == 0 && nc > 1) cvecs[nc - 1] = cvecs[0];  // exact score tie
    std::vector<std::string> names;
    for (std::size_t i = 0; i < nc; ++i) names.push_back("c" + std::to_string(i));
    const ConceptSet concepts(names, "acceptance");
    const auto row = cluster_concept_scores(fixture::table_from(patches, "s", "p"), concepts,
                                            fixture::table_from(cvecs, "s", "c"));
    const auto ref = oracle::naive_concept_scores(patches, cvecs);
    for (std::size_t q = 0; q < nc; ++q) worst = std::max(worst, std::abs(row.scores[q] - ref[q]));
    const auto top = top_k_concepts(row, concepts, k);
    const auto ref_top = oracle::naive_top_k(ref, k);
    for (std::size_t i = 0; i < k; ++i)
      if (top[i].concept_index != ref_top[i]) {
        ++topk_bad;
        break;
      }
  }
  report(4, "scoring and top-K oracle", worst <= kScoreTol && topk_bad == 0,
         fmt("max score |diff| %.3g (tol %.0e), top-K mismatches %.0f/%.0f", worst, kScoreTol,
             static_cast<double>(topk_bad), instances));
}

void filter_law() {
  std::mt19937_64 rng(1005);
  std::size_t violations = 0;
  for (int iter = 0; iter < 10000; ++iter) {
    std::vector<VerificationRecord> rs(1 + rng() % 40);
    const int mode = iter % 4;
    const double c = static_cast<double>(rng() % 11) / 10.0;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& r : rs) {
      if (mode == 0)
        r.activation_rate = c;
      else if (mode == 1)
        r.activation_rate = u(rng);
      else
        r.activation_rate = static_cast<double>(rng() % 11) / 10.0;
    }
    bool all_equal = true;
    for (const auto& r : rs) all_equal = all_equal && r.activation_rate == rs[0].activation_rate;
    const auto out = filter_by_initial_mean(rs);
    const bool ok = !out.retained.empty() && out.retained_mean >= out.initial_mean &&
                    ((out.retained_mean == out.initial_mean) == all_equal);
    if (!ok) ++violations;
  }
  report(5, "filter law", violations == 0, fmt("%.0f violations over 10000 multisets", static_cast<double>(violations)));
}

RecoveryMetrics run_synthetic(const SyntheticWorldSpec& spec, bool verify) {
  const auto world = generate_world(spec);
  PipelineConfig cfg;
  cfg.selection.beta = 10.0;
  cfg.top_concepts = 2;
  cfg.n_images = 10;
  cfg.verify = verify;
  const PipelineInputs in{world.activations, &world.maps, world.patch_embs, world.concepts, world.concept_embs};
  const auto rep =
      run_pipeline(in, cfg, [&](const GenerationPlan& p) { return synth_generate_images(p, world); }, 4);
  return planted_recovery_check(rep.neurons, world.truth);
}

void synthetic_recovery() {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticWorldSpec spec;
  spec.n_planted_neurons = 64;
  spec.n_distractor_neurons = 16;
  spec.n_concepts = 40;
  spec.embed_dim = 64;
  spec.noise_sigma = 0.1;
  const auto m = run_synthetic(spec, true);
  const double t = seconds_since(t0);
  const double matched = m.mean_ar_planted_correct.value_or(0.0);
  const double mismatched = m.mean_ar_mismatched.value_or(1.0);
  const bool ok = m.inclusion_recovery >= kMinInclusion && m.distractor_exclusion >= kMinDistractorExclusion &&
                  matched >= kMinMatchedAr && mismatched <= kMaxMismatchedAr && t < kSyntheticBudgetS;
  std::ostringstream d;
  d << fmt("inclusion %.3f (>= %.2f), distractor exclusion %.3f (>= %.2f), ", m.inclusion_recovery, kMinInclusion,
           m.distractor_exclusion, kMinDistractorExclusion)
    << fmt("mean AR matched %.3f (>= %.2f) mismatched %.3f (<= %.2f), ", matched, kMinMatchedAr, mismatched,
           kMaxMismatchedAr)
    << fmt("%.2f s (budget %.0f s)", t, kSyntheticBudgetS);
  report(6, "synthetic recovery", ok, d.str());
}

void ablation_echo() {
  std::size_t wins = 0;
  double sum_on = 0.0, sum_off = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticWorldSpec spec;
    spec.confusable_decoys = true;
    spec.seed = seed;
    const double on = run_synthetic(spec, true).primary_recovery;
    const double off = run_synthetic(spec, false).primary_recovery;
    sum_on += on;
    sum_off += off;
    if (off < on) ++wins;
  }
  report(7, "ablation echo", wins == 10,
         fmt("verify beats no-verify on %.0f/10 seeds; mean primary recovery %.3f with vs %.3f without",
             static_cast<double>(wins), sum_on / 10, sum_off / 10));
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SIEVE_BINARY) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void determinism() {
  fixture::TempDir dir;
  std::string bytes[2];
  bool ran = true;
  for (int i = 0; i < 2; ++i) {
    const auto run = (dir / ("run" + std::to_string(i))).string();
    ran = ran && run_cli("synth --out " + run + " --seed 7") == 0 && run_cli("run --run-dir " + run + " --jobs 4") == 0;
    if (ran) bytes[i] = read_file(fs::path(run) / "report" / "report.json");
  }
  const bool ok = ran && !bytes[0].empty() && bytes[0] == bytes[1];
  report(8, "determinism", ok,
         ran ? fmt("two runs, report.json %.0f vs %.0f bytes, %s", static_cast<double>(bytes[0].size()),
                   static_cast<double>(bytes[1].size())) +
                   (bytes[0] == bytes[1] ? "identical" : "different")
             : std::string("sieve CLI failed"));
}

}  // namespace

int main() {
  quantile_oracle();
  ward_oracle();
  silhouette_oracle();
  scoring_oracle();
  filter_law();
  synthetic_recovery();
  ablation_echo();
  determinism();
  std::printf("%s: %d criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
