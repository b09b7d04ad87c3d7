#include "sieve/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>
#include <set>
#include <unordered_map>

#include <json.hpp>

#include "sieve/errors.hpp"

namespace sieve {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

double unit_open(std::uint64_t bits) { return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53; }

double normal_from_hash(std::uint64_t h) {
  const double u1 = unit_open(h);
  const double u2 = unit_open(splitmix64(h));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Portable normal stream: libstdc++'s normal_distribution is not specified
// bit-for-bit, so worlds would differ across standard libraries.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : rng_(seed) {}

  double next() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = unit_open(rng_());
    const double u2 = unit_open(rng_());
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t bits() { return rng_(); }

 private:
  std::mt19937_64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

std::vector<double> random_unit(NormalStream& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (double& x : v) {
    x = rng.next();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

std::string numbered(const char* prefix, std::size_t i, int width) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
  return buf;
}

void add_noise(std::vector<double>& x, NormalStream& rng, double sigma) {
  if (sigma == 0.0) return;
  const double per_dim = sigma / std::sqrt(static_cast<double>(x.size()));
  for (double& v : x) v += per_dim * rng.next();
}

constexpr std::uint64_t kProbeStream = 0x70726f6265ull;
constexpr std::uint64_t kGenStream = 0x67656eull;
constexpr std::uint64_t kMapStream = 0x6d6170ull;

}  // namespace

void SyntheticWorldSpec::validate() const {
  if (embed_dim < 2) throw ValidationError("embed_dim must be >= 2");
  if (n_concepts < 1 || n_planted_neurons < 1 || n_distractor_neurons < 1 || samples_per_concept < 1) {
    throw ValidationError("world counts must all be >= 1");
  }
  if (!(noise_sigma >= 0.0)) throw ValidationError("noise_sigma must be >= 0");
  if (!(context_strength >= 0.0)) throw ValidationError("context_strength must be >= 0");
  if (!(decoy_alignment > -1.0 && decoy_alignment < 1.0)) throw ValidationError("decoy_alignment must lie in (-1, 1)");
  if (map_size < 1) throw ValidationError("map_size must be >= 1");
}

std::vector<float> SyntheticWorld::respond(std::span<const double> x, std::uint64_t item_key) const {
  const std::size_t dim = spec.embed_dim;
  std::vector<float> out(n_neurons());
  for (std::size_t n = 0; n < out.size(); ++n) {
    if (neuron_concept[n]) {
      const std::span<const double> e(concept_vectors.data() + *neuron_concept[n] * dim, dim);
      out[n] = static_cast<float>(std::max(0.0, dot(x, e) - spec.margin));
    } else {
      const double z = normal_from_hash(hash_combine(hash_combine(spec.seed, item_key), n));
      out[n] = static_cast<float>(std::max(0.0, 1.0 + 0.1 * z));
    }
  }
  return out;
}

SyntheticWorld generate_world(const SyntheticWorldSpec& spec) {
  spec.validate();
  const std::size_t dim = spec.embed_dim;
  const std::size_t n_base = spec.n_concepts;
  NormalStream rng(spec.seed);

  SyntheticWorld w;
  w.spec = spec;

  std::vector<std::string> names;
  std::vector<std::vector<double>> vectors;
  for (std::size_t c = 0; c < n_base; ++c) {
    names.push_back(numbered("concept-", c, 3));
    vectors.push_back(random_unit(rng, dim));
  }
  // Context directions are orthogonal to their concept, so they never move the neuron.
  std::vector<std::vector<double>> context(n_base);
  if (spec.confusable_decoys) {
    for (std::size_t c = 0; c < n_base; ++c) {
      auto u = random_unit(rng, dim);
      const double along = dot(u, vectors[c]);
      double norm = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        u[k] -= along * vectors[c][k];
        norm += u[k] * u[k];
      }
      norm = std::sqrt(norm);
      for (double& v : u) v /= norm;
      context[c] = u;

      const double a = spec.decoy_alignment;
      const double b = std::sqrt(1.0 - a * a);
      std::vector<double> decoy(dim);
      for (std::size_t k = 0; k < dim; ++k) decoy[k] = a * vectors[c][k] + b * u[k];
      names.push_back(names[c] + " context");
      vectors.push_back(std::move(decoy));
    }
  }
  w.concepts = ConceptSet(names, spec.confusable_decoys ? "synthetic-with-decoys" : "synthetic");
  for (const auto& v : vectors) w.concept_vectors.insert(w.concept_vectors.end(), v.begin(), v.end());

  for (std::size_t i = 0; i < spec.n_planted_neurons; ++i) {
    const std::size_t c = i % n_base;
    w.neuron_concept.emplace_back(c);
    w.truth.planted.emplace(i, names[c]);
  }
  for (std::size_t i = 0; i < spec.n_distractor_neurons; ++i) {
    w.truth.distractors.push_back(w.neuron_concept.size());
    w.neuron_concept.emplace_back(std::nullopt);
  }

  // Probe set: every concept is exactly 1% of it when n_concepts <= 100.
  const std::size_t n_concept_samples = n_base * spec.samples_per_concept;
  const std::size_t n_samples = std::max(100 * spec.samples_per_concept, n_concept_samples);
  std::vector<std::optional<std::size_t>> sample_concept(n_samples);
  for (std::size_t s = 0; s < n_concept_samples; ++s) sample_concept[s] = s / spec.samples_per_concept;
  for (std::size_t s = n_samples - 1; s > 0; --s) {
    const std::size_t j = static_cast<std::size_t>(rng.bits() % (s + 1));
    std::swap(sample_concept[s], sample_concept[j]);
  }

  const std::size_t n_neurons = w.n_neurons();
  const std::size_t hw = spec.map_size * spec.map_size;
  std::vector<std::string> sample_ids;
  DenseTensor acts = DenseTensor::zeros({n_samples, n_neurons});
  DenseTensor maps = DenseTensor::zeros({n_samples, n_neurons, spec.map_size, spec.map_size});
  DenseTensor patches = DenseTensor::zeros({n_samples, dim});

  for (std::size_t s = 0; s < n_samples; ++s) {
    sample_ids.push_back(numbered("s", s, 5));
    std::vector<double> x;
    if (sample_concept[s]) {
      const std::size_t c = *sample_concept[s];
      x = vectors[c];
      if (spec.confusable_decoys) {
        for (std::size_t k = 0; k < dim; ++k) x[k] += spec.context_strength * context[c][k];
      }
    } else {
      x = random_unit(rng, dim);
    }
    add_noise(x, rng, spec.noise_sigma);
    for (std::size_t k = 0; k < dim; ++k) patches.data[s * dim + k] = static_cast<float>(x[k]);

    const auto response = w.respond(x, hash_combine(kProbeStream, s));
    for (std::size_t n = 0; n < n_neurons; ++n) {
      const float a = response[n];
      acts.data[s * n_neurons + n] = a;
      float* grid = maps.data.data() + (s * n_neurons + n) * hw;
      const std::size_t peak = hash_combine(hash_combine(spec.seed ^ kMapStream, s), n) % hw;
      for (std::size_t cell = 0; cell < hw; ++cell) grid[cell] = cell == peak ? a : 0.2f * a;
    }
  }

  std::vector<std::size_t> neuron_ids(n_neurons);
  for (std::size_t n = 0; n < n_neurons; ++n) neuron_ids[n] = n;
  w.activations = ActivationTable(std::move(acts), sample_ids, kSynthLayerId);
  w.maps = ActivationMapStack(std::move(maps), std::move(neuron_ids), sample_ids);
  w.patch_embs = EmbeddingTable(std::move(patches), sample_ids, kSynthSpaceId);

  DenseTensor text({w.concepts.size(), dim}, {});
  for (double v : w.concept_vectors) text.data.push_back(static_cast<float>(v));
  w.concept_embs = EmbeddingTable(std::move(text), w.concepts.concepts, kSynthSpaceId);
  return w;
}

GeneratedActivations synth_generate_images(const GenerationPlan& plan, const SyntheticWorld& world) {
  const std::size_t dim = world.spec.embed_dim;
  GeneratedActivations out;
  std::vector<std::string> ids;
  std::vector<float> data;
  for (std::size_t e = 0; e < plan.entries.size(); ++e) {
    const PlanEntry& entry = plan.entries[e];
    const auto c = world.concepts.find(entry.prompt_text);
    if (!c) throw KeyError("concept '" + entry.prompt_text + "' is not part of the synthetic world");
    const std::span<const double> v(world.concept_vectors.data() + *c * dim, dim);

    out.entries.push_back(GeneratedEntry{e, ids.size(), entry.n_images, EntryStatus::ok});
    NormalStream rng(hash_combine(world.spec.seed ^ kGenStream, entry.seed));
    for (std::size_t j = 0; j < entry.n_images; ++j) {
      std::vector<double> x(v.begin(), v.end());
      add_noise(x, rng, world.spec.noise_sigma);
      const auto response = world.respond(x, hash_combine(hash_combine(kGenStream, entry.seed), j));
      data.insert(data.end(), response.begin(), response.end());
      ids.push_back(numbered("g", e, 4) + "-" + numbered("", j, 3));
    }
  }
  const std::size_t rows = ids.size();
  out.table = ActivationTable(DenseTensor({rows, world.n_neurons()}, std::move(data)), std::move(ids), kSynthLayerId);
  return out;
}

RecoveryMetrics planted_recovery_check(std::span<const NeuronReport> reports, const GroundTruth& truth) {
  std::unordered_map<std::size_t, const NeuronReport*> by_neuron;
  for (const auto& r : reports) by_neuron.emplace(r.neuron_id, &r);

  RecoveryMetrics m;
  m.n_planted = truth.planted.size();
  m.n_distractors = truth.distractors.size();
  std::size_t included = 0, primary = 0;
  double correct_sum = 0.0, mismatched_sum = 0.0;
  for (const auto& [neuron, concept_text] : truth.planted) {
    const auto it = by_neuron.find(neuron);
    if (it == by_neuron.end()) continue;
    const NeuronReport& r = *it->second;
    if (std::find(r.retained_concepts.begin(), r.retained_concepts.end(), concept_text) != r.retained_concepts.end()) {
      ++included;
    }
    if (r.primary_concept && *r.primary_concept == concept_text) ++primary;
    for (const auto& rec : r.records) {
      if (rec.concept_text == concept_text) {
        correct_sum += rec.activation_rate;
        ++m.n_correct_records;
      } else {
        mismatched_sum += rec.activation_rate;
        ++m.n_mismatched_records;
      }
    }
  }
  std::size_t excluded = 0;
  for (std::size_t neuron : truth.distractors) {
    const auto it = by_neuron.find(neuron);
    if (it == by_neuron.end() || !it->second->discriminative) ++excluded;
  }
  if (m.n_planted > 0) {
    m.inclusion_recovery = static_cast<double>(included) / static_cast<double>(m.n_planted);
    m.primary_recovery = static_cast<double>(primary) / static_cast<double>(m.n_planted);
  }
  if (m.n_distractors > 0) m.distractor_exclusion = static_cast<double>(excluded) / static_cast<double>(m.n_distractors);
  if (m.n_correct_records > 0) m.mean_ar_planted_correct = correct_sum / static_cast<double>(m.n_correct_records);
  if (m.n_mismatched_records > 0) {
    m.mean_ar_mismatched = mismatched_sum / static_cast<double>(m.n_mismatched_records);
  }
  return m;
}

SyntheticWorldSpec world_spec_from_json(const std::string& json_text) {
  using nlohmann::json;
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("world spec is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("world spec must be a JSON object");
  static const std::set<std::string> known = {
      "n_concepts", "embed_dim", "n_planted_neurons", "n_distractor_neurons", "samples_per_concept", "noise_sigma",
      "seed", "confusable_decoys", "context_strength", "decoy_alignment", "margin", "map_size"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown world spec key: " + key);
  }
  SyntheticWorldSpec s;
  try {
    s.n_concepts = j.value("n_concepts", s.n_concepts);
    s.embed_dim = j.value("embed_dim", s.embed_dim);
    s.n_planted_neurons = j.value("n_planted_neurons", s.n_planted_neurons);
    s.n_distractor_neurons = j.value("n_distractor_neurons", s.n_distractor_neurons);
    s.samples_per_concept = j.value("samples_per_concept", s.samples_per_concept);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    s.seed = j.value("seed", s.seed);
    s.confusable_decoys = j.value("confusable_decoys", s.confusable_decoys);
    s.context_strength = j.value("context_strength", s.context_strength);
    s.decoy_alignment = j.value("decoy_alignment", s.decoy_alignment);
    s.margin = j.value("margin", s.margin);
    s.map_size = j.value("map_size", s.map_size);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad world spec field: ") + e.what());
  }
  s.validate();
  return s;
}

std::string world_spec_to_json(const SyntheticWorldSpec& s) {
  nlohmann::json j{{"n_concepts", s.n_concepts},
                   {"embed_dim", s.embed_dim},
                   {"n_planted_neurons", s.n_planted_neurons},
                   {"n_distractor_neurons", s.n_distractor_neurons},
                   {"samples_per_concept", s.samples_per_concept},
                   {"noise_sigma", s.noise_sigma},
                   {"seed", s.seed},
                   {"confusable_decoys", s.confusable_decoys},
                   {"context_strength", s.context_strength},
                   {"decoy_alignment", s.decoy_alignment},
                   {"margin", s.margin},
                   {"map_size", s.map_size}};
  return j.dump(2) + "\n";
}

}  // namespace sieve
