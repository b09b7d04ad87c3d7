#include "sieve/config.hpp"

#include <array>
#include <cstdio>
#include <set>

#include <json.hpp>
#include <openssl/sha.h>

#include "sieve/errors.hpp"

namespace sieve {

using nlohmann::json;

const std::map<std::string, std::string>& default_input_paths() {
  static const std::map<std::string, std::string> paths = {
      {"activations", "inputs/activations"},
      {"maps", "inputs/maps"},
      {"patch_embeddings", "inputs/patch_embs"},
      {"concept_embeddings", "inputs/concept_embs"},
      {"concepts", "inputs/concepts.json"},
  };
  return paths;
}

void PipelineConfig::validate() const {
  selection.validate();
  if (top_concepts < 1) throw ValidationError("K must be >= 1");
  if (max_clusters < 1) throw ValidationError("max_m must be >= 1");
  if (n_images < 1) throw ValidationError("n_images must be >= 1");
  for (const auto& [role, _] : paths) {
    if (!default_input_paths().contains(role)) throw ValidationError("unknown path role: " + role);
  }
}

PipelineConfig config_from_json(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  static const std::set<std::string> known = {"beta", "top_k", "crop_tau", "epsilon", "K",
                                              "max_m", "n_images", "seed", "verify", "paths"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown config key: " + key);
  }

  PipelineConfig cfg;
  try {
    cfg.selection.beta = j.value("beta", cfg.selection.beta);
    cfg.selection.top_k_samples = j.value("top_k", cfg.selection.top_k_samples);
    cfg.selection.crop_tau = j.value("crop_tau", cfg.selection.crop_tau);
    cfg.selection.epsilon = j.value("epsilon", cfg.selection.epsilon);
    cfg.top_concepts = j.value("K", cfg.top_concepts);
    cfg.max_clusters = j.value("max_m", cfg.max_clusters);
    cfg.n_images = j.value("n_images", cfg.n_images);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.verify = j.value("verify", cfg.verify);
    if (j.contains("paths")) cfg.paths = j.at("paths").get<std::map<std::string, std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad config value: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

std::string config_to_json(const PipelineConfig& cfg) {
  auto paths = default_input_paths();
  for (const auto& [role, path] : cfg.paths) paths[role] = path;
  json j{{"beta", cfg.selection.beta},
         {"top_k", cfg.selection.top_k_samples},
         {"crop_tau", cfg.selection.crop_tau},
         {"epsilon", cfg.selection.epsilon},
         {"K", cfg.top_concepts},
         {"max_m", cfg.max_clusters},
         {"n_images", cfg.n_images},
         {"seed", cfg.seed},
         {"verify", cfg.verify},
         {"paths", paths}};
  return j.dump();
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest.data());
  std::string hex;
  hex.reserve(2 * digest.size());
  for (unsigned char b : digest) {
    char buf[3];
    std::snprintf(buf, sizeof buf, "%02x", b);
    hex += buf;
  }
  return hex;
}

std::string config_digest(const PipelineConfig& cfg) { return sha256_hex(config_to_json(cfg)); }

}  // namespace sieve
