#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "sieve/selection.hpp"

namespace sieve {

/// Resolved pipeline configuration. Every key of the JSON form is listed in
/// README.md; unknown keys are rejected.
struct PipelineConfig {
  SelectionConfig selection;
  std::size_t top_concepts = 2;  // K
  std::size_t max_clusters = 10;
  std::size_t n_images = 10;
  std::uint64_t seed = 0;
  bool verify = true;  // false skips generation and keeps every hypothesis
  std::map<std::string, std::string> paths;  // role -> path, relative to the run directory

  void validate() const;
};

/// Input roles and their default locations inside a run directory.
const std::map<std::string, std::string>& default_input_paths();

PipelineConfig config_from_json(const std::string& json_text);
/// Canonical form: sorted keys, defaults filled in, no whitespace.
std::string config_to_json(const PipelineConfig& cfg);
/// Hex SHA-256 of the canonical JSON.
std::string config_digest(const PipelineConfig& cfg);
std::string sha256_hex(std::string_view bytes);

}  // namespace sieve
