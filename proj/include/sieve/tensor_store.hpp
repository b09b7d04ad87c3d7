#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sieve {

namespace fs = std::filesystem;

/// Row-major f32 tensor. The only dtype in the SVT1 container.
struct DenseTensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;
  bool allow_nonfinite = false;

  DenseTensor() = default;
  DenseTensor(std::vector<std::size_t> shape_, std::vector<float> data_, bool allow_nonfinite_ = false);

  static DenseTensor zeros(std::vector<std::size_t> shape);

  std::size_t rank() const { return shape.size(); }
  std::size_t element_count() const;

  /// Throws ValidationError when data length and shape disagree, or when a
  /// non-finite element appears without allow_nonfinite.
  void validate() const;

  bool operator==(const DenseTensor&) const = default;
};

std::size_t shape_product(std::span<const std::size_t> shape);

// SVT1 layout: "SVT1" | u32 LE header length | UTF-8 JSON header | LE f32 payload.
std::vector<std::uint8_t> encode_tensor(const DenseTensor& t);
DenseTensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const DenseTensor& t, const fs::path& path);
DenseTensor read_tensor(const fs::path& path);

/// Scalar activations of one layer: [S samples, N neurons].
struct ActivationTable {
  DenseTensor tensor;
  std::vector<std::string> sample_ids;
  std::string layer_id;

  ActivationTable() = default;
  ActivationTable(DenseTensor t, std::vector<std::string> ids, std::string layer);

  std::size_t n_samples() const { return tensor.shape.at(0); }
  std::size_t n_neurons() const { return tensor.shape.at(1); }
  float at(std::size_t sample, std::size_t neuron) const {
    return tensor.data[sample * n_neurons() + neuron];
  }
  std::vector<double> column(std::size_t neuron) const;
  void validate() const;
};

/// Spatial activation grids, either [S, H, W] for a single neuron or [S, N, H, W].
struct ActivationMapStack {
  DenseTensor tensor;
  std::vector<std::size_t> neuron_ids;
  std::vector<std::string> sample_ids;

  ActivationMapStack() = default;
  ActivationMapStack(DenseTensor t, std::vector<std::size_t> neurons, std::vector<std::string> ids);

  std::size_t height() const { return tensor.shape[tensor.rank() - 2]; }
  std::size_t width() const { return tensor.shape[tensor.rank() - 1]; }
  bool covers(std::size_t neuron) const;
  /// H*W grid for (sample row, neuron id). Throws KeyError if neuron is not covered.
  std::span<const float> map(std::size_t sample, std::size_t neuron) const;
  void validate() const;

 private:
  std::size_t neuron_slot(std::size_t neuron) const;
};

/// [M items, D dims] feature vectors living in one named embedding space.
struct EmbeddingTable {
  DenseTensor tensor;
  std::vector<std::string> item_ids;
  std::string space_id;

  EmbeddingTable() = default;
  EmbeddingTable(DenseTensor t, std::vector<std::string> ids, std::string space);

  std::size_t n_items() const { return tensor.shape.at(0); }
  std::size_t dim() const { return tensor.shape.at(1); }
  std::span<const float> row(std::size_t i) const {
    return {tensor.data.data() + i * dim(), dim()};
  }
  std::optional<std::size_t> find(std::string_view id) const;
  /// Rejects zero-norm rows and duplicate ids.
  void validate() const;
  EmbeddingTable subset(std::span<const std::size_t> rows) const;
};

/// Lowercase and trim; internal runs of whitespace collapse to one space.
std::string normalize_concept(std::string_view text);

struct ConceptSet {
  std::vector<std::string> concepts;
  std::string source_id;

  ConceptSet() = default;
  /// Normalizes every concept and validates the set.
  ConceptSet(std::vector<std::string> raw, std::string source);

  std::size_t size() const { return concepts.size(); }
  std::optional<std::size_t> find(std::string_view text) const;
  void validate() const;
};

enum class Stage { select, hypothesize, verify, report };
std::string_view stage_name(Stage s);
Stage parse_stage(std::string_view name);

struct RunManifest {
  Stage stage = Stage::select;
  std::map<std::string, std::string> inputs;  // role -> path
  std::string config_digest;
  std::string created_at;  // ISO-8601 UTC

  /// Throws IoError naming the first input path that does not exist.
  void check_inputs_exist() const;
};

void write_manifest(const RunManifest& m, const fs::path& path);
RunManifest read_manifest(const fs::path& path);

// Tables persist as "<base>.svt1" plus a "<base>.json" sidecar holding ids.
void save_activation_table(const ActivationTable& t, const fs::path& base);
ActivationTable load_activation_table(const fs::path& base);
void save_map_stack(const ActivationMapStack& m, const fs::path& base);
ActivationMapStack load_map_stack(const fs::path& base);
void save_embedding_table(const EmbeddingTable& e, const fs::path& base);
EmbeddingTable load_embedding_table(const fs::path& base);
void save_concept_set(const ConceptSet& c, const fs::path& path);
ConceptSet load_concept_set(const fs::path& path);

struct IdPairStatus {
  std::string first_role;
  std::string second_role;
  bool ids_match = false;   // equal id sets (or subset, for patch embeddings)
  bool same_order = false;  // element-wise equal sequences
  std::vector<std::string> missing_in_first;
  std::vector<std::string> missing_in_second;
  /// When sets are equal: permutation[i] is the index in `second` of first[i].
  std::vector<std::size_t> permutation;
};

struct AlignmentReport {
  std::vector<IdPairStatus> pairs;
  bool all_match() const;
};

IdPairStatus compare_ids(std::span<const std::string> first, std::span<const std::string> second,
                         std::string first_role, std::string second_role);

/// Sample part of a patch id ("<sample>#<neuron>..." or a bare sample id).
std::string_view patch_sample_id(std::string_view patch_id);

/// Activations vs maps must carry equal sample-id sets; embeddings may cover
/// any subset of samples, keyed by patch id.
AlignmentReport validate_alignment(const ActivationTable& acts, const ActivationMapStack& maps,
                                   const EmbeddingTable& embs);

/// Write through a temp file then rename, so readers never see a partial file.
void write_file_atomic(const fs::path& path, std::string_view contents);
std::string read_file(const fs::path& path);

}  // namespace sieve
