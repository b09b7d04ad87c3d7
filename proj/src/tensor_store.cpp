#include "sieve/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "sieve/errors.hpp"

namespace sieve {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'S', 'V', 'T', '1'};

void put_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32_le(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f32_le(std::vector<std::uint8_t>& out, float f) {
  put_u32_le(out, std::bit_cast<std::uint32_t>(f));
}

json read_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": invalid JSON: " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

fs::path with_suffix(const fs::path& base, const char* suffix) {
  return fs::path(base.string() + suffix);
}

template <typename T>
T sidecar_field(const json& j, const char* key, const fs::path& where) {
  if (!j.is_object() || !j.contains(key)) {
    throw FormatError(where.string() + ": missing field '" + key + "'");
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw FormatError(where.string() + ": bad field '" + key + "': " + e.what());
  }
}

void check_unique(const std::vector<std::string>& ids, const char* what) {
  std::unordered_set<std::string_view> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw ValidationError(std::string("duplicate ") + what + ": " + id);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// DenseTensor

DenseTensor::DenseTensor(std::vector<std::size_t> shape_, std::vector<float> data_, bool allow_nonfinite_)
    : shape(std::move(shape_)), data(std::move(data_)), allow_nonfinite(allow_nonfinite_) {}

DenseTensor DenseTensor::zeros(std::vector<std::size_t> shape) {
  const std::size_t n = shape_product(shape);
  return DenseTensor(std::move(shape), std::vector<float>(n, 0.0f));
}

std::size_t shape_product(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::size_t DenseTensor::element_count() const { return shape_product(shape); }

void DenseTensor::validate() const {
  if (data.size() != element_count()) {
    throw ValidationError("tensor data length " + std::to_string(data.size()) + " does not match shape product " +
                          std::to_string(element_count()));
  }
  if (!allow_nonfinite) {
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!std::isfinite(data[i])) {
        throw ValidationError("non-finite element at flat index " + std::to_string(i));
      }
    }
  }
}

std::vector<std::uint8_t> encode_tensor(const DenseTensor& t) {
  t.validate();
  json header;
  header["dtype"] = "f32";
  header["shape"] = t.shape;
  header["order"] = "row-major";
  if (t.allow_nonfinite) header["allow_nonfinite"] = true;
  const std::string h = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(8 + h.size() + 4 * t.data.size());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32_le(out, static_cast<std::uint32_t>(h.size()));
  out.insert(out.end(), h.begin(), h.end());
  for (float f : t.data) put_f32_le(out, f);
  return out;
}

DenseTensor decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError("bad magic: not an SVT1 tensor");
  }
  const std::uint32_t header_len = get_u32_le(bytes.data() + 4);
  if (header_len > bytes.size() - 8) throw FormatError("header length exceeds file size");

  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  } catch (const json::exception& e) {
    throw FormatError(std::string("unparseable SVT1 header: ") + e.what());
  }
  if (!header.is_object()) throw FormatError("SVT1 header is not a JSON object");

  const auto dtype = header.find("dtype");
  if (dtype == header.end() || !dtype->is_string() || *dtype != "f32") {
    throw FormatError("unsupported or missing dtype (only \"f32\")");
  }
  if (const auto order = header.find("order"); order != header.end()) {
    if (!order->is_string() || *order != "row-major") throw FormatError("unsupported order (only \"row-major\")");
  }
  const auto shape_it = header.find("shape");
  if (shape_it == header.end() || !shape_it->is_array()) throw FormatError("missing shape");

  DenseTensor t;
  const std::size_t payload_bytes = bytes.size() - 8 - header_len;
  std::size_t count = 1;
  bool overflow = false;
  for (const auto& e : *shape_it) {
    if (!e.is_number_unsigned()) throw FormatError("shape extents must be non-negative integers");
    const auto extent = static_cast<std::size_t>(e.get<std::uint64_t>());
    overflow = overflow || __builtin_mul_overflow(count, extent, &count);
    t.shape.push_back(extent);
  }
  if (std::find(t.shape.begin(), t.shape.end(), std::size_t{0}) != t.shape.end()) {
    count = 0;
    overflow = false;
  }
  if (overflow || count > payload_bytes / 4) throw FormatError("payload length does not match shape");
  if (const auto nf = header.find("allow_nonfinite"); nf != header.end()) {
    if (!nf->is_boolean()) throw FormatError("allow_nonfinite must be boolean");
    t.allow_nonfinite = nf->get<bool>();
  }
  if (payload_bytes != count * 4) {
    throw FormatError("payload length " + std::to_string(payload_bytes) + " != product(shape)*4 = " +
                      std::to_string(count * 4));
  }

  t.data.resize(count);
  const std::uint8_t* p = bytes.data() + 8 + header_len;
  for (std::size_t i = 0; i < count; ++i, p += 4) t.data[i] = std::bit_cast<float>(get_u32_le(p));

  if (!t.allow_nonfinite) {
    for (float f : t.data) {
      if (!std::isfinite(f)) throw FormatError("non-finite element without allow_nonfinite");
    }
  }
  return t;
}

void write_tensor(const DenseTensor& t, const fs::path& path) {
  const auto bytes = encode_tensor(t);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

DenseTensor read_tensor(const fs::path& path) {
  const std::string raw = read_file(path);
  return decode_tensor(std::span(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
}

// ---------------------------------------------------------------------------
// Tables

ActivationTable::ActivationTable(DenseTensor t, std::vector<std::string> ids, std::string layer)
    : tensor(std::move(t)), sample_ids(std::move(ids)), layer_id(std::move(layer)) {
  validate();
}

std::vector<double> ActivationTable::column(std::size_t neuron) const {
  if (neuron >= n_neurons()) throw KeyError("unknown neuron " + std::to_string(neuron));
  std::vector<double> col(n_samples());
  for (std::size_t s = 0; s < col.size(); ++s) col[s] = at(s, neuron);
  return col;
}

void ActivationTable::validate() const {
  if (tensor.rank() != 2) throw ValidationError("activation table must be rank 2 [S, N]");
  tensor.validate();
  if (sample_ids.size() != tensor.shape[0]) {
    throw ValidationError("activation table has " + std::to_string(sample_ids.size()) + " sample ids for " +
                          std::to_string(tensor.shape[0]) + " rows");
  }
  check_unique(sample_ids, "sample id");
}

ActivationMapStack::ActivationMapStack(DenseTensor t, std::vector<std::size_t> neurons, std::vector<std::string> ids)
    : tensor(std::move(t)), neuron_ids(std::move(neurons)), sample_ids(std::move(ids)) {
  validate();
}

void ActivationMapStack::validate() const {
  if (tensor.rank() != 3 && tensor.rank() != 4) throw ValidationError("map stack must be [S,H,W] or [S,N,H,W]");
  tensor.validate();
  if (height() < 1 || width() < 1) throw ValidationError("map spatial extents must be >= 1");
  if (sample_ids.size() != tensor.shape[0]) throw ValidationError("map stack sample id count mismatch");
  const std::size_t slots = tensor.rank() == 4 ? tensor.shape[1] : 1;
  if (neuron_ids.size() != slots) throw ValidationError("map stack neuron id count mismatch");
  check_unique(sample_ids, "sample id");
}

bool ActivationMapStack::covers(std::size_t neuron) const {
  return std::find(neuron_ids.begin(), neuron_ids.end(), neuron) != neuron_ids.end();
}

std::size_t ActivationMapStack::neuron_slot(std::size_t neuron) const {
  const auto it = std::find(neuron_ids.begin(), neuron_ids.end(), neuron);
  if (it == neuron_ids.end()) throw KeyError("map stack does not cover neuron " + std::to_string(neuron));
  return static_cast<std::size_t>(it - neuron_ids.begin());
}

std::span<const float> ActivationMapStack::map(std::size_t sample, std::size_t neuron) const {
  const std::size_t hw = height() * width();
  const std::size_t slots = neuron_ids.size();
  const std::size_t offset = (sample * slots + neuron_slot(neuron)) * hw;
  return {tensor.data.data() + offset, hw};
}

EmbeddingTable::EmbeddingTable(DenseTensor t, std::vector<std::string> ids, std::string space)
    : tensor(std::move(t)), item_ids(std::move(ids)), space_id(std::move(space)) {
  validate();
}

std::optional<std::size_t> EmbeddingTable::find(std::string_view id) const {
  const auto it = std::find(item_ids.begin(), item_ids.end(), id);
  if (it == item_ids.end()) return std::nullopt;
  return static_cast<std::size_t>(it - item_ids.begin());
}

void EmbeddingTable::validate() const {
  if (tensor.rank() != 2) throw ValidationError("embedding table must be rank 2 [M, D]");
  tensor.validate();
  if (item_ids.size() != tensor.shape[0]) throw ValidationError("embedding table item id count mismatch");
  check_unique(item_ids, "item id");
  for (std::size_t i = 0; i < n_items(); ++i) {
    const auto r = row(i);
    if (std::all_of(r.begin(), r.end(), [](float v) { return v == 0.0f; })) {
      throw ValidationError("zero-norm embedding row for item " + item_ids[i]);
    }
  }
}

EmbeddingTable EmbeddingTable::subset(std::span<const std::size_t> rows) const {
  EmbeddingTable out;
  out.space_id = space_id;
  out.tensor.shape = {rows.size(), dim()};
  out.tensor.data.reserve(rows.size() * dim());
  for (std::size_t r : rows) {
    const auto src = row(r);
    out.tensor.data.insert(out.tensor.data.end(), src.begin(), src.end());
    out.item_ids.push_back(item_ids[r]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Concepts

std::string normalize_concept(std::string_view text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

ConceptSet::ConceptSet(std::vector<std::string> raw, std::string source) : source_id(std::move(source)) {
  concepts.reserve(raw.size());
  for (const auto& r : raw) concepts.push_back(normalize_concept(r));
  validate();
}

std::optional<std::size_t> ConceptSet::find(std::string_view text) const {
  const std::string key = normalize_concept(text);
  const auto it = std::find(concepts.begin(), concepts.end(), key);
  if (it == concepts.end()) return std::nullopt;
  return static_cast<std::size_t>(it - concepts.begin());
}

void ConceptSet::validate() const {
  if (concepts.empty()) throw ValidationError("concept set is empty");
  std::unordered_set<std::string> seen;
  for (const auto& c : concepts) {
    if (c.empty()) throw ValidationError("empty concept string");
    if (!seen.insert(normalize_concept(c)).second) throw ValidationError("duplicate concept: " + c);
  }
}

// ---------------------------------------------------------------------------
// Manifests

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::select: return "select";
    case Stage::hypothesize: return "hypothesize";
    case Stage::verify: return "verify";
    case Stage::report: return "report";
  }
  return "unknown";
}

Stage parse_stage(std::string_view name) {
  for (Stage s : {Stage::select, Stage::hypothesize, Stage::verify, Stage::report}) {
    if (stage_name(s) == name) return s;
  }
  throw ValidationError("unknown stage: " + std::string(name));
}

void RunManifest::check_inputs_exist() const {
  for (const auto& [role, path] : inputs) {
    if (!fs::exists(path)) throw IoError("input '" + role + "' missing: " + path);
  }
}

void write_manifest(const RunManifest& m, const fs::path& path) {
  json j;
  j["stage"] = stage_name(m.stage);
  j["inputs"] = m.inputs;
  j["config_digest"] = m.config_digest;
  j["created_at"] = m.created_at;
  write_json_file(path, j);
}

RunManifest read_manifest(const fs::path& path) {
  const json j = read_json_file(path);
  RunManifest m;
  m.stage = parse_stage(sidecar_field<std::string>(j, "stage", path));
  m.inputs = sidecar_field<std::map<std::string, std::string>>(j, "inputs", path);
  m.config_digest = sidecar_field<std::string>(j, "config_digest", path);
  m.created_at = sidecar_field<std::string>(j, "created_at", path);
  return m;
}

// ---------------------------------------------------------------------------
// Sidecar persistence

void save_activation_table(const ActivationTable& t, const fs::path& base) {
  t.validate();
  write_tensor(t.tensor, with_suffix(base, ".svt1"));
  json j{{"kind", "activation_table"}, {"layer_id", t.layer_id}, {"sample_ids", t.sample_ids}};
  write_json_file(with_suffix(base, ".json"), j);
}

ActivationTable load_activation_table(const fs::path& base) {
  const auto side = with_suffix(base, ".json");
  const json j = read_json_file(side);
  ActivationTable t;
  t.tensor = read_tensor(with_suffix(base, ".svt1"));
  t.sample_ids = sidecar_field<std::vector<std::string>>(j, "sample_ids", side);
  t.layer_id = sidecar_field<std::string>(j, "layer_id", side);
  t.validate();
  return t;
}

void save_map_stack(const ActivationMapStack& m, const fs::path& base) {
  m.validate();
  write_tensor(m.tensor, with_suffix(base, ".svt1"));
  json j{{"kind", "activation_maps"}, {"neuron_ids", m.neuron_ids}, {"sample_ids", m.sample_ids}};
  write_json_file(with_suffix(base, ".json"), j);
}

ActivationMapStack load_map_stack(const fs::path& base) {
  const auto side = with_suffix(base, ".json");
  const json j = read_json_file(side);
  ActivationMapStack m;
  m.tensor = read_tensor(with_suffix(base, ".svt1"));
  m.neuron_ids = sidecar_field<std::vector<std::size_t>>(j, "neuron_ids", side);
  m.sample_ids = sidecar_field<std::vector<std::string>>(j, "sample_ids", side);
  m.validate();
  return m;
}

void save_embedding_table(const EmbeddingTable& e, const fs::path& base) {
  e.validate();
  write_tensor(e.tensor, with_suffix(base, ".svt1"));
  json j{{"kind", "embeddings"}, {"space_id", e.space_id}, {"item_ids", e.item_ids}};
  write_json_file(with_suffix(base, ".json"), j);
}

EmbeddingTable load_embedding_table(const fs::path& base) {
  const auto side = with_suffix(base, ".json");
  const json j = read_json_file(side);
  EmbeddingTable e;
  e.tensor = read_tensor(with_suffix(base, ".svt1"));
  e.item_ids = sidecar_field<std::vector<std::string>>(j, "item_ids", side);
  e.space_id = sidecar_field<std::string>(j, "space_id", side);
  e.validate();
  return e;
}

void save_concept_set(const ConceptSet& c, const fs::path& path) {
  c.validate();
  write_json_file(path, json{{"source_id", c.source_id}, {"concepts", c.concepts}});
}

ConceptSet load_concept_set(const fs::path& path) {
  const json j = read_json_file(path);
  return ConceptSet(sidecar_field<std::vector<std::string>>(j, "concepts", path),
                    sidecar_field<std::string>(j, "source_id", path));
}

// ---------------------------------------------------------------------------
// Alignment

bool AlignmentReport::all_match() const {
  return std::all_of(pairs.begin(), pairs.end(), [](const IdPairStatus& p) { return p.ids_match; });
}

IdPairStatus compare_ids(std::span<const std::string> first, std::span<const std::string> second,
                         std::string first_role, std::string second_role) {
  IdPairStatus st;
  st.first_role = std::move(first_role);
  st.second_role = std::move(second_role);

  std::unordered_map<std::string_view, std::size_t> index_in_second;
  for (std::size_t i = 0; i < second.size(); ++i) index_in_second.emplace(second[i], i);
  std::unordered_set<std::string_view> in_first(first.begin(), first.end());

  for (const auto& id : first) {
    if (!index_in_second.contains(id)) st.missing_in_second.push_back(id);
  }
  for (const auto& id : second) {
    if (!in_first.contains(id)) st.missing_in_first.push_back(id);
  }
  st.ids_match = st.missing_in_first.empty() && st.missing_in_second.empty() && first.size() == second.size();
  st.same_order = std::equal(first.begin(), first.end(), second.begin(), second.end());
  if (st.ids_match) {
    st.permutation.reserve(first.size());
    for (const auto& id : first) st.permutation.push_back(index_in_second.at(id));
  }
  return st;
}

std::string_view patch_sample_id(std::string_view patch_id) {
  const auto hash = patch_id.find('#');
  return hash == std::string_view::npos ? patch_id : patch_id.substr(0, hash);
}

AlignmentReport validate_alignment(const ActivationTable& acts, const ActivationMapStack& maps,
                                   const EmbeddingTable& embs) {
  AlignmentReport report;
  report.pairs.push_back(compare_ids(acts.sample_ids, maps.sample_ids, "activations", "maps"));

  IdPairStatus emb;
  emb.first_role = "activations";
  emb.second_role = "embeddings";
  std::unordered_set<std::string_view> known(acts.sample_ids.begin(), acts.sample_ids.end());
  for (const auto& id : embs.item_ids) {
    if (!known.contains(patch_sample_id(id))) emb.missing_in_first.push_back(id);
  }
  emb.ids_match = emb.missing_in_first.empty();
  emb.same_order = std::equal(acts.sample_ids.begin(), acts.sample_ids.end(), embs.item_ids.begin(),
                              embs.item_ids.end());
  report.pairs.push_back(std::move(emb));
  return report;
}

// ---------------------------------------------------------------------------
// Files

void write_file_atomic(const fs::path& path, std::string_view contents) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return std::move(ss).str();
}

}  // namespace sieve
