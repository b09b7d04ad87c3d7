#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "fixtures.hpp"
#include "sieve/errors.hpp"
#include "sieve/tensor_store.hpp"

using namespace sieve;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& s) { return {s.begin(), s.end()}; }

bool bitwise_equal(const DenseTensor& a, const DenseTensor& b) {
  return a.shape == b.shape && a.allow_nonfinite == b.allow_nonfinite && a.data.size() == b.data.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("SVT1 layout is byte-exact") {
  const DenseTensor t({2, 2}, {1, 0, 0, 1});
  const auto bytes = encode_tensor(t);
  const std::string header = R"({"dtype":"f32","order":"row-major","shape":[2,2]})";

  REQUIRE(bytes.size() == 4 + 4 + header.size() + 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SVT1");
  CHECK(bytes[4] == header.size());
  CHECK(bytes[5] == 0);
  CHECK(bytes[6] == 0);
  CHECK(bytes[7] == 0);
  CHECK(std::string(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header.size())) == header);
  // 1.0f little-endian
  const std::vector<std::uint8_t> one = {0x00, 0x00, 0x80, 0x3f};
  CHECK(std::equal(one.begin(), one.end(), bytes.begin() + 8 + static_cast<long>(header.size())));
}

TEST_CASE("write_tensor / read_tensor") {
  fixture::TempDir dir;

  SUBCASE("2x2 identity round-trips") {
    const DenseTensor t({2, 2}, {1, 0, 0, 1});
    write_tensor(t, dir / "eye.svt1");
    CHECK(std::filesystem::file_size(dir / "eye.svt1") == encode_tensor(t).size());
    CHECK(read_tensor(dir / "eye.svt1") == t);
  }
  SUBCASE("empty tensor") {
    const DenseTensor t({0}, {});
    write_tensor(t, dir / "empty.svt1");
    const auto back = read_tensor(dir / "empty.svt1");
    CHECK(back.shape == std::vector<std::size_t>{0});
    CHECK(back.data.empty());
  }
  SUBCASE("NaN without the flag is rejected") {
    const DenseTensor t({3}, {1, std::numeric_limits<float>::quiet_NaN(), 2});
    CHECK_THROWS_AS(write_tensor(t, dir / "nan.svt1"), ValidationError);
    CHECK_FALSE(std::filesystem::exists(dir / "nan.svt1"));
  }
  SUBCASE("non-finite values survive with allow_nonfinite") {
    const DenseTensor t({3}, {1, std::numeric_limits<float>::quiet_NaN(), -std::numeric_limits<float>::infinity()},
                        true);
    write_tensor(t, dir / "nan.svt1");
    CHECK(bitwise_equal(read_tensor(dir / "nan.svt1"), t));
  }
  SUBCASE("shape/data mismatch is a validation error") {
    CHECK_THROWS_AS(encode_tensor(DenseTensor({2, 3}, {1, 2, 3})), ValidationError);
  }
  SUBCASE("missing file is an I/O error") { CHECK_THROWS_AS(read_tensor(dir / "nope.svt1"), IoError); }
}

TEST_CASE("read_tensor rejects malformed files") {
  auto good = encode_tensor(DenseTensor({4}, {1, 2, 3, 4}));

  SUBCASE("bad magic") {
    auto bad = good;
    std::memcpy(bad.data(), "XXXX", 4);
    CHECK_THROWS_AS(decode_tensor(bad), FormatError);
  }
  SUBCASE("truncated payload") {
    good.resize(good.size() - 3);
    CHECK_THROWS_AS(decode_tensor(good), FormatError);
  }
  SUBCASE("extra payload") {
    good.push_back(0);
    good.push_back(0);
    good.push_back(0);
    good.push_back(0);
    CHECK_THROWS_AS(decode_tensor(good), FormatError);
  }
  SUBCASE("header length past end of file") {
    good[4] = 0xFF;
    good[5] = 0xFF;
    CHECK_THROWS_AS(decode_tensor(good), FormatError);
  }
  SUBCASE("wrong dtype") {
    const std::string h = R"({"dtype":"f64","shape":[0]})";
    auto b = bytes_of("SVT1");
    b.push_back(static_cast<std::uint8_t>(h.size()));
    b.insert(b.end(), {0, 0, 0});
    b.insert(b.end(), h.begin(), h.end());
    CHECK_THROWS_AS(decode_tensor(b), FormatError);
  }
  SUBCASE("overflowing shape") {
    const std::string h = R"({"dtype":"f32","shape":[4294967296,4294967296,16]})";
    auto b = bytes_of("SVT1");
    b.push_back(static_cast<std::uint8_t>(h.size()));
    b.insert(b.end(), {0, 0, 0});
    b.insert(b.end(), h.begin(), h.end());
    CHECK_THROWS_AS(decode_tensor(b), FormatError);
  }
  SUBCASE("a zero extent makes any other extent legal") {
    const std::string h = R"({"dtype":"f32","shape":[18446744073709551615,0]})";
    auto b = bytes_of("SVT1");
    b.push_back(static_cast<std::uint8_t>(h.size()));
    b.insert(b.end(), {0, 0, 0});
    b.insert(b.end(), h.begin(), h.end());
    CHECK(decode_tensor(b).data.empty());
  }
}

TEST_CASE("property: encode/decode is the identity on random valid tensors") {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> rank_d(0, 4), extent_d(0, 6);
  std::normal_distribution<float> val(0.0f, 100.0f);
  for (int iter = 0; iter < 300; ++iter) {
    std::vector<std::size_t> shape(rank_d(rng));
    for (auto& e : shape) e = extent_d(rng);
    std::vector<float> data(shape_product(shape));
    for (auto& x : data) x = val(rng);
    const DenseTensor t(shape, data);
    CHECK(bitwise_equal(decode_tensor(encode_tensor(t)), t));
  }
}

TEST_CASE("property: header parsing is total") {
  // Every byte string yields a tensor or a typed library error.
  std::mt19937_64 rng(11);
  const auto seed_file = encode_tensor(DenseTensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  std::uniform_int_distribution<int> byte(0, 255);
  int decoded = 0, rejected = 0;
  for (int iter = 0; iter < 5000; ++iter) {
    std::vector<std::uint8_t> b = seed_file;
    const int mode = iter % 3;
    if (mode == 0) {
      const int flips = 1 + iter % 4;
      for (int f = 0; f < flips; ++f) b[rng() % b.size()] = static_cast<std::uint8_t>(byte(rng));
    } else if (mode == 1) {
      b.resize(rng() % (b.size() + 1));
    } else {
      b.resize(rng() % 64);
      for (auto& x : b) x = static_cast<std::uint8_t>(byte(rng));
      if (b.size() >= 4 && iter % 2 == 0) std::memcpy(b.data(), "SVT1", 4);
    }
    try {
      (void)decode_tensor(b);
      ++decoded;
    } catch (const Error&) {
      ++rejected;
    }
  }
  CHECK(decoded + rejected == 5000);
  CHECK(rejected > 0);
}

TEST_CASE("tables validate ids and rows") {
  CHECK_THROWS_AS(ActivationTable(DenseTensor({2, 1}, {1, 2}), {"a", "a"}, "l"), ValidationError);
  CHECK_THROWS_AS(ActivationTable(DenseTensor({2, 1}, {1, 2}), {"a"}, "l"), ValidationError);
  CHECK_THROWS_AS(EmbeddingTable(DenseTensor({2, 2}, {1, 0, 0, 0}), {"a", "b"}, "s"), ValidationError);
  CHECK_THROWS_AS(ActivationMapStack(DenseTensor({1, 0, 3}, {}), {0}, {"a"}), ValidationError);

  const ActivationMapStack single(DenseTensor({2, 1, 2}, {1, 2, 3, 4}), {7}, {"a", "b"});
  CHECK(single.map(1, 7)[1] == 4.0f);
  CHECK_THROWS_AS(single.map(0, 3), KeyError);
}

TEST_CASE("concept sets normalize once and reject duplicates") {
  const ConceptSet c({"  Curly   Dense Hair ", "dog"}, "test");
  CHECK(c.concepts[0] == "curly dense hair");
  CHECK(c.find("CURLY DENSE HAIR").value() == 0);
  CHECK_THROWS_AS(ConceptSet({"Dog", " dog"}, "t"), ValidationError);
  CHECK_THROWS_AS(ConceptSet({"dog", "   "}, "t"), ValidationError);
  CHECK_THROWS_AS(ConceptSet({}, "t"), ValidationError);
}

TEST_CASE("sidecar persistence round-trips ids") {
  fixture::TempDir dir;
  const ActivationTable acts(DenseTensor({2, 3}, {1, 2, 3, 4, 5, 6}), {"x", "y"}, "layer4");
  save_activation_table(acts, dir / "acts");
  const auto back = load_activation_table(dir / "acts");
  CHECK(back.tensor == acts.tensor);
  CHECK(back.sample_ids == acts.sample_ids);
  CHECK(back.layer_id == "layer4");

  const auto embs = fixture::table_from({{1, 0}, {0, 1}}, "clip");
  save_embedding_table(embs, dir / "embs");
  const auto e2 = load_embedding_table(dir / "embs");
  CHECK(e2.item_ids == embs.item_ids);
  CHECK(e2.space_id == "clip");

  const ConceptSet c({"a", "b"}, "src");
  save_concept_set(c, dir / "c.json");
  CHECK(load_concept_set(dir / "c.json").concepts == c.concepts);

  write_file_atomic(dir / "bad.json", "{not json");
  CHECK_THROWS_AS(load_concept_set(dir / "bad.json"), FormatError);
}

TEST_CASE("run manifests") {
  fixture::TempDir dir;
  write_file_atomic(dir / "in.svt1", "x");
  RunManifest m{Stage::hypothesize, {{"activations", (dir / "in.svt1").string()}}, "abc", "2026-01-01T00:00:00Z"};
  write_manifest(m, dir / "manifest.json");
  const auto back = read_manifest(dir / "manifest.json");
  CHECK(back.stage == Stage::hypothesize);
  CHECK(back.inputs == m.inputs);
  CHECK(back.config_digest == "abc");
  CHECK_NOTHROW(back.check_inputs_exist());
  m.inputs["maps"] = (dir / "gone.svt1").string();
  CHECK_THROWS_AS(m.check_inputs_exist(), IoError);
  CHECK_THROWS_AS(parse_stage("dream"), ValidationError);
}

TEST_CASE("validate_alignment") {
  const std::vector<std::string> ids = {"s0", "s1", "s2", "s3"};
  const ActivationTable acts(DenseTensor::zeros({4, 1}), ids, "l");
  const auto embs = fixture::table_from({{1, 0}, {0, 1}}, "s", "s");  // ids s0, s1

  SUBCASE("identical ids") {
    const ActivationMapStack maps(DenseTensor::zeros({4, 2, 2}), {0}, ids);
    const auto r = validate_alignment(acts, maps, embs);
    CHECK(r.all_match());
    CHECK(r.pairs[0].same_order);
  }
  SUBCASE("maps missing one sample") {
    const ActivationMapStack maps(DenseTensor::zeros({3, 2, 2}), {0}, {"s0", "s1", "s3"});
    const auto r = validate_alignment(acts, maps, embs);
    CHECK_FALSE(r.all_match());
    CHECK(r.pairs[0].missing_in_second == std::vector<std::string>{"s2"});
  }
  SUBCASE("embedding for an unknown sample") {
    const ActivationMapStack maps(DenseTensor::zeros({4, 2, 2}), {0}, ids);
    const auto bad = fixture::table_from({{1, 0}}, "s", "zz");
    const auto r = validate_alignment(acts, maps, bad);
    CHECK_FALSE(r.pairs[1].ids_match);
    CHECK(r.pairs[1].missing_in_first == std::vector<std::string>{"zz0"});
  }
  SUBCASE("patch ids resolve to their sample") {
    CHECK(patch_sample_id("s3#12#0") == "s3");
    CHECK(patch_sample_id("s3") == "s3");
  }
  SUBCASE("permuted ids recover the permutation") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t n = 1 + rng() % 40;
      std::vector<std::string> first;
      for (std::size_t i = 0; i < n; ++i) first.push_back("id" + std::to_string(i));
      std::vector<std::size_t> perm(n);
      for (std::size_t i = 0; i < n; ++i) perm[i] = i;
      std::shuffle(perm.begin(), perm.end(), rng);
      // second[perm[i]] = first[i]
      std::vector<std::string> second(n);
      for (std::size_t i = 0; i < n; ++i) second[perm[i]] = first[i];
      const auto st = compare_ids(first, second, "a", "b");
      CHECK(st.ids_match);
      CHECK(st.permutation == perm);
    }
  }
}
