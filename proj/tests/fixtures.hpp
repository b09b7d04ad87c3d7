#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "sieve/clustering.hpp"
#include "sieve/tensor_store.hpp"

namespace fixture {

inline sieve::EmbeddingTable table_from(const oracle::Points& pts, const std::string& space = "test-space",
                                        const std::string& prefix = "item") {
  sieve::DenseTensor t;
  t.shape = {pts.size(), pts.empty() ? 0 : pts[0].size()};
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ids.push_back(prefix + std::to_string(i));
    for (double x : pts[i]) t.data.push_back(static_cast<float>(x));
  }
  return sieve::EmbeddingTable(std::move(t), std::move(ids), space);
}

/// Points rounded through float, so oracle and library see identical inputs.
inline oracle::Points as_float(oracle::Points pts) {
  for (auto& row : pts)
    for (double& x : row) x = static_cast<float>(x);
  return pts;
}

inline sieve::DistanceMatrix distances_from(const oracle::Points& pts) {
  sieve::DistanceMatrix d(pts.size());
  for (std::size_t p = 0; p < pts.size(); ++p)
    for (std::size_t q = p + 1; q < pts.size(); ++q) d.set(p, q, oracle::euclid(pts[p], pts[q]));
  return d;
}

inline oracle::Points line(std::initializer_list<double> xs) {
  oracle::Points p;
  for (double x : xs) p.push_back({x});
  return p;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("sieve-test-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
