#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sieve/tensor_store.hpp"

namespace sieve {

struct SelectionConfig {
  double beta = 10.0;            // discriminativeness threshold on p99/median
  std::size_t top_k_samples = 20;
  double crop_tau = 0.5;         // fraction of the map maximum kept in the crop
  double epsilon = 1e-12;

  void validate() const;
};

struct NeuronStats {
  std::size_t neuron_id = 0;
  double median = 0.0;
  double p99 = 0.0;
  double ratio = 0.0;  // +inf when the median vanishes but p99 does not
  std::size_t n_samples = 0;

  bool operator==(const NeuronStats&) const = default;
};

/// Normalized half-open rectangle, relative to the original image.
struct CropRect {
  double x0 = 0.0, y0 = 0.0, x1 = 1.0, y1 = 1.0;

  bool contains_cell(std::size_t row, std::size_t col, std::size_t height, std::size_t width) const;
  bool operator==(const CropRect&) const = default;
};

struct SelectionResult {
  std::size_t neuron_id = 0;
  bool discriminative = false;
  NeuronStats stats;
  std::vector<std::size_t> selected_rows;        // sample rows, descending activation
  std::vector<std::string> selected_sample_ids;  // parallel to selected_rows
  std::vector<CropRect> crop_rects;              // parallel; empty when no maps are given
};

/// Linear-interpolation quantile on (n-1)-scaled ranks:
///   r = q(n-1), l = floor(r), x[l] + (r-l)(x[l+1]-x[l]).
/// Throws EmptyInputError for empty input and RangeError for q outside [0,1].
double quantile(std::span<const double> values, double q);

/// Same estimator over data that is already sorted ascending.
double quantile_sorted(std::span<const double> sorted, double q);

NeuronStats neuron_stats(std::span<const double> column, const SelectionConfig& cfg, std::size_t neuron_id = 0);

/// Strict: ratio > beta.
bool discriminative_filter(const NeuronStats& stats, const SelectionConfig& cfg);

/// Top samples of one neuron, ties broken by ascending sample row. When
/// `maps` is non-null a crop rectangle is derived for every selected sample.
SelectionResult select_high_activation(const ActivationTable& acts, std::size_t neuron_id,
                                       const SelectionConfig& cfg, const ActivationMapStack* maps = nullptr);

CropRect crop_rect_from_map(std::span<const float> map, std::size_t height, std::size_t width,
                            const SelectionConfig& cfg);

}  // namespace sieve
