#include "sieve/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

#include "sieve/errors.hpp"

namespace sieve {

void SelectionConfig::validate() const {
  if (!(beta > 0.0)) throw ValidationError("beta must be > 0");
  if (top_k_samples < 1) throw ValidationError("top_k_samples must be >= 1");
  if (!(crop_tau > 0.0 && crop_tau <= 1.0)) throw ValidationError("crop_tau must lie in (0, 1]");
  if (!(epsilon >= 0.0)) throw ValidationError("epsilon must be >= 0");
}

bool CropRect::contains_cell(std::size_t row, std::size_t col, std::size_t height, std::size_t width) const {
  const double cx = (static_cast<double>(col) + 0.5) / static_cast<double>(width);
  const double cy = (static_cast<double>(row) + 0.5) / static_cast<double>(height);
  return cx >= x0 && cx < x1 && cy >= y0 && cy < y1;
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw EmptyInputError("quantile of empty sequence");
  if (!(q >= 0.0 && q <= 1.0)) throw RangeError("quantile level must lie in [0, 1]");
  const std::size_t n = sorted.size();
  const double r = q * static_cast<double>(n - 1);
  const auto l = static_cast<std::size_t>(std::floor(r));
  if (l >= n - 1) return sorted[n - 1];
  const double frac = r - static_cast<double>(l);
  return sorted[l] + frac * (sorted[l + 1] - sorted[l]);
}

double quantile(std::span<const double> values, double q) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  return quantile_sorted(sorted, q);
}

NeuronStats neuron_stats(std::span<const double> column, const SelectionConfig& cfg, std::size_t neuron_id) {
  if (column.empty()) throw EmptyInputError("activation column for neuron " + std::to_string(neuron_id) + " is empty");
  std::vector<double> sorted(column.begin(), column.end());
  std::sort(sorted.begin(), sorted.end());

  NeuronStats st;
  st.neuron_id = neuron_id;
  st.n_samples = column.size();
  st.median = quantile_sorted(sorted, 0.5);
  st.p99 = quantile_sorted(sorted, 0.99);
  if (st.median > cfg.epsilon) {
    st.ratio = st.p99 / st.median;
  } else if (st.p99 > cfg.epsilon) {
    st.ratio = std::numeric_limits<double>::infinity();
  } else {
    st.ratio = 0.0;
  }
  return st;
}

bool discriminative_filter(const NeuronStats& stats, const SelectionConfig& cfg) { return stats.ratio > cfg.beta; }

CropRect crop_rect_from_map(std::span<const float> map, std::size_t height, std::size_t width,
                            const SelectionConfig& cfg) {
  if (height < 1 || width < 1 || map.size() != height * width) {
    throw ValidationError("activation map must be a non-empty H*W grid");
  }
  const double peak = *std::max_element(map.begin(), map.end());
  if (!(peak > cfg.epsilon)) return CropRect{};

  const double cut = cfg.crop_tau * peak;
  std::size_t r0 = height, r1 = 0, c0 = width, c1 = 0;
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      if (map[r * width + c] >= cut) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
    }
  }
  const auto h = static_cast<double>(height);
  const auto w = static_cast<double>(width);
  return CropRect{static_cast<double>(c0) / w, static_cast<double>(r0) / h, static_cast<double>(c1 + 1) / w,
                  static_cast<double>(r1 + 1) / h};
}

SelectionResult select_high_activation(const ActivationTable& acts, std::size_t neuron_id,
                                       const SelectionConfig& cfg, const ActivationMapStack* maps) {
  cfg.validate();
  const std::vector<double> column = acts.column(neuron_id);

  SelectionResult res;
  res.neuron_id = neuron_id;
  res.stats = neuron_stats(column, cfg, neuron_id);
  res.discriminative = discriminative_filter(res.stats, cfg);
  if (!res.discriminative) return res;

  std::vector<std::size_t> order(column.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t k = std::min(cfg.top_k_samples, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (column[a] != column[b]) return column[a] > column[b];
                      return a < b;
                    });
  order.resize(k);
  res.selected_rows = order;
  for (std::size_t row : order) res.selected_sample_ids.push_back(acts.sample_ids[row]);

  if (maps != nullptr) {
    std::unordered_map<std::string_view, std::size_t> map_row;
    for (std::size_t i = 0; i < maps->sample_ids.size(); ++i) map_row.emplace(maps->sample_ids[i], i);
    for (const auto& id : res.selected_sample_ids) {
      const auto it = map_row.find(id);
      if (it == map_row.end()) throw KeyError("no activation map for sample " + id);
      res.crop_rects.push_back(
          crop_rect_from_map(maps->map(it->second, neuron_id), maps->height(), maps->width(), cfg));
    }
  }
  return res;
}

}  // namespace sieve
