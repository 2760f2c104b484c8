#pragma once

#include "clens/circuits/circuit.hpp"
#include "clens/error.hpp"
#include "clens/model/spec.hpp"

#include <optional>
#include <set>
#include <vector>

namespace clens {

/// Layers run from -1 (embed) to n_layers (logits).
inline int n_layer_slots(const ModelSpec& s) { return s.n_layers + 2; }

struct LayerBins {
  std::vector<std::pair<int, int>> ranges;   // inclusive layer ranges
  std::vector<std::optional<double>> iou;    // nullopt: both buckets empty
};

/// Splits the layer slots into `n_bins` contiguous ranges and computes the
/// structural edge IoU per range. An edge belongs to the range of its
/// sender's layer and to the range of its receiver's layer.
inline LayerBins layerwise_iou(const Circuit& a, const Circuit& b, int n_bins, const ModelSpec& spec) {
  const int slots = n_layer_slots(spec);
  if (n_bins < 1 || n_bins > slots) throw ConfigError("layerwise_iou: n_bins must lie in [1, n_layers + 2]");
  LayerBins out;
  for (int i = 0; i < n_bins; ++i)
    out.ranges.push_back({-1 + slots * i / n_bins, -1 + slots * (i + 1) / n_bins - 1});
  auto bin_of = [&](int layer) {
    for (int i = 0; i < n_bins; ++i)
      if (layer >= out.ranges[i].first && layer <= out.ranges[i].second) return i;
    throw ConfigError("layer outside model");
  };
  auto buckets = [&](const Circuit& c) {
    std::vector<std::set<StructuralEdge>> bk(n_bins);
    for (const auto& e : c.edges) {
      const auto [ls, lr] = edge_layers(e.edge, spec);
      bk[bin_of(ls)].insert(structural(e.edge));
      bk[bin_of(lr)].insert(structural(e.edge));
    }
    return bk;
  };
  const auto ba = buckets(a), bb = buckets(b);
  for (int i = 0; i < n_bins; ++i) {
    if (ba[i].empty() && bb[i].empty()) {
      out.iou.push_back(std::nullopt);
    } else {
      out.iou.push_back(jaccard(ba[i], bb[i]));
    }
  }
  return out;
}

/// Sender layer x receiver layer grid, row-major over slots -1..n_layers.
struct LayerGrid {
  int slots = 0;
  std::vector<std::optional<double>> iou;
  std::vector<int> count_a;  // positional edges of a per cell
  std::vector<int> count_b;

  int cell(int sender_layer, int receiver_layer) const { return (sender_layer + 1) * slots + (receiver_layer + 1); }
  std::optional<double> at(int ls, int lr) const { return iou.at(cell(ls, lr)); }
};

inline LayerGrid layer_pair_grid(const Circuit& a, const Circuit& b, const ModelSpec& spec) {
  LayerGrid g;
  g.slots = n_layer_slots(spec);
  const std::size_t n = static_cast<std::size_t>(g.slots) * g.slots;
  std::vector<std::set<StructuralEdge>> sa(n), sb(n);
  g.count_a.assign(n, 0);
  g.count_b.assign(n, 0);
  for (const auto& e : a.edges) {
    const auto [ls, lr] = edge_layers(e.edge, spec);
    sa[g.cell(ls, lr)].insert(structural(e.edge));
    g.count_a[g.cell(ls, lr)] += 1;
  }
  for (const auto& e : b.edges) {
    const auto [ls, lr] = edge_layers(e.edge, spec);
    sb[g.cell(ls, lr)].insert(structural(e.edge));
    g.count_b[g.cell(ls, lr)] += 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (sa[i].empty() && sb[i].empty()) {
      g.iou.push_back(std::nullopt);
    } else {
      g.iou.push_back(jaccard(sa[i], sb[i]));
    }
  }
  return g;
}

/// Per cell: mean of the defined within-format IoUs minus the cross-format
/// IoU. Undefined when the cross cell or every within cell is undefined.
inline std::vector<std::optional<double>> tf_delta(const std::vector<LayerGrid>& within, const LayerGrid& cross) {
  if (within.empty()) throw ConfigError("tf_delta: need at least one within-format grid");
  std::vector<std::optional<double>> out(cross.iou.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double sum = 0;
    int n = 0;
    for (const auto& g : within) {
      if (g.iou.size() != cross.iou.size()) throw ShapeError("tf_delta: grids differ in size");
      if (g.iou[i]) {
        sum += *g.iou[i];
        ++n;
      }
    }
    if (n > 0 && cross.iou[i]) out[i] = sum / n - *cross.iou[i];
  }
  return out;
}

inline std::vector<std::optional<double>> tf_delta(const std::vector<std::pair<Circuit, Circuit>>& within,
                                                  const std::pair<Circuit, Circuit>& cross, const ModelSpec& spec) {
  std::vector<LayerGrid> grids;
  for (const auto& [a, b] : within) grids.push_back(layer_pair_grid(a, b, spec));
  return tf_delta(grids, layer_pair_grid(cross.first, cross.second, spec));
}

}  // namespace clens
