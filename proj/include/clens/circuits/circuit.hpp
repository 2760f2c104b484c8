#pragma once

#include "clens/attribution/edges.hpp"
#include "clens/attribution/table.hpp"
#include "clens/error.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

namespace clens {

struct ScoredEdge {
  EdgeRef edge;
  double score = 0;
};

/// Edges in descending |score| order; ties go to the smaller EdgeRef.
struct Circuit {
  std::vector<ScoredEdge> edges;

  std::size_t size() const { return edges.size(); }
  bool empty() const { return edges.empty(); }

  std::set<StructuralEdge> structural() const {
    std::set<StructuralEdge> out;
    for (const auto& e : edges) out.insert(clens::structural(e.edge));
    return out;
  }

  /// Attention heads and MLPs touched by any edge. Embed and logits are
  /// endpoints of the graph, not nodes.
  std::set<Component> nodes() const {
    std::set<Component> out;
    for (const auto& e : edges)
      for (const auto& c : {e.edge.sender, e.edge.receiver})
        if (c.kind == NodeKind::AttnHead || c.kind == NodeKind::Mlp) out.insert(c);
    return out;
  }

  std::set<EdgeRef> edge_set() const {
    std::set<EdgeRef> out;
    for (const auto& e : edges) out.insert(e.edge);
    return out;
  }
};

inline bool ranks_before(const ScoredEdge& a, const ScoredEdge& b) {
  const double x = std::abs(a.score), y = std::abs(b.score);
  if (x != y) return x > y;
  return a.edge < b.edge;
}

inline Circuit make_circuit(std::vector<ScoredEdge> edges) {
  std::sort(edges.begin(), edges.end(), ranks_before);
  return Circuit{std::move(edges)};
}

/// The k highest-|score| edges. When k exceeds the table size the whole
/// table is returned and `truncated` (if given) is set.
inline Circuit top_k(const AttributionTable& table, int k, bool* truncated = nullptr) {
  if (k < 1) throw ConfigError("top_k: k must be >= 1");
  std::vector<ScoredEdge> all;
  all.reserve(table.size());
  for (const auto& [e, s] : table.entries) all.push_back({e, s.mean});
  if (truncated) *truncated = static_cast<std::size_t>(k) > all.size();
  const std::size_t n = std::min<std::size_t>(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(), ranks_before);
  all.resize(n);
  return Circuit{std::move(all)};
}

/// Drops edges whose sender sits below `floor` (embed counts as layer -1).
/// A floor of 0 or less keeps everything.
inline AttributionTable apply_layer_floor(const AttributionTable& t, int floor) {
  if (floor <= 0) return t;
  AttributionTable out;
  out.provenance = t.provenance;
  for (const auto& en : t.entries) {
    const int l = en.first.sender.kind == NodeKind::Embed ? -1 : en.first.sender.layer;
    if (l >= floor) out.entries.push_back(en);
  }
  return out;
}

template <class K>
double jaccard(const std::set<K>& a, const std::set<K>& b) {
  if (a.empty() && b.empty()) throw UndefinedStatistic("jaccard of two empty sets");
  std::size_t inter = 0;
  for (const auto& x : a) inter += b.count(x);
  return static_cast<double>(inter) / static_cast<double>(a.size() + b.size() - inter);
}

enum class Grain { Edge, Node };

/// Jaccard overlap of the structural edge sets or of the node sets.
inline double iou(const Circuit& a, const Circuit& b, Grain grain) {
  if (a.empty() || b.empty()) throw ConfigError("iou: empty circuit");
  if (grain == Grain::Edge) return jaccard(a.structural(), b.structural());
  const auto na = a.nodes(), nb = b.nodes();
  if (na.empty() || nb.empty()) throw ConfigError("iou: circuit has no head or MLP nodes");
  return jaccard(na, nb);
}

struct LeTfSplit {
  Circuit le;
  Circuit tf_rate;
  Circuit tf_class;
};

/// le: rating-circuit edges whose structural image also occurs in the
/// classification circuit. tf_rate / tf_class: the two set differences.
inline LeTfSplit le_tf_decompose(const Circuit& rate, const Circuit& cls) {
  const auto sr = rate.structural();
  const auto sc = cls.structural();
  LeTfSplit out;
  for (const auto& e : rate.edges) (sc.count(structural(e.edge)) ? out.le : out.tf_rate).edges.push_back(e);
  for (const auto& e : cls.edges)
    if (!sr.count(structural(e.edge))) out.tf_class.edges.push_back(e);
  return out;
}

/// Senders of the circuit that are heads or MLPs.
inline std::set<Component> sender_components(const Circuit& c) {
  std::set<Component> out;
  for (const auto& e : c.edges)
    if (e.edge.sender.kind == NodeKind::AttnHead || e.edge.sender.kind == NodeKind::Mlp) out.insert(e.edge.sender);
  return out;
}

/// Layer participations of an edge: its sender's and its receiver's layer.
inline std::pair<int, int> edge_layers(const EdgeRef& e, const ModelSpec& spec) {
  return {component_layer(e.sender, spec), component_layer(e.receiver, spec)};
}

/// Median over all layer participations (two per edge).
template <class It>
double median_layer(It first, It last, const ModelSpec& spec) {
  std::vector<int> ls;
  for (auto it = first; it != last; ++it) {
    const auto [a, b] = edge_layers(*it, spec);
    ls.push_back(a);
    ls.push_back(b);
  }
  if (ls.empty()) throw UndefinedStatistic("median layer of an empty edge set");
  std::sort(ls.begin(), ls.end());
  const std::size_t n = ls.size();
  return n % 2 ? ls[n / 2] : 0.5 * (ls[n / 2 - 1] + ls[n / 2]);
}

inline double median_layer(const Circuit& c, const ModelSpec& spec) {
  std::vector<EdgeRef> es;
  for (const auto& e : c.edges) es.push_back(e.edge);
  return median_layer(es.begin(), es.end(), spec);
}

}  // namespace clens
