#pragma once

#include "clens/error.hpp"
#include "clens/model/intervention.hpp"
#include "clens/model/nodes.hpp"
#include "clens/model/spec.hpp"

#include <algorithm>
#include <climits>
#include <compare>
#include <string>
#include <tuple>
#include <vector>

namespace clens {

enum class EdgeKind : std::uint8_t { Residual = 0, AttnCross = 1 };

inline std::string to_string(EdgeKind k) { return k == EdgeKind::Residual ? "residual" : "cross"; }

inline EdgeKind edge_kind_from_string(const std::string& s) {
  if (s == "residual") return EdgeKind::Residual;
  if (s == "cross") return EdgeKind::AttnCross;
  throw ConfigError("unknown edge kind '" + s + "'");
}

/// One edge of the attribution graph. Positions are right-aligned (the
/// final token is -1).
///
/// Residual: sender output -> receiver read point at position src == dst.
/// AttnCross: value at src -> head output at dst of the head stored in both
/// `sender` and `receiver`.
struct EdgeRef {
  EdgeKind kind = EdgeKind::Residual;
  Component sender;
  Component receiver;
  int src = -1;
  int dst = -1;

  static EdgeRef residual(Component s, Component r, int pos) {
    return {EdgeKind::Residual, s, r, pos, pos};
  }
  static EdgeRef cross(int layer, int head, int src, int dst) {
    const auto h = Component::attn(layer, head);
    return {EdgeKind::AttnCross, h, h, src, dst};
  }

  int layer() const { return receiver.kind == NodeKind::Logits ? INT_MAX : receiver.layer; }
  int head() const { return receiver.head; }

  /// Ordering used for storage and for breaking score ties: (layer, head,
  /// position), then the remaining fields.
  auto key() const {
    return std::make_tuple(layer(), head(), dst, src, kind, receiver.kind, sender.kind, sender.layer,
                           sender.head);
  }
  friend bool operator<(const EdgeRef& a, const EdgeRef& b) { return a.key() < b.key(); }
  friend bool operator==(const EdgeRef& a, const EdgeRef& b) { return a.key() == b.key(); }
};

/// Position-free image of an edge.
struct StructuralEdge {
  EdgeKind kind = EdgeKind::Residual;
  Component sender;
  Component receiver;
  auto operator<=>(const StructuralEdge&) const = default;
};

inline StructuralEdge structural(const EdgeRef& e) { return {e.kind, e.sender, e.receiver}; }

inline std::string to_string(const EdgeRef& e) {
  if (e.kind == EdgeKind::Residual)
    return to_string(e.sender) + "->" + to_string(e.receiver) + "@" + std::to_string(e.dst);
  return to_string(e.sender) + ":v" + std::to_string(e.src) + "->z" + std::to_string(e.dst);
}

inline std::string to_string(const StructuralEdge& e) {
  if (e.kind == EdgeKind::Residual) return to_string(e.sender) + "->" + to_string(e.receiver);
  return to_string(e.sender) + ":v->z";
}

/// Number of (sender, receiver) residual pairs in one position slice.
inline long long residual_pairs_per_position(const ModelSpec& s) {
  const long long H = s.n_heads, L = s.n_layers;
  // heads of layer l read 1 + l(H+1) senders, the MLP of layer l reads H more,
  // the logits read everything.
  long long n = 0;
  for (long long l = 0; l < L; ++l) n += H * (1 + l * (H + 1)) + (1 + l * (H + 1) + H);
  return n + 1 + L * (H + 1);
}

/// Closed-form universe size for a sequence of length T.
inline long long universe_size(const ModelSpec& s, int T) {
  const long long t = T;
  return residual_pairs_per_position(s) * t + static_cast<long long>(s.n_layers) * s.n_heads * t * (t + 1) / 2;
}

/// Every residual and cross edge of a length-T sequence, in storage order.
inline std::vector<EdgeRef> edge_universe(const ModelSpec& s, int T) {
  if (T < 1) throw ConfigError("edge universe needs a positive length");
  Topology topo(s);
  std::vector<EdgeRef> out;
  out.reserve(static_cast<std::size_t>(universe_size(s, T)));
  for (int r = 1; r < topo.n_components(); ++r) {
    const Component rc = topo.at(r);
    for (int p = 0; p < T; ++p)
      for (int si = 0; si < topo.n_upstream(rc); ++si)
        out.push_back(EdgeRef::residual(topo.at(si), rc, p - T));
  }
  for (int l = 0; l < s.n_layers; ++l)
    for (int h = 0; h < s.n_heads; ++h)
      for (int j = 0; j < T; ++j)
        for (int i = 0; i <= j; ++i) out.push_back(EdgeRef::cross(l, h, i - T, j - T));
  std::sort(out.begin(), out.end());
  return out;
}

inline void check_edge(const EdgeRef& e, const ModelSpec& s) {
  Topology topo(s);
  topo.check(e.sender);
  topo.check(e.receiver);
  if (e.kind == EdgeKind::Residual) {
    if (!topo.upstream(e.sender, e.receiver))
      throw ConfigError("residual edge sender must be strictly upstream of its receiver");
    if (e.src != e.dst) throw ConfigError("residual edge must stay at one position");
  } else {
    if (e.sender.kind != NodeKind::AttnHead || e.sender != e.receiver)
      throw ConfigError("cross edge must name a single attention head");
    if (e.src > e.dst) throw ConfigError("cross edge violates the causal mask (src > dst)");
  }
  if (e.dst >= 0 || e.src >= 0) throw ConfigError("edge positions must be right-aligned (negative)");
}

/// Absolute position of a right-aligned index, or -1 when the sequence is
/// too short to contain it.
inline int absolute_position(int aligned, int T) {
  const int p = T + aligned;
  return p < 0 ? -1 : p;
}

/// Adds the restoration of `e` to a patch set for a length-T run. Returns
/// false when the edge does not exist at this length.
inline bool add_edge_patch(EdgePatchSet& set, const EdgeRef& e, int T) {
  const int src = absolute_position(e.src, T);
  const int dst = absolute_position(e.dst, T);
  if (src < 0 || dst < 0) return false;
  if (e.kind == EdgeKind::Residual) {
    set.residual.push_back({e.sender, e.receiver, dst});
  } else {
    set.cross.push_back({e.sender.layer, e.sender.head, src, dst});
  }
  return true;
}

}  // namespace clens
