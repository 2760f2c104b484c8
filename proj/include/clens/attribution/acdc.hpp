#pragma once

#include "clens/attribution/edges.hpp"
#include "clens/attribution/peap.hpp"
#include "clens/circuits/circuit.hpp"
#include "clens/error.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace clens {

/// Edges in the order a reverse-topological sweep visits them: receivers
/// from the logits downwards; within a head, its cross edges before its
/// residual inputs; later senders and positions first.
inline std::vector<EdgeRef> reverse_topological(std::vector<EdgeRef> edges, const ModelSpec& spec) {
  Topology topo(spec);
  auto key = [&](const EdgeRef& e) {
    return std::make_tuple(topo.index(e.receiver), e.kind == EdgeKind::AttnCross ? 1 : 0,
                           e.kind == EdgeKind::Residual ? topo.index(e.sender) : 0, e.dst, e.src);
  };
  std::sort(edges.begin(), edges.end(), [&](const EdgeRef& a, const EdgeRef& b) { return key(a) > key(b); });
  return edges;
}

struct AcdcOptions {
  /// Edges to consider. Empty means the full universe of the first pair's
  /// length. Edges outside this list are never corrupted.
  std::vector<EdgeRef> candidates;
  bool recompute_pattern = false;
};

/// Simplified ACDC. Starting from the clean runs, each candidate edge is
/// tentatively switched to its corrupted value; it stays switched (pruned)
/// when the mean EV over pairs moves by less than tau. The surviving edges
/// form the circuit, scored by the EV change their removal would have caused.
template <class T>
Circuit acdc_prune(const Weights<T>& w, const std::vector<PairRuns<T>>& pairs, const RatingScale& scale, double tau,
                   const AcdcOptions& opt = {}) {
  if (!(tau >= 0)) throw ConfigError("acdc_prune: tau must be >= 0");
  if (pairs.empty()) throw ConfigError("acdc_prune: no pairs");
  std::vector<EdgeRef> cand = opt.candidates.empty() ? edge_universe(w.spec, pairs.front().length()) : opt.candidates;
  for (const auto& e : cand) check_edge(e, w.spec);
  cand = reverse_topological(std::move(cand), w.spec);

  std::vector<EdgeRef> pruned;
  auto metric = [&](const std::vector<EdgeRef>& removed) {
    double s = 0;
    for (const auto& p : pairs)
      s += patched_ev(w, p.clean, p.corrupt, removed, scale, opt.recompute_pattern);
    return s / static_cast<double>(pairs.size());
  };
  double current = metric(pruned);
  std::vector<ScoredEdge> kept;
  for (const auto& e : cand) {
    if (std::isinf(tau)) {
      pruned.push_back(e);
      continue;
    }
    pruned.push_back(e);
    const double next = metric(pruned);
    if (std::abs(next - current) < tau) {
      current = next;
    } else {
      pruned.pop_back();
      kept.push_back({e, next - current});
    }
  }
  return make_circuit(std::move(kept));
}

}  // namespace clens
