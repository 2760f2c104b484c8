#pragma once

#include "clens/attribution/edges.hpp"
#include "clens/attribution/table.hpp"
#include "clens/error.hpp"
#include "clens/metrics.hpp"
#include "clens/model/backward.hpp"
#include "clens/model/forward.hpp"
#include "clens/tasks/pairs.hpp"
#include "clens/util/parallel.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace clens {

struct PeapOptions {
  BackwardMode mode = BackwardMode::Gradient;
  RuleAssignment rules = RuleAssignment::relp();
  double min_gap = 0.05;
  /// Use this sign instead of sign(EV_clean - EV_corr).
  std::optional<int> polarity_override;
  /// Take gradients (and attention patterns) on the clean prompt instead of
  /// the corrupted one.
  bool clean_side_gradients = false;
};

/// Clean and corrupted forward passes of one pair.
template <class T>
struct PairRuns {
  ActivationCache<T> clean;
  ActivationCache<T> corrupt;
  double ev_clean = 0;
  double ev_corrupt = 0;
  int length() const { return clean.seq_len; }
};

template <class T>
PairRuns<T> run_pair(const Weights<T>& w, const Mat<T>& clean_in, const Mat<T>& corrupt_in,
                     const RatingScale& scale) {
  if (clean_in.rows() != corrupt_in.rows()) throw ConfigError("pair prompts differ in length");
  PairRuns<T> r;
  r.clean = forward_with_cache(w, clean_in);
  r.corrupt = forward_with_cache(w, corrupt_in);
  r.ev_clean = static_cast<double>(expected_rating(r.clean.final_logits(), scale));
  r.ev_corrupt = static_cast<double>(expected_rating(r.corrupt.final_logits(), scale));
  return r;
}

template <class T>
PairRuns<T> run_pair(const Weights<T>& w, const MinimalPair& p, const RatingScale& scale) {
  if (p.clean.tokens.size() != p.corrupt.tokens.size()) throw ConfigError("pair prompts differ in length");
  auto r = run_pair(w, embed_tokens(w, std::span<const int>(p.clean.tokens)),
                    embed_tokens(w, std::span<const int>(p.corrupt.tokens)), scale);
  r.clean.tokens = p.clean.tokens;
  r.corrupt.tokens = p.corrupt.tokens;
  return r;
}

/// Scores every edge of the universe for one pair:
///   residual  m * (S_clean - S_corr) . dR
///   cross     m * A[j,i] * (v_clean_i - v_corr_i) . dZ_j
/// dR, dZ and A come from the corrupted run unless clean-side gradients are
/// requested.
template <class T>
AttributionTable peap_scores(const Weights<T>& w, const PairRuns<T>& runs, const RatingScale& scale,
                             const PeapOptions& opt = {}) {
  const double gap = runs.ev_clean - runs.ev_corrupt;
  if (!std::isfinite(gap)) throw NumericError("non-finite EV on pair");
  if (opt.min_gap > 0 && std::abs(gap) < opt.min_gap)
    throw PairRejected("EV gap " + std::to_string(gap) + " below min_gap");
  int m = 0;
  if (opt.polarity_override) {
    m = *opt.polarity_override >= 0 ? 1 : -1;
  } else {
    m = polarity(runs.ev_clean, runs.ev_corrupt);
  }

  const auto& base = opt.clean_side_gradients ? runs.clean : runs.corrupt;
  const auto metric = ev_metric<T>(scale);
  const GradCache<T> g = opt.mode == BackwardMode::Gradient ? backward_gradients(w, base, metric)
                                                           : lrp_backward(w, base, metric, opt.rules);

  const ModelSpec& s = w.spec;
  const int T_ = runs.length();
  Topology topo(s);
  std::vector<Mat<T>> diff(topo.n_senders());
  for (int i = 0; i < topo.n_senders(); ++i) {
    const Component c = topo.at(i);
    diff[i] = runs.clean.output(c) - runs.corrupt.output(c);
  }

  AttributionTable out;
  out.provenance.mode = opt.mode;
  out.entries.reserve(static_cast<std::size_t>(universe_size(s, T_)));
  for (int r = 1; r < topo.n_components(); ++r) {
    const Component rc = topo.at(r);
    const Mat<T>& gr = g.read_grad(rc);
    for (int si = 0; si < topo.n_upstream(rc); ++si) {
      for (int p = 0; p < T_; ++p) {
        const double v = m * static_cast<double>(diff[si].row(p).dot(gr.row(p)));
        out.entries.push_back({EdgeRef::residual(topo.at(si), rc, p - T_), {v, 0.0, 1}});
      }
    }
  }
  for (int l = 0; l < s.n_layers; ++l) {
    for (int h = 0; h < s.n_heads; ++h) {
      const auto& hb = base.heads[l][h];
      const Mat<T> dv = runs.clean.heads[l][h].v - runs.corrupt.heads[l][h].v;
      const Mat<T>& dz = g.head_z[l][h];
      for (int j = 0; j < T_; ++j) {
        for (int i = 0; i <= j; ++i) {
          const double v = m * static_cast<double>(hb.pattern(j, i) * dv.row(i).dot(dz.row(j)));
          out.entries.push_back({EdgeRef::cross(l, h, i - T_, j - T_), {v, 0.0, 1}});
        }
      }
    }
  }
  for (const auto& [e, st] : out.entries)
    if (!std::isfinite(st.mean)) throw NumericError("non-finite score on edge " + to_string(e));
  out.sort();
  return out;
}

template <class T>
AttributionTable peap_pair_scores(const Weights<T>& w, const MinimalPair& p, const RatingScale& scale,
                                  const PeapOptions& opt = {}) {
  auto t = peap_scores(w, run_pair(w, p, scale), scale, opt);
  t.provenance.task = p.clean.task;
  return t;
}

/// Per-pair tables for a list of pairs. Rejected pairs are listed by index.
struct PairScoring {
  std::vector<AttributionTable> tables;
  std::vector<int> used;
  std::vector<int> rejected;
};

template <class T>
PairScoring score_pairs(const Weights<T>& w, const std::vector<MinimalPair>& pairs, const RatingScale& scale,
                        const PeapOptions& opt = {}, int threads = 1) {
  std::vector<std::optional<AttributionTable>> slots(pairs.size());
  util::parallel_for(pairs.size(), threads, [&](std::size_t i) {
    try {
      slots[i] = peap_pair_scores(w, pairs[i], scale, opt);
    } catch (const PairRejected&) {
    }
  });
  PairScoring out;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i]) {
      out.tables.push_back(std::move(*slots[i]));
      out.used.push_back(static_cast<int>(i));
    } else {
      out.rejected.push_back(static_cast<int>(i));
    }
  }
  return out;
}

/// EV of the run `base` with `edges` carrying the values they had in
/// `source`. Edges that do not exist at this length are ignored.
template <class T>
double patched_ev(const Weights<T>& w, const ActivationCache<T>& base, const ActivationCache<T>& source,
                  const std::vector<EdgeRef>& edges, const RatingScale& scale, bool recompute_pattern = false) {
  EdgePatchSet set;
  set.recompute_pattern = recompute_pattern;
  for (const auto& e : edges) add_edge_patch(set, e, base.seq_len);
  if (set.empty()) return static_cast<double>(expected_rating(base.final_logits(), scale));
  const auto c = forward_with_cache(w, base.embed, {}, &set, &source);
  return static_cast<double>(expected_rating(c.final_logits(), scale));
}

/// EV of the corrupted run with `edges` restored to their clean values.
template <class T>
double restored_ev(const Weights<T>& w, const PairRuns<T>& runs, const std::vector<EdgeRef>& edges,
                   const RatingScale& scale, bool recompute_pattern = false) {
  return patched_ev(w, runs.corrupt, runs.clean, edges, scale, recompute_pattern);
}

/// EV change from restoring a single edge to its clean value in the
/// corrupted run. For cross edges the attention pattern stays at the
/// corrupted run's value unless `recompute_pattern` is set.
template <class T>
double brute_force_edge_effect(const Weights<T>& w, const PairRuns<T>& runs, const EdgeRef& e,
                               const RatingScale& scale, bool recompute_pattern = false) {
  check_edge(e, w.spec);
  return restored_ev(w, runs, {e}, scale, recompute_pattern) - runs.ev_corrupt;
}

template <class T>
double brute_force_edge_effect(const Weights<T>& w, const MinimalPair& p, const EdgeRef& e,
                               const RatingScale& scale, bool recompute_pattern = false) {
  return brute_force_edge_effect(w, run_pair(w, p, scale), e, scale, recompute_pattern);
}

/// Corrupted input moved a fraction eps of the way from clean:
/// clean + eps (corrupt - clean), in embedding space.
template <class T>
Mat<T> interpolate_embeddings(const Mat<T>& clean, const Mat<T>& corrupt, T eps) {
  if (clean.rows() != corrupt.rows() || clean.cols() != corrupt.cols())
    throw ShapeError("interpolation endpoints differ in shape");
  return clean + eps * (corrupt - clean);
}

}  // namespace clens
