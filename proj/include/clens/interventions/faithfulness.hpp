#pragma once

#include "clens/attribution/peap.hpp"
#include "clens/circuits/circuit.hpp"
#include "clens/circuits/reliability.hpp"
#include "clens/error.hpp"
#include "clens/util/parallel.hpp"
#include "clens/util/rng.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

namespace clens {

struct FaithPoint {
  int k = 0;
  double median = 0;
  double mean = 0;
  double ci_low = 0;
  double ci_high = 0;
  int used = 0;
  int skipped = 0;
};

struct FaithfulnessCurve {
  std::vector<FaithPoint> points;
  double min_gap = 0.05;
  int total = 0;
  /// per_pair[i][j]: recovery of used pair j at k_grid[i].
  std::vector<std::vector<double>> per_pair;
};

struct FaithOptions {
  double min_gap = 0.05;
  int bootstrap = 1000;
  std::uint64_t seed = 0;
  int threads = 1;
};

inline double median_of(std::vector<double> xs) {
  if (xs.empty()) throw UndefinedStatistic("median of an empty sample");
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

/// Percentile-bootstrap 95% interval of the median.
inline std::pair<double, double> bootstrap_median_ci(const std::vector<double>& xs, int resamples,
                                                     std::uint64_t seed) {
  if (xs.empty()) throw UndefinedStatistic("bootstrap of an empty sample");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, xs.size() - 1);
  std::vector<double> meds(resamples);
  std::vector<double> buf(xs.size());
  for (int r = 0; r < resamples; ++r) {
    for (auto& b : buf) b = xs[pick(rng)];
    meds[r] = median_of(buf);
  }
  return {quantile(meds, 0.025), quantile(meds, 0.975)};
}

inline std::vector<EdgeRef> ranked_edges(const Circuit& c) {
  std::vector<EdgeRef> out;
  out.reserve(c.size());
  for (const auto& e : c.edges) out.push_back(e.edge);
  return out;
}

/// Uniformly shuffled edge order, the random-edge baseline ranking.
inline std::vector<EdgeRef> random_ranking(std::vector<EdgeRef> edges, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(edges.begin(), edges.end(), rng);
  return edges;
}

/// Restores the first k ranked edges to their clean values in each
/// corrupted run and reports the recovered fraction of the EV gap per pair.
/// Pairs with |gap| < min_gap are skipped at every k.
template <class T>
FaithfulnessCurve faithfulness_curve(const Weights<T>& w, const std::vector<PairRuns<T>>& runs,
                                     const std::vector<EdgeRef>& ranking, const std::vector<int>& k_grid,
                                     const RatingScale& scale, const FaithOptions& opt = {}) {
  if (!(opt.min_gap > 0)) throw ConfigError("faithfulness: min_gap must be > 0");
  for (std::size_t i = 0; i < k_grid.size(); ++i) {
    if (k_grid[i] < 0) throw ConfigError("faithfulness: negative k");
    if (i > 0 && k_grid[i] <= k_grid[i - 1]) throw ConfigError("faithfulness: k grid must be strictly increasing");
  }
  std::vector<std::size_t> used;
  for (std::size_t i = 0; i < runs.size(); ++i)
    if (std::abs(runs[i].ev_clean - runs[i].ev_corrupt) >= opt.min_gap) used.push_back(i);
  if (used.empty()) throw PairRejected("faithfulness: every pair fell below min_gap");

  FaithfulnessCurve out;
  out.min_gap = opt.min_gap;
  out.total = static_cast<int>(runs.size());
  out.per_pair.assign(k_grid.size(), std::vector<double>(used.size()));
  util::parallel_for(used.size(), opt.threads, [&](std::size_t j) {
    const auto& r = runs[used[j]];
    const double gap = r.ev_clean - r.ev_corrupt;
    for (std::size_t i = 0; i < k_grid.size(); ++i) {
      const std::size_t k = std::min<std::size_t>(k_grid[i], ranking.size());
      const std::vector<EdgeRef> top(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(k));
      out.per_pair[i][j] = (restored_ev(w, r, top, scale) - r.ev_corrupt) / gap;
    }
  });
  for (std::size_t i = 0; i < k_grid.size(); ++i) {
    FaithPoint p;
    p.k = k_grid[i];
    p.used = static_cast<int>(used.size());
    p.skipped = out.total - p.used;
    p.median = median_of(out.per_pair[i]);
    p.mean = mean_of(out.per_pair[i]);
    std::tie(p.ci_low, p.ci_high) = bootstrap_median_ci(out.per_pair[i], opt.bootstrap, util::derive_seed(opt.seed, i));
    out.points.push_back(p);
  }
  return out;
}

struct PooledPoint {
  int k = 0;
  double value = 0;
};

/// sum_i m_i (EV_i(k) - EV_i,corr) / sum_i |EV_i,clean - EV_i,corr| with
/// m_i = sign(EV_clean - EV_corr); no gap filter.
template <class T>
std::vector<PooledPoint> pooled_faithfulness(const Weights<T>& w, const std::vector<PairRuns<T>>& runs,
                                             const std::vector<EdgeRef>& ranking, const std::vector<int>& k_grid,
                                             const RatingScale& scale, int threads = 1) {
  double denom = 0;
  for (const auto& r : runs) denom += std::abs(r.ev_clean - r.ev_corrupt);
  if (!(denom > 0)) throw UndefinedStatistic("pooled faithfulness: zero total EV gap");
  std::vector<std::vector<double>> num(k_grid.size(), std::vector<double>(runs.size(), 0.0));
  util::parallel_for(runs.size(), threads, [&](std::size_t j) {
    const auto& r = runs[j];
    const double gap = r.ev_clean - r.ev_corrupt;
    if (gap == 0) return;
    const double m = gap > 0 ? 1.0 : -1.0;
    for (std::size_t i = 0; i < k_grid.size(); ++i) {
      const std::size_t k = std::min<std::size_t>(k_grid[i], ranking.size());
      const std::vector<EdgeRef> top(ranking.begin(), ranking.begin() + static_cast<std::ptrdiff_t>(k));
      num[i][j] = m * (restored_ev(w, r, top, scale) - r.ev_corrupt);
    }
  });
  std::vector<PooledPoint> out;
  for (std::size_t i = 0; i < k_grid.size(); ++i) {
    double s = 0;
    for (double v : num[i]) s += v;
    out.push_back({k_grid[i], s / denom});
  }
  return out;
}

}  // namespace clens
