#pragma once

#include "clens/attribution/table.hpp"
#include "clens/circuits/circuit.hpp"
#include "clens/error.hpp"
#include "clens/util/parallel.hpp"
#include "clens/util/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <vector>

namespace clens {

/// Linear-interpolation quantile of a sample (the common "type 7" rule).
inline double quantile(std::vector<double> xs, double q) {
  if (xs.empty()) throw UndefinedStatistic("quantile of an empty sample");
  if (q < 0 || q > 1) throw ConfigError("quantile must lie in [0, 1]");
  std::sort(xs.begin(), xs.end());
  const double h = q * static_cast<double>(xs.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, xs.size() - 1);
  return xs[lo] + (h - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

inline double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) throw UndefinedStatistic("mean of an empty sample");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

/// Sample standard deviation; 0 for a single value.
inline double sd_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

inline double spearman_brown(double r) { return 2 * r / (1 + r); }

struct NullDistribution {
  std::vector<double> samples;
  double q = 0.99;
  double value = 0;  // the q-quantile
  double mean = 0;
};

/// IoU between independent uniform size-k subsets of two pools. `project`
/// maps a pool element to the key compared by the Jaccard index, so the
/// same routine serves positional and structural nulls.
template <class K, class Key = K>
NullDistribution permutation_null(
    const std::vector<K>& pool_a, const std::vector<K>& pool_b, int k, int samples, double q, std::uint64_t seed,
    const std::function<Key(const K&)>& project = [](const K& x) { return x; }, int threads = 1) {
  if (k < 1) throw ConfigError("permutation_null: k must be >= 1");
  if (samples < 1) throw ConfigError("permutation_null: need at least one sample");
  if (pool_a.size() < static_cast<std::size_t>(k) || pool_b.size() < static_cast<std::size_t>(k))
    throw ConfigError("permutation_null: pool smaller than k");
  NullDistribution out;
  out.q = q;
  out.samples.assign(samples, 0.0);
  util::parallel_for(static_cast<std::size_t>(samples), threads, [&](std::size_t s) {
    std::mt19937_64 rng(util::derive_seed(seed, s));
    std::set<Key> a, b;
    for (auto i : util::sample_indices(pool_a.size(), k, rng)) a.insert(project(pool_a[i]));
    for (auto i : util::sample_indices(pool_b.size(), k, rng)) b.insert(project(pool_b[i]));
    out.samples[s] = jaccard(a, b);
  });
  out.value = quantile(out.samples, q);
  out.mean = mean_of(out.samples);
  return out;
}

/// Null for structural IoU of top-k circuits: random size-k positional
/// edge subsets of each universe, compared after dropping positions.
inline NullDistribution structural_null(const std::vector<EdgeRef>& pool_a, const std::vector<EdgeRef>& pool_b,
                                        int k, int samples, double q, std::uint64_t seed, int threads = 1) {
  return permutation_null<EdgeRef, StructuralEdge>(
      pool_a, pool_b, k, samples, q, seed, [](const EdgeRef& e) { return structural(e); }, threads);
}

struct SplitHalfOptions {
  int n_partitions = 10;
  bool spearman_brown = false;
  int layer_floor = 0;
  /// Fraction of a half's pairs an edge must appear in.
  double min_pairs_fraction = 0.25;
  int threads = 1;
};

struct SplitHalfResult {
  std::vector<double> iou;  // per partition, corrected when requested
  double mean = 0;
  double sd = 0;
};

/// Edge IoU of the top-k circuits aggregated over two index sets.
inline double split_half_iou(const std::vector<AttributionTable>& tables, const std::vector<std::size_t>& half_a,
                             const std::vector<std::size_t>& half_b, int k, const SplitHalfOptions& opt = {}) {
  auto circuit_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<AttributionTable> sub;
    sub.reserve(idx.size());
    for (auto i : idx) sub.push_back(tables.at(i));
    const int min_pairs = std::max(1, static_cast<int>(opt.min_pairs_fraction * static_cast<double>(idx.size())));
    return top_k(apply_layer_floor(aggregate(sub, min_pairs), opt.layer_floor), k);
  };
  const double r = iou(circuit_of(half_a), circuit_of(half_b), Grain::Edge);
  return opt.spearman_brown ? spearman_brown(r) : r;
}

/// Reliability of circuit discovery: random disjoint halves of the per-pair
/// tables, repeated `n_partitions` times with seeds derived from `seed`.
inline SplitHalfResult split_half(const std::vector<AttributionTable>& tables, int k, std::uint64_t seed,
                                  const SplitHalfOptions& opt = {}) {
  if (tables.size() < 4) throw ConfigError("split_half: need at least 4 pairs");
  if (opt.n_partitions < 1) throw ConfigError("split_half: n_partitions must be >= 1");
  SplitHalfResult out;
  out.iou.assign(opt.n_partitions, 0.0);
  util::parallel_for(static_cast<std::size_t>(opt.n_partitions), opt.threads, [&](std::size_t p) {
    std::mt19937_64 rng(util::derive_seed(seed, p));
    std::vector<std::size_t> idx(tables.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t h = idx.size() / 2;
    std::vector<std::size_t> a(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(h));
    std::vector<std::size_t> b(idx.begin() + static_cast<std::ptrdiff_t>(h),
                               idx.begin() + static_cast<std::ptrdiff_t>(2 * h));
    out.iou[p] = split_half_iou(tables, a, b, k, opt);
  });
  out.mean = mean_of(out.iou);
  out.sd = sd_of(out.iou);
  return out;
}

}  // namespace clens
