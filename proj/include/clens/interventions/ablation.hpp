#pragma once

#include "clens/attribution/peap.hpp"
#include "clens/error.hpp"
#include "clens/metrics.hpp"
#include "clens/model/forward.hpp"
#include "clens/tasks/dataset.hpp"
#include "clens/tasks/pairs.hpp"
#include "clens/util/parallel.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace clens {

/// Fraction of examples whose full-vocabulary argmax equals the target.
template <class T>
double suite_accuracy(const Weights<T>& w, const Dataset& data, const InterventionPlan<T>& plan = {},
                      int threads = 1) {
  if (data.empty()) throw ConfigError("accuracy of an empty suite");
  std::vector<int> hit(data.size(), 0);
  util::parallel_for(data.size(), threads, [&](std::size_t i) {
    hit[i] = argmax_token(forward_with_cache(w, data[i].tokens, plan).final_logits()) == data[i].target;
  });
  int n = 0;
  for (int h : hit) n += h;
  return static_cast<double>(n) / static_cast<double>(data.size());
}

struct SuiteDelta {
  double before = 0;
  double after = 0;
  double delta() const { return after - before; }
};

template <class T>
InterventionPlan<T> zero_plan(const std::set<Component>& components) {
  InterventionPlan<T> plan;
  for (const auto& c : components) plan.zero(c);
  return plan;
}

/// Accuracy of each suite with and without the components clamped to zero.
template <class T>
std::map<std::string, SuiteDelta> zero_ablate_eval(const Weights<T>& w, const std::set<Component>& components,
                                                   const std::map<std::string, Dataset>& suites, int threads = 1) {
  const auto plan = zero_plan<T>(components);
  std::map<std::string, SuiteDelta> out;
  for (const auto& [name, data] : suites) {
    auto& d = out[name];
    d.before = suite_accuracy(w, data, {}, threads);
    d.after = components.empty() ? d.before : suite_accuracy(w, data, plan, threads);
  }
  return out;
}

struct AblationStep {
  int edges = 0;
  double mean_ev = 0;
  double accuracy = 0;
};

/// Clean runs with the first n ranked edges carrying corrupted values, for
/// n = 0, step, 2 step, ..., |ranking|. Accuracy counts clean targets.
template <class T>
std::vector<AblationStep> iterative_ablation(const Weights<T>& w, const std::vector<MinimalPair>& pairs,
                                             const std::vector<EdgeRef>& ranking, const RatingScale& scale,
                                             int step = 1, int threads = 1) {
  if (pairs.empty()) throw ConfigError("iterative_ablation: no pairs");
  if (step < 1) throw ConfigError("iterative_ablation: step must be >= 1");
  std::vector<int> counts;
  for (std::size_t n = 0; n < ranking.size(); n += step) counts.push_back(static_cast<int>(n));
  counts.push_back(static_cast<int>(ranking.size()));
  std::vector<std::vector<double>> ev(counts.size(), std::vector<double>(pairs.size()));
  std::vector<std::vector<int>> hit(counts.size(), std::vector<int>(pairs.size()));
  util::parallel_for(pairs.size(), threads, [&](std::size_t j) {
    const auto runs = run_pair(w, pairs[j], scale);
    EdgePatchSet set;
    std::size_t added = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      for (; added < static_cast<std::size_t>(counts[i]); ++added) add_edge_patch(set, ranking[added], runs.length());
      const auto logits = set.empty() ? runs.clean.final_logits()
                                      : RowVec<T>(forward_with_cache(w, runs.clean.embed, {}, &set, &runs.corrupt)
                                                      .final_logits());
      ev[i][j] = static_cast<double>(expected_rating(logits, scale));
      hit[i][j] = argmax_token(logits) == pairs[j].clean.target;
    }
  });
  std::vector<AblationStep> out;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    AblationStep s;
    s.edges = counts[i];
    for (std::size_t j = 0; j < pairs.size(); ++j) {
      s.mean_ev += ev[i][j];
      s.accuracy += hit[i][j];
    }
    s.mean_ev /= static_cast<double>(pairs.size());
    s.accuracy /= static_cast<double>(pairs.size());
    out.push_back(s);
  }
  return out;
}

/// Largest single-step accuracy drop over the median step drop. Returns
/// +inf when the median drop is zero but some step drops.
inline double phase_transition_ratio(const std::vector<AblationStep>& traj) {
  if (traj.size() < 2) throw UndefinedStatistic("phase transition needs at least two steps");
  std::vector<double> drops;
  for (std::size_t i = 1; i < traj.size(); ++i) drops.push_back(std::max(0.0, traj[i - 1].accuracy - traj[i].accuracy));
  const double mx = *std::max_element(drops.begin(), drops.end());
  std::vector<double> sorted = drops;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const double med = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  if (med == 0) return mx > 0 ? std::numeric_limits<double>::infinity() : 0.0;
  return mx / med;
}

}  // namespace clens
