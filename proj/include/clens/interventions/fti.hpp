#pragma once

#include "clens/error.hpp"
#include "clens/metrics.hpp"
#include "clens/model/forward.hpp"
#include "clens/tasks/pairs.hpp"
#include "clens/tasks/task_spec.hpp"
#include "clens/util/parallel.hpp"

#include <cmath>
#include <set>
#include <vector>

namespace clens {

/// Source: a rating prompt whose evaluator activations are captured.
/// Target: a length-matched classification prompt that receives them.
struct FtiInstance {
  std::vector<int> source;
  std::vector<int> target;
};

struct FtiRecord {
  double source_ev = 0;
  int base_argmax = -1;     // over the label union
  int patched_argmax = -1;
  double base_positive = 0;     // full-vocabulary probability mass on positive labels
  double patched_positive = 0;
  int patched_top_token = -1;   // full-vocabulary argmax after patching
  bool included = false;
  bool flipped = false;
};

struct FtiReport {
  std::vector<FtiRecord> records;
  int candidates = 0;
  int n = 0;                 // after the inclusion filter
  int flips = 0;
  int out_of_label = 0;      // included instances whose patched top token is not a label
  double base_mean = 0, base_sd = 0;
  double patched_mean = 0, patched_sd = 0;
  double flip_rate() const { return n > 0 ? static_cast<double>(flips) / n : 0.0; }
};

/// Every rating pair yields one instance: its higher-rated prompt is the
/// source, its lower-rated prompt in classification format the target.
inline std::vector<FtiInstance> fti_instances(const TaskSpec& spec, const std::vector<MinimalPair>& pairs) {
  std::vector<FtiInstance> out;
  for (const auto& p : pairs) {
    const auto& hi = p.polarity > 0 ? p.clean : p.corrupt;
    const auto& lo = p.polarity > 0 ? p.corrupt : p.clean;
    out.push_back({reformat(spec, hi, Format::Rating).tokens, reformat(spec, lo, Format::Classification).tokens});
  }
  return out;
}

/// Plan overwriting `nodes` at every position with the source run's outputs.
template <class T>
InterventionPlan<T> transfer_plan(const ActivationCache<T>& source, const std::set<Component>& nodes) {
  InterventionPlan<T> plan;
  for (const auto& c : nodes) {
    const auto& out = source.output(c);
    for (int p = 0; p < source.seq_len; ++p) plan.patch(NodeRef{c, p}, out.row(p));
  }
  return plan;
}

/// Format transfer injection. An instance is included when the source EV
/// exceeds `min_source_ev` and the target's unpatched label argmax is not
/// positive. A flip is a patched label argmax inside the positive set.
template <class T>
FtiReport fti(const Weights<T>& w, const std::vector<FtiInstance>& instances, const std::set<Component>& nodes,
              const LabelSet& labels, const RatingScale& scale, double min_source_ev = 4.0, int threads = 1) {
  labels.validate();
  for (const auto& c : nodes)
    if (!c.is_sender() || c.kind == NodeKind::Embed) throw ConfigError("FTI nodes must be heads or MLPs");
  FtiReport rep;
  rep.candidates = static_cast<int>(instances.size());
  rep.records.resize(instances.size());
  const auto label_tokens = labels.all();
  util::parallel_for(instances.size(), threads, [&](std::size_t i) {
    const auto& in = instances[i];
    if (in.source.size() != in.target.size()) throw ConfigError("FTI source and target must be length-matched");
    auto& r = rep.records[i];
    const auto src = forward_with_cache(w, in.source);
    r.source_ev = static_cast<double>(expected_rating(src.final_logits(), scale));
    const auto base = forward_with_cache(w, in.target).final_logits();
    const auto bp = label_probability(base, labels);
    r.base_argmax = bp.argmax;
    r.base_positive = bp.positive_mass();
    const RowVec<T> patched =
        nodes.empty() ? base : RowVec<T>(forward_with_cache(w, in.target, transfer_plan(src, nodes)).final_logits());
    const auto pp = label_probability(patched, labels);
    r.patched_argmax = pp.argmax;
    r.patched_positive = pp.positive_mass();
    r.patched_top_token = argmax_token(patched);
    r.included = r.source_ev > min_source_ev && !labels.is_positive(r.base_argmax);
    r.flipped = r.included && labels.is_positive(r.patched_argmax);
  });
  std::vector<double> b, p;
  for (const auto& r : rep.records) {
    if (!r.included) continue;
    ++rep.n;
    rep.flips += r.flipped ? 1 : 0;
    if (std::find(label_tokens.begin(), label_tokens.end(), r.patched_top_token) == label_tokens.end())
      ++rep.out_of_label;
    b.push_back(r.base_positive);
    p.push_back(r.patched_positive);
  }
  auto stats = [](const std::vector<double>& xs, double& mean, double& sd) {
    if (xs.empty()) return;
    mean = 0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    sd = 0;
    if (xs.size() > 1) {
      for (double x : xs) sd += (x - mean) * (x - mean);
      sd = std::sqrt(sd / static_cast<double>(xs.size() - 1));
    }
  };
  stats(b, rep.base_mean, rep.base_sd);
  stats(p, rep.patched_mean, rep.patched_sd);
  return rep;
}

}  // namespace clens
