#pragma once

#include "clens/error.hpp"
#include "clens/model/cache.hpp"
#include "clens/model/forward.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace clens {

struct LensToken {
  int token = -1;
  double logit = 0;
  double prob = 0;
};

struct LensResult {
  std::vector<LensToken> top;
  std::vector<double> target_probs;  // full-vocabulary softmax, target order
  double target_mass = 0;
  double ratio = 0;                  // max / min over targets
};

/// Residual stream right after `node` has written (the logits node reads
/// the final residual). Position defaults to the last token.
template <class T>
RowVec<T> residual_after(const ActivationCache<T>& c, const NodeRef& node) {
  const int p = resolve_position(node.position.value_or(-1), c.seq_len);
  switch (node.comp.kind) {
    case NodeKind::Logits: return c.final_input.row(p);
    case NodeKind::Embed: return c.embed.row(p);
    default: return c.read_input(node.comp).row(p) + c.output(node.comp).row(p);
  }
}

/// Projects a residual snapshot through the final LayerNorm (optional) and
/// the unembedding.
template <class T>
LensResult logit_lens(const Weights<T>& w, const ActivationCache<T>& c, const NodeRef& node,
                      const std::vector<int>& targets, int top_k = 5, bool apply_ln = true) {
  Topology(w.spec).check(node.comp);
  const Mat<T> x = residual_after(c, node);
  Mat<T> h = x;
  if (apply_ln) {
    LnState<T> st;
    ops::layer_norm(x, w.lnf_g, w.lnf_b, w.spec.ln_epsilon, st, h);
  }
  const RowVec<double> logits = (h * w.w_u).template cast<double>();
  const double mx = logits.maxCoeff();
  const RowVec<double> e = (logits.array() - mx).exp();
  const double z = e.sum();
  std::vector<int> idx(logits.size());
  std::iota(idx.begin(), idx.end(), 0);
  const int k = std::min<int>(top_k, static_cast<int>(idx.size()));
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    return logits(a) != logits(b) ? logits(a) > logits(b) : a < b;
  });
  LensResult r;
  for (int i = 0; i < k; ++i) r.top.push_back({idx[i], logits(idx[i]), e(idx[i]) / z});
  for (int t : targets) {
    if (t < 0 || t >= logits.size()) throw ConfigError("logit lens target outside vocabulary");
    r.target_probs.push_back(e(t) / z);
    r.target_mass += e(t) / z;
  }
  if (!r.target_probs.empty()) {
    const auto [mn, mxp] = std::minmax_element(r.target_probs.begin(), r.target_probs.end());
    r.ratio = *mn > 0 ? *mxp / *mn : std::numeric_limits<double>::infinity();
  }
  return r;
}

}  // namespace clens
