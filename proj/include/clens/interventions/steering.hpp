#pragma once

#include "clens/error.hpp"
#include "clens/metrics.hpp"
#include "clens/model/forward.hpp"
#include "clens/tasks/pairs.hpp"
#include "clens/util/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <random>
#include <vector>

namespace clens {

/// Oriented mean clean-minus-corrupt output per hook.
struct SteeringBundle {
  std::map<NodeRef, RowVec<double>> vectors;
  std::string source_task;
  int n_pairs = 0;

  double norm(const NodeRef& h) const { return vectors.at(h).norm(); }
};

/// v = mean over pairs of m * (a_clean - a_corr) at each hook, with m the
/// pair's polarity. Hooks must carry a position (negative = right-aligned).
template <class T>
SteeringBundle steering_vectors(const Weights<T>& w, const std::vector<MinimalPair>& pairs,
                                const std::vector<NodeRef>& hooks) {
  if (hooks.empty()) throw ConfigError("steering_vectors: no hooks");
  if (pairs.empty()) throw ConfigError("steering_vectors: no pairs");
  Topology topo(w.spec);
  SteeringBundle b;
  for (const auto& h : hooks) {
    topo.check(h.comp);
    if (!h.comp.is_sender()) throw ConfigError("steering hook must be a sender");
    if (!h.position) throw ConfigError("steering hook needs a position");
    b.vectors[h] = RowVec<double>::Zero(w.spec.d_model);
  }
  b.source_task = pairs.front().clean.task;
  b.n_pairs = static_cast<int>(pairs.size());
  for (const auto& p : pairs) {
    const auto c = forward_with_cache(w, p.clean.tokens);
    const auto r = forward_with_cache(w, p.corrupt.tokens);
    for (auto& [h, v] : b.vectors) {
      const RowVec<double> d = (c.contribution(h) - r.contribution(h)).template cast<double>();
      v += static_cast<double>(p.polarity) * d;
    }
  }
  for (auto& [h, v] : b.vectors) {
    v /= static_cast<double>(pairs.size());
    if (!v.allFinite()) throw NumericError("non-finite steering vector at " + to_string(h.comp));
  }
  return b;
}

struct SteerResult {
  double ev = 0;
  std::vector<double> distribution;  // over the rating scale
  RowVec<double> logits;
};

/// Forward pass with alpha * R v added at every hook (R = identity when
/// `rotation` is null). alpha = 0 runs the unmodified model.
template <class T>
SteerResult steer(const Weights<T>& w, const std::vector<int>& prompt, const SteeringBundle& bundle, double alpha,
                  const RatingScale& scale, const Eigen::MatrixXd* rotation = nullptr) {
  if (!std::isfinite(alpha)) throw ConfigError("steer: alpha must be finite");
  InterventionPlan<T> plan;
  if (alpha != 0) {
    for (const auto& [h, v] : bundle.vectors) {
      RowVec<double> vec = v;
      if (rotation) vec = (*rotation * v.transpose()).transpose();
      plan.add(h, vec.template cast<T>(), alpha);
    }
  }
  const auto logits = forward_with_cache(w, prompt, plan).final_logits();
  SteerResult r;
  r.logits = logits.template cast<double>();
  for (auto p : rating_distribution(logits, scale)) r.distribution.push_back(static_cast<double>(p));
  r.ev = static_cast<double>(expected_rating(logits, scale));
  return r;
}

/// Haar-distributed orthogonal matrix: QR of a standard-normal matrix with
/// the signs of R's diagonal folded into Q.
inline Eigen::MatrixXd haar_rotation(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd g(d, d);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) g(i, j) = nd(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < d; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

/// EV change (vs alpha = 0) when every steering vector is replaced by a
/// randomly rotated copy; one rotation per sample, shared by all hooks.
template <class T>
std::vector<double> random_rotation_control(const Weights<T>& w, const std::vector<int>& prompt,
                                            const SteeringBundle& bundle, double alpha, int n_samples,
                                            std::uint64_t seed, const RatingScale& scale) {
  if (n_samples < 1) throw ConfigError("random_rotation_control: n_samples must be >= 1");
  const double base = steer(w, prompt, bundle, 0.0, scale).ev;
  std::vector<double> out;
  for (int s = 0; s < n_samples; ++s) {
    std::mt19937_64 rng(util::derive_seed(seed, s));
    const auto R = haar_rotation(w.spec.d_model, rng);
    out.push_back(steer(w, prompt, bundle, alpha, scale, &R).ev - base);
  }
  return out;
}

/// Leading right singular vector of the column-centred matrix by power
/// iteration on X^T X.
inline Eigen::VectorXd pc1(const Eigen::MatrixXd& x, int max_iter = 100000, double tol = 1e-13) {
  if (x.rows() < 2) throw ConfigError("pc1: need at least two rows");
  const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
  const Eigen::MatrixXd cov = c.transpose() * c;
  if (!(cov.norm() > 0)) throw UndefinedStatistic("pc1: centred difference matrix is zero (rank deficient)");
  // start from the row with the largest norm, which is never orthogonal to
  // the whole row space
  Eigen::Index best = 0;
  c.rowwise().squaredNorm().maxCoeff(&best);
  Eigen::VectorXd v = c.row(best).transpose().normalized();
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd nv = cov * v;
    const double n = nv.norm();
    if (!(n > 0)) throw UndefinedStatistic("pc1: power iteration collapsed");
    nv /= n;
    if (nv.dot(v) < 0) nv = -nv;
    const double delta = (nv - v).norm();
    v = nv;
    if (delta < tol) break;
  }
  return v;
}

/// |cosine| between the PC1 directions of each task's difference matrix.
inline Eigen::MatrixXd pc1_overlap(const std::vector<Eigen::MatrixXd>& task_diffs) {
  if (task_diffs.size() < 2) throw ConfigError("pc1_overlap: need at least two tasks");
  std::vector<Eigen::VectorXd> pcs;
  for (const auto& d : task_diffs) {
    if (d.rows() < 2) throw ConfigError("pc1_overlap: need at least two pairs per task");
    if (d.cols() != task_diffs.front().cols()) throw ShapeError("pc1_overlap: width mismatch");
    pcs.push_back(pc1(d));
  }
  const auto n = static_cast<Eigen::Index>(pcs.size());
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) out(i, j) = std::abs(pcs[i].dot(pcs[j]));
  return out;
}

/// Per-pair clean-minus-corrupt outputs at one hook, one row per pair.
template <class T>
Eigen::MatrixXd difference_matrix(const Weights<T>& w, const std::vector<MinimalPair>& pairs, const NodeRef& hook) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(pairs.size()), w.spec.d_model);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const auto c = forward_with_cache(w, pairs[i].clean.tokens);
    const auto r = forward_with_cache(w, pairs[i].corrupt.tokens);
    out.row(static_cast<Eigen::Index>(i)) = (c.contribution(hook) - r.contribution(hook)).template cast<double>();
  }
  return out;
}

}  // namespace clens
