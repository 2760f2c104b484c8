#pragma once

#include "clens/error.hpp"
#include "clens/model/backward.hpp"
#include "clens/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <vector>

namespace clens {

/// Rating tokens in ascending rating order; tokens[r-1] stands for rating r.
struct RatingScale {
  std::vector<int> tokens;

  RatingScale() = default;
  explicit RatingScale(std::vector<int> t) : tokens(std::move(t)) { validate(); }

  int upper() const { return static_cast<int>(tokens.size()); }

  void validate() const {
    if (tokens.size() < 2) throw ConfigError("rating scale needs at least two tokens");
    if (std::set<int>(tokens.begin(), tokens.end()).size() != tokens.size())
      throw ConfigError("rating scale tokens must be distinct");
  }
};

struct LabelSet {
  std::vector<int> positive;
  std::vector<int> negative;

  void validate() const {
    if (positive.empty() || negative.empty()) throw ConfigError("label sets must be nonempty");
    for (int p : positive)
      if (std::find(negative.begin(), negative.end(), p) != negative.end())
        throw ConfigError("positive and negative label sets overlap");
  }

  std::vector<int> all() const {
    std::vector<int> u = positive;
    u.insert(u.end(), negative.begin(), negative.end());
    return u;
  }

  bool is_positive(int token) const {
    return std::find(positive.begin(), positive.end(), token) != positive.end();
  }
};

namespace detail {

template <class T>
void check_logits(const RowVec<T>& logits) {
  for (Eigen::Index i = 0; i < logits.size(); ++i)
    if (std::isnan(logits(i)) || logits(i) == std::numeric_limits<T>::infinity())
      throw NumericError("non-finite logits");
}

/// Softmax over a subset of logits; -inf entries get zero mass.
template <class T>
std::vector<T> subset_softmax(const RowVec<T>& logits, std::span<const int> tokens) {
  T mx = -std::numeric_limits<T>::infinity();
  for (int t : tokens) mx = std::max(mx, logits(t));
  if (!std::isfinite(mx)) throw NumericError("all rating logits are -inf");
  std::vector<T> p(tokens.size());
  T sum = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    p[i] = std::exp(logits(tokens[i]) - mx);
    sum += p[i];
  }
  for (auto& x : p) x /= sum;
  return p;
}

}  // namespace detail

/// Rating distribution renormalised over the scale's tokens.
template <class T>
std::vector<T> rating_distribution(const RowVec<T>& logits, const RatingScale& scale) {
  detail::check_logits(logits);
  return detail::subset_softmax(logits, std::span<const int>(scale.tokens));
}

/// sum_r r * P(rating = r), in [1, s].
template <class T>
T expected_rating(const RowVec<T>& logits, const RatingScale& scale) {
  const auto p = rating_distribution(logits, scale);
  T ev = 0;
  for (std::size_t r = 0; r < p.size(); ++r) ev += static_cast<T>(r + 1) * p[r];
  return ev;
}

/// Expected rating as a differentiable metric: dEV/dlogit_r = p_r (r - EV).
template <class T>
Metric<T> ev_metric(const RatingScale& scale) {
  return [scale](const RowVec<T>& logits, RowVec<T>* grad) {
    const auto p = rating_distribution(logits, scale);
    T ev = 0;
    for (std::size_t r = 0; r < p.size(); ++r) ev += static_cast<T>(r + 1) * p[r];
    if (grad) {
      *grad = RowVec<T>::Zero(logits.size());
      for (std::size_t r = 0; r < p.size(); ++r)
        (*grad)(scale.tokens[r]) = p[r] * (static_cast<T>(r + 1) - ev);
    }
    return ev;
  };
}

/// sign(ev_clean - ev_corr). A zero gap means the pair has no direction and
/// must be excluded by the caller.
inline int polarity(double ev_clean, double ev_corr) {
  const double gap = ev_clean - ev_corr;
  if (gap == 0.0 || std::isnan(gap)) throw UndefinedStatistic("zero EV gap: pair has no polarity");
  return gap > 0 ? 1 : -1;
}

/// Rating argmax; ties go to the lowest rating.
template <class T>
int argmax_rating(const RowVec<T>& logits, const RatingScale& scale) {
  int best = 0;
  for (int r = 1; r < scale.upper(); ++r)
    if (logits(scale.tokens[r]) > logits(scale.tokens[best])) best = r;
  return best + 1;
}

/// Argmax over a token subset; ties go to the lowest token id.
template <class T>
int argmax_over(const RowVec<T>& logits, std::span<const int> tokens) {
  int best = -1;
  for (int t : tokens)
    if (best < 0 || logits(t) > logits(best) || (logits(t) == logits(best) && t < best)) best = t;
  return best;
}

/// Full-vocabulary argmax; ties go to the lowest token id.
template <class T>
int argmax_token(const RowVec<T>& logits) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < logits.size(); ++i)
    if (logits(i) > logits(best)) best = i;
  return static_cast<int>(best);
}

struct LabelProbabilities {
  std::vector<double> positive;  // per positive token, full-vocab softmax
  std::vector<double> negative;
  int argmax = -1;               // over the union of label tokens
  double positive_mass() const { return std::accumulate(positive.begin(), positive.end(), 0.0); }
};

/// Full-vocabulary softmax probabilities of the label tokens (not
/// renormalised) plus the label argmax.
template <class T>
LabelProbabilities label_probability(const RowVec<T>& logits, const LabelSet& labels) {
  detail::check_logits(logits);
  labels.validate();
  const RowVec<double> l = logits.template cast<double>();
  const double mx = l.maxCoeff();
  const double z = (l.array() - mx).exp().sum();
  LabelProbabilities out;
  for (int t : labels.positive) out.positive.push_back(std::exp(l(t) - mx) / z);
  for (int t : labels.negative) out.negative.push_back(std::exp(l(t) - mx) / z);
  const auto all = labels.all();
  out.argmax = argmax_over(logits, std::span<const int>(all));
  return out;
}

/// Average ranks (1-based) with ties sharing their mean rank.
inline std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw UndefinedStatistic("zero variance: correlation undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// Spearman rank correlation (Pearson on average ranks).
inline double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ConfigError("spearman: length mismatch");
  if (xs.size() < 2) throw ConfigError("spearman: need at least two observations");
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  return pearson(rx, ry);
}

}  // namespace clens
