#pragma once

#include "clens/error.hpp"
#include "clens/interventions/lens.hpp"
#include "clens/interventions/steering.hpp"
#include "clens/metrics.hpp"
#include "clens/model/forward.hpp"
#include "clens/util/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace clens {

/// Per-instance judge signals: argmax rating (M1), expected rating (M2),
/// out-of-fold ridge probe (M3) and steering-direction readout (M4).
struct SignalTable {
  std::vector<double> m1, m2, m3, m4;

  std::size_t size() const { return m1.size(); }
  void check() const {
    if (m2.size() != m1.size() || m3.size() != m1.size() || m4.size() != m1.size())
      throw ShapeError("signal columns differ in length");
  }
};

struct SignalColumns {
  std::vector<double> m1, m2;
};

template <class T>
SignalColumns signal_m1_m2(const Weights<T>& w, const std::vector<std::vector<int>>& prompts,
                           const RatingScale& scale) {
  SignalColumns out;
  for (const auto& p : prompts) {
    const auto logits = forward_with_cache(w, p).final_logits();
    out.m1.push_back(argmax_rating(logits, scale));
    out.m2.push_back(static_cast<double>(expected_rating(logits, scale)));
  }
  return out;
}

struct RidgeFit {
  Eigen::VectorXd beta;
  double intercept = 0;

  double predict(const Eigen::RowVectorXd& x) const { return x.dot(beta) + intercept; }
};

/// Closed-form ridge with an unpenalised intercept:
/// beta = (Xc^T Xc + lambda I)^-1 Xc^T yc on centred data.
inline RidgeFit ridge_fit(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
  if (!(lambda > 0)) throw ConfigError("ridge: lambda must be > 0");
  if (x.rows() != y.size() || x.rows() < 1) throw ShapeError("ridge: design and labels differ in length");
  const Eigen::RowVectorXd mx = x.colwise().mean();
  const double my = y.mean();
  const Eigen::MatrixXd xc = x.rowwise() - mx;
  const Eigen::VectorXd yc = y.array() - my;
  Eigen::MatrixXd a = xc.transpose() * xc;
  a.diagonal().array() += lambda;
  RidgeFit f;
  f.beta = a.ldlt().solve(xc.transpose() * yc);
  f.intercept = my - mx.dot(f.beta);
  return f;
}

/// Seeded assignment of n instances to `folds` balanced folds.
inline std::vector<int> fold_assignment(std::size_t n, int folds, std::uint64_t seed) {
  if (folds < 2) throw ConfigError("need at least two folds");
  if (n < static_cast<std::size_t>(folds)) throw ConfigError("fewer instances than folds");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<int> f(n);
  for (std::size_t i = 0; i < n; ++i) f[idx[i]] = static_cast<int>(i % folds);
  return f;
}

struct ProbeResult {
  std::vector<double> predictions;  // out-of-fold
  std::vector<int> fold;            // fold that held each instance out
  std::vector<double> lambda;       // lambda chosen per fold
};

namespace detail {

inline Eigen::MatrixXd rows_of(const Eigen::MatrixXd& x, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

inline Eigen::VectorXd elems_of(const Eigen::VectorXd& y, const std::vector<std::size_t>& idx) {
  Eigen::VectorXd out(static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out(static_cast<Eigen::Index>(i)) = y(static_cast<Eigen::Index>(idx[i]));
  return out;
}

/// Lambda with the lowest squared error under an inner k-fold split of the
/// training rows; ties go to the earlier grid entry.
inline double select_lambda(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const std::vector<double>& grid,
                            int folds, std::uint64_t seed) {
  if (grid.size() == 1) return grid.front();
  const int k = std::min<int>(folds, static_cast<int>(x.rows()));
  if (k < 2) return grid.front();
  const auto f = fold_assignment(static_cast<std::size_t>(x.rows()), k, seed);
  double best = grid.front();
  double best_err = std::numeric_limits<double>::infinity();
  for (double lam : grid) {
    double err = 0;
    for (int fo = 0; fo < k; ++fo) {
      std::vector<std::size_t> tr, te;
      for (std::size_t i = 0; i < f.size(); ++i) (f[i] == fo ? te : tr).push_back(i);
      const auto fit = ridge_fit(rows_of(x, tr), elems_of(y, tr), lam);
      for (auto i : te) {
        const double d = fit.predict(x.row(static_cast<Eigen::Index>(i))) - y(static_cast<Eigen::Index>(i));
        err += d * d;
      }
    }
    if (err < best_err) {
      best_err = err;
      best = lam;
    }
  }
  return best;
}

}  // namespace detail

/// Ridge probe with out-of-fold predictions. With more than one lambda the
/// value is picked per outer fold by an inner cross-validation on that
/// fold's training rows only.
inline ProbeResult signal_m3_probe(const Eigen::MatrixXd& features, const std::vector<double>& labels, int folds = 5,
                                   std::vector<double> lambdas = {0.1, 1.0, 10.0}, std::uint64_t seed = 0) {
  if (features.rows() != static_cast<Eigen::Index>(labels.size())) throw ShapeError("probe: features and labels differ");
  if (lambdas.empty()) throw ConfigError("probe: empty lambda grid");
  for (double l : lambdas)
    if (!(l > 0)) throw ConfigError("probe: lambda must be > 0");
  const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(labels.data(), static_cast<Eigen::Index>(labels.size()));
  ProbeResult out;
  out.fold = fold_assignment(labels.size(), folds, seed);
  out.predictions.assign(labels.size(), 0.0);
  for (int fo = 0; fo < folds; ++fo) {
    std::vector<std::size_t> tr, te;
    for (std::size_t i = 0; i < labels.size(); ++i) (out.fold[i] == fo ? te : tr).push_back(i);
    const auto xtr = detail::rows_of(features, tr);
    const auto ytr = detail::elems_of(y, tr);
    const double lam = detail::select_lambda(xtr, ytr, lambdas, folds, util::derive_seed(seed, fo));
    out.lambda.push_back(lam);
    const auto fit = ridge_fit(xtr, ytr, lam);
    for (auto i : te) out.predictions[i] = fit.predict(features.row(static_cast<Eigen::Index>(i)));
  }
  return out;
}

/// Residual read-point input of `node` (final position unless given) for
/// each prompt, one row per prompt.
template <class T>
Eigen::MatrixXd residual_features(const Weights<T>& w, const std::vector<std::vector<int>>& prompts,
                                  const NodeRef& node) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(prompts.size()), w.spec.d_model);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto c = forward_with_cache(w, prompts[i]);
    const int p = resolve_position(node.position.value_or(-1), c.seq_len);
    out.row(static_cast<Eigen::Index>(i)) = c.read_input(node.comp).row(p).template cast<double>();
  }
  return out;
}

struct DirectionReadout {
  std::vector<double> raw;         // before sign calibration
  std::vector<double> calibrated;
  int sign = 1;
};

/// Mean over hooks of the hook output projected on the unit steering
/// direction. The global sign is chosen so that Spearman(M4, calibration)
/// is non-negative.
template <class T>
DirectionReadout signal_m4_direction(const Weights<T>& w, const std::vector<std::vector<int>>& prompts,
                                     const SteeringBundle& bundle, const std::vector<double>& calibration) {
  if (bundle.vectors.empty()) throw ConfigError("M4: empty steering bundle");
  if (calibration.size() != prompts.size()) throw ShapeError("M4: calibration column length mismatch");
  std::vector<std::pair<NodeRef, RowVec<double>>> dirs;
  for (const auto& [h, v] : bundle.vectors) {
    const double n = v.norm();
    if (!(n > 0)) throw UndefinedStatistic("M4: zero-norm steering direction at " + to_string(h.comp));
    dirs.push_back({h, v / n});
  }
  DirectionReadout out;
  for (const auto& p : prompts) {
    const auto c = forward_with_cache(w, p);
    double s = 0;
    for (const auto& [h, u] : dirs) s += c.contribution(h).template cast<double>().dot(u);
    out.raw.push_back(s / static_cast<double>(dirs.size()));
  }
  const double rho = spearman_rho(std::span<const double>(out.raw), std::span<const double>(calibration));
  out.sign = rho < 0 ? -1 : 1;
  out.calibrated = out.raw;
  for (auto& x : out.calibrated) x *= out.sign;
  return out;
}

struct SignalCorrelations {
  std::optional<double> m1, m2, m3, m4;
};

/// Spearman rho of each column against the labels; undefined (constant)
/// columns are left empty.
inline SignalCorrelations correlate(const SignalTable& t, const std::vector<double>& labels) {
  t.check();
  if (labels.size() != t.size()) throw ShapeError("correlate: label length mismatch");
  auto rho = [&](const std::vector<double>& col) -> std::optional<double> {
    try {
      return spearman_rho(std::span<const double>(col), std::span<const double>(labels));
    } catch (const UndefinedStatistic&) {
      return std::nullopt;
    }
  };
  if (std::adjacent_find(labels.begin(), labels.end(), std::not_equal_to<>()) == labels.end())
    throw UndefinedStatistic("correlate: labels have zero variance");
  return {rho(t.m1), rho(t.m2), rho(t.m3), rho(t.m4)};
}

inline std::string signal_table_csv(const SignalTable& t, const std::vector<double>& labels,
                                    const SignalCorrelations& rho) {
  t.check();
  auto f = [](double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
  };
  std::string out = "index,label,m1,m2,m3,m4\n";
  for (std::size_t i = 0; i < t.size(); ++i)
    out += std::to_string(i) + "," + f(labels.at(i)) + "," + f(t.m1[i]) + "," + f(t.m2[i]) + "," + f(t.m3[i]) + "," +
           f(t.m4[i]) + "\n";
  out += "# spearman\nsignal,rho\n";
  auto o = [&](const char* name, const std::optional<double>& r) {
    out += std::string(name) + "," + (r ? f(*r) : std::string("undefined")) + "\n";
  };
  o("m1", rho.m1);
  o("m2", rho.m2);
  o("m3", rho.m3);
  o("m4", rho.m4);
  return out;
}

}  // namespace clens
