// Acceptance suite: one PASS/FAIL line per criterion on stdout.
//
//   acceptance --workdir DIR [--known-fail 2,4] [--only 1,3]
//
// Exit status is 0 when every criterion passes except those listed in
// --known-fail, and those still fail. Any other outcome exits 1.

#include "clens/attribution/peap.hpp"
#include "clens/circuits/circuit.hpp"
#include "clens/circuits/reliability.hpp"
#include "clens/interventions/ablation.hpp"
#include "clens/interventions/faithfulness.hpp"
#include "clens/interventions/fti.hpp"
#include "clens/interventions/steering.hpp"
#include "clens/model/checkpoint.hpp"
#include "clens/signals/signals.hpp"
#include "clens/tasks/pairs.hpp"
#include "clens/tasks/train.hpp"
#include "test_common.hpp"

#include <CLI11.hpp>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

using namespace clens;
using namespace clens::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// Pinned tolerances and budgets.
constexpr double kGradRelTol = 1e-3;
constexpr double kGradDenomFloor = 1e-3;
constexpr double kFdStep = 1e-3;
constexpr int kGradMinCoords = 100;
constexpr double kFidelityEps = 0.01;
constexpr double kFidelityBand = 0.05;
constexpr double kFidelityMinEffect = 1e-8;
constexpr double kEndpointTol = 1e-9;
constexpr int kMinFaithPairs = 50;
constexpr int kCircuitK = 200;
constexpr int kNullSamples = 500;
constexpr double kNullQ = 0.99;
constexpr double kJudgmentDrop = 0.20;
constexpr double kKnowledgeDrop = 0.02;
constexpr double kSteerRho = 0.9;
constexpr int kRotations = 10;
constexpr double kHypergeomRel = 0.20;
constexpr double kPc1Tol = 1e-6;
constexpr double kRidgeTol = 1e-4;
constexpr double kSpearmanTol = 1e-12;
constexpr double kLrpIdentityTol = 1e-6;
constexpr double kMinute = 60;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << x;
  return s.str();
}

int threads() { return std::max(1u, std::thread::hardware_concurrency()); }

Weights<double> linear_model(std::uint64_t seed) {
  auto s = small_spec();
  s.activation = Activation::Identity;
  auto w = random_dense_weights<double>(s, seed, 0.3);
  for (auto& L : w.layers) {
    L.ln1_g.setOnes();
    L.ln1_b.setZero();
    L.ln2_g.setOnes();
    L.ln2_b.setZero();
  }
  w.lnf_g.setOnes();
  w.lnf_b.setZero();
  return w;
}

std::vector<Component> receivers(const ModelSpec& s) {
  Topology topo(s);
  std::vector<Component> out;
  for (int i = 1; i < topo.n_components(); ++i) out.push_back(topo.at(i));
  return out;
}

/// d metric / d read-input of receiver r at (p, d), by central differences
/// through a restored embed edge.
double fd_read_grad(const Weights<double>& w, const ActivationCache<double>& c, const Metric<double>& metric,
                    const Component& r, int p, int d) {
  EdgePatchSet set;
  set.residual.push_back({Component::embed(), r, p});
  auto eval = [&](double delta) {
    ActivationCache<double> src = c;
    src.embed(p, d) += delta;
    return metric(forward_with_cache(w, c.embed, {}, &set, &src).final_logits(), nullptr);
  };
  return (eval(kFdStep) - eval(-kFdStep)) / (2 * kFdStep);
}

/// d metric / d z_j[d] through the diagonal cross edge.
double fd_z_grad(const Weights<double>& w, const ActivationCache<double>& c, const Metric<double>& metric, int l,
                 int hd, int j, int d) {
  EdgePatchSet set;
  set.cross.push_back({l, hd, j, j});
  const double a = c.heads[l][hd].pattern(j, j);
  auto eval = [&](double delta) {
    ActivationCache<double> src = c;
    src.heads[l][hd].v(j, d) += delta / a;
    return metric(forward_with_cache(w, c.embed, {}, &set, &src).final_logits(), nullptr);
  };
  return (eval(kFdStep) - eval(-kFdStep)) / (2 * kFdStep);
}

double naive_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double u : v) {
        less += u < v[i];
        equal += u == v[i];
      }
      r[i] = less + (equal + 1) / 2;
    }
    return r;
  };
  const auto rx = rank(x), ry = rank(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i] / n;
    my += ry[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

/// Shared state for the trained-model criteria.
struct Lab {
  TaskSpec ts = TaskSpec::standard();
  TaskSpec tc;
  fs::path dir;
  Weights<float> w;
  double train_seconds = 0;
  std::map<std::string, double> accuracy;
  std::vector<MinimalPair> pairs;
  std::vector<MinimalPair> cpairs;
  PairScoring rate_scores;
  Circuit rate_circuit, class_circuit;
  LeTfSplit split;
  std::vector<EdgeRef> universe;
  double trace_seconds = 0;

  Lab() {
    tc = ts;
    tc.format = Format::Classification;
  }

  Dataset training_data() const {
    Dataset d = generate_task(ts, 1, 3000);
    const auto dc = generate_task(tc, 2, 3000);
    const auto dk = generate_knowledge(ts, 3, 2000);
    d.insert(d.end(), dc.begin(), dc.end());
    d.insert(d.end(), dk.begin(), dk.end());
    return d;
  }

  Weights<float> trained(const ModelSpec& s, int steps, const std::string& name) const {
    const auto path = dir / (name + ".clns");
    if (fs::exists(path)) return load_checkpoint(path.string());
    TrainConfig c;
    c.steps = steps;
    c.batch_size = 32;
    c.lr = 1e-3;
    c.seed = 1;
    c.threads = threads();
    auto r = train(s, training_data(), c);
    save_checkpoint(r.weights, path.string());
    return r.weights;
  }

  ModelSpec spec(int layers, int d_model) const {
    ModelSpec s;
    s.n_layers = layers;
    s.n_heads = 4;
    s.d_model = d_model;
    s.d_head = d_model / 4;
    s.d_mlp = 2 * d_model;
    s.vocab_size = ts.vocab_size();
    s.max_seq = 16;
    return s;
  }

  void prepare() {
    auto t0 = Clock::now();
    w = trained(spec(4, 128), 1500, "reference");
    train_seconds = seconds_since(t0);
    auto held = generate_task(ts, 11, 500);
    const auto hc = generate_task(tc, 12, 500);
    const auto hk = generate_knowledge(ts, 13, 500);
    held.insert(held.end(), hc.begin(), hc.end());
    held.insert(held.end(), hk.begin(), hk.end());
    accuracy = answer_accuracy(w, held);

    t0 = Clock::now();
    pairs = build_minimal_pairs(generate_task(ts, 21, 400), 5);
    pairs.resize(std::min<std::size_t>(pairs.size(), 100));
    for (const auto& p : pairs) cpairs.push_back(reformat(ts, p, Format::Classification));
    rate_scores = score_pairs(w, pairs, ts.rating_scale(), {}, threads());
    const auto cs = score_pairs(w, cpairs, ts.class_scale(), {}, threads());
    const auto ra = aggregate(rate_scores.tables, default_min_pairs(rate_scores.tables.size()));
    const auto ca = aggregate(cs.tables, default_min_pairs(cs.tables.size()));
    rate_circuit = top_k(ra, kCircuitK);
    class_circuit = top_k(ca, kCircuitK);
    split = le_tf_decompose(rate_circuit, class_circuit);
    universe = edge_universe(w.spec, pairs.front().length());
    trace_seconds = seconds_since(t0);
  }
};

Outcome gradient_oracle() {
  const auto t0 = Clock::now();
  const auto scale = small_scale();
  int checked = 0;
  double worst = 0;
  for (std::uint64_t seed : {101, 102, 103}) {
    const auto wd = random_dense_weights<double>(small_spec(2), seed, 0.3);
    const auto wf = cast_weights<float>(wd);
    const auto toks = random_tokens(6, 12, seed);
    const auto g = backward_gradients(wf, forward_with_cache(wf, toks), ev_metric<float>(scale));
    const auto cd = forward_with_cache(wd, toks);
    const auto metric = ev_metric<double>(scale);
    std::mt19937_64 rng(seed);
    const auto recv = receivers(wd.spec);
    auto record = [&](double an, double fd) {
      worst = std::max(worst, std::abs(an - fd) / std::max(std::abs(fd), kGradDenomFloor));
      ++checked;
    };
    for (int n = 0; n < 40; ++n) {
      const int p = static_cast<int>(rng() % 6);
      const int d = static_cast<int>(rng() % wd.spec.d_model);
      const auto& r = recv[rng() % recv.size()];
      record(g.read_grad(r)(p, d), fd_read_grad(wd, cd, metric, r, p, d));
    }
    for (int n = 0; n < 10; ++n) {
      const int l = static_cast<int>(rng() % 2), hd = static_cast<int>(rng() % 2);
      const int j = static_cast<int>(rng() % 6), d = static_cast<int>(rng() % wd.spec.d_head);
      record(g.head_z[l][hd](j, d), fd_z_grad(wd, cd, metric, l, hd, j, d));
    }
  }
  const double secs = seconds_since(t0);
  return {checked >= kGradMinCoords && worst < kGradRelTol && secs < kMinute,
          "coords=" + std::to_string(checked) + " max_rel_err=" + fmt(worst) + " seconds=" + fmt(secs, 3)};
}

struct FidelityStats {
  int edges = 0;
  int outside = 0;
  double worst = 1;
};

FidelityStats fidelity_at(const Weights<double>& w, const std::vector<MinimalPair>& pairs, const RatingScale& sc,
                          double eps) {
  FidelityStats st;
  for (const auto& p : pairs) {
    const auto ea = embed_tokens(w, std::span<const int>(p.clean.tokens));
    const auto eb = embed_tokens(w, std::span<const int>(p.corrupt.tokens));
    const auto runs = run_pair(w, ea, interpolate_embeddings<double>(ea, eb, eps), sc);
    PeapOptions o;
    o.min_gap = 0;
    const auto tab = peap_scores(w, runs, sc, o);
    const int m = polarity(runs.ev_clean, runs.ev_corrupt);
    for (const auto& [e, s] : tab.entries) {
      const double dd = brute_force_edge_effect(w, runs, e, sc);
      if (std::abs(dd) <= kFidelityMinEffect) continue;
      ++st.edges;
      const double r = s.mean / (m * dd);
      if (std::abs(r - 1) > std::abs(st.worst - 1)) st.worst = r;
      if (std::abs(r - 1) > kFidelityBand) ++st.outside;
    }
  }
  return st;
}

Outcome first_order_fidelity(const Lab& lab) {
  const auto w = cast_weights<double>(lab.trained(lab.spec(2, 64), 600, "two_layer"));
  const auto t0 = Clock::now();
  auto pairs = build_minimal_pairs(generate_task(lab.ts, 5, 40), 3);
  pairs.resize(5);
  const auto sc = lab.ts.rating_scale();
  const auto st = fidelity_at(w, pairs, sc, kFidelityEps);
  const double secs = seconds_since(t0);
  const auto fine = fidelity_at(w, pairs, sc, kFidelityEps / 10);
  return {st.edges > 0 && st.outside == 0 && secs < 5 * kMinute,
          "eps=" + fmt(kFidelityEps) + " edges=" + std::to_string(st.edges) +
              " outside_band=" + std::to_string(st.outside) + " worst_ratio=" + fmt(st.worst) +
              " seconds=" + fmt(secs, 3) + " | eps=" + fmt(kFidelityEps / 10) +
              " edges=" + std::to_string(fine.edges) + " outside_band=" + std::to_string(fine.outside) +
              " worst_ratio=" + fmt(fine.worst)};
}

Outcome faithfulness_endpoints(const Lab& lab) {
  const auto sc = lab.ts.rating_scale();
  std::vector<PairRuns<float>> runs;
  for (const auto& p : lab.pairs) runs.push_back(run_pair(lab.w, p, sc));
  const auto ra = aggregate(lab.rate_scores.tables, default_min_pairs(lab.rate_scores.tables.size()));
  auto ranking = ranked_edges(top_k(ra, static_cast<int>(lab.universe.size())));
  const std::set<EdgeRef> ranked(ranking.begin(), ranking.end());
  for (const auto& e : lab.universe)
    if (!ranked.count(e)) ranking.push_back(e);
  const int U = static_cast<int>(lab.universe.size());
  const std::vector<int> grid{0, 10, 20, 50, 100, 200, 500, 1000, 2000, U};
  FaithOptions fo;
  fo.threads = threads();
  fo.bootstrap = 200;
  const auto peap = faithfulness_curve(lab.w, runs, ranking, grid, sc, fo);
  const auto rand = faithfulness_curve(lab.w, runs, random_ranking(lab.universe, 9), grid, sc, fo);

  double worst_end = 0;
  for (double v : peap.per_pair.front()) worst_end = std::max(worst_end, std::abs(v));
  for (double v : peap.per_pair.back()) worst_end = std::max(worst_end, std::abs(v - 1));
  for (double v : rand.per_pair.front()) worst_end = std::max(worst_end, std::abs(v));
  for (double v : rand.per_pair.back()) worst_end = std::max(worst_end, std::abs(v - 1));
  bool dominated = true;
  std::string curve;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    dominated = dominated && rand.points[i].median <= peap.points[i].median;
    curve += " k" + std::to_string(grid[i]) + "=" + fmt(peap.points[i].median, 3) + "/" +
             fmt(rand.points[i].median, 3);
  }
  const int used = peap.points.front().used;
  return {worst_end <= kEndpointTol && dominated && used >= kMinFaithPairs,
          "pairs_used=" + std::to_string(used) + " universe=" + std::to_string(U) +
              " max_endpoint_err=" + fmt(worst_end) + " peap/random medians:" + curve};
}

Outcome le_tf_replication(const Lab& lab) {
  const auto t0 = Clock::now();
  const auto& le = lab.split.le;
  const double le_med = le.size() ? median_layer(le, lab.w.spec) : 0;
  const double u_med = median_layer(lab.universe.begin(), lab.universe.end(), lab.w.spec);
  const auto sh = split_half(lab.rate_scores.tables, kCircuitK, 11);
  const auto null = structural_null(lab.universe, lab.universe, kCircuitK, kNullSamples, kNullQ, 3);
  const double secs = lab.train_seconds + lab.trace_seconds + seconds_since(t0);
  const bool nonempty = le.size() > 0;
  const bool later = nonempty && le_med > u_med;
  const bool reliable = sh.mean > null.value;
  return {nonempty && later && reliable && secs < 30 * kMinute,
          "le_edges=" + std::to_string(le.size()) + " tf_rate=" + std::to_string(lab.split.tf_rate.size()) +
              " tf_class=" + std::to_string(lab.split.tf_class.size()) + " le_median_layer=" + fmt(le_med) +
              " universe_median_layer=" + fmt(u_med) + " split_half_iou=" + fmt(sh.mean) +
              " null_p99=" + fmt(null.value) + " seconds=" + fmt(secs, 4) + " [nonempty=" +
              (nonempty ? "yes" : "no") + " later=" + (later ? "yes" : "no") +
              " reliable=" + (reliable ? "yes" : "no") + "]"};
}

Outcome modularity(const Lab& lab) {
  const auto senders = sender_components(lab.split.le);
  if (senders.empty()) return {false, "LE has no senders to ablate"};
  Dataset judgment = generate_task(lab.ts, 31, 300);
  const auto jc = generate_task(lab.tc, 32, 300);
  judgment.insert(judgment.end(), jc.begin(), jc.end());
  const std::map<std::string, Dataset> suites{{"judgment", judgment},
                                              {"knowledge", generate_knowledge(lab.ts, 33, 300)}};
  const auto za = zero_ablate_eval(lab.w, senders, suites, threads());
  const double jd = -za.at("judgment").delta(), kd = -za.at("knowledge").delta();

  std::ofstream rep(lab.dir / "modularity_report.csv");
  rep << "suite,before,after,drop\n";
  for (const auto& [name, d] : za) rep << name << ',' << d.before << ',' << d.after << ',' << -d.delta() << '\n';
  rep << "# ablated";
  for (const auto& c : senders) rep << ' ' << to_string(c);
  rep << '\n';

  std::string names;
  for (const auto& c : senders) names += (names.empty() ? "" : " ") + to_string(c);
  const bool modular = jd > kJudgmentDrop && kd <= kKnowledgeDrop;
  const std::string detail = std::string(modular ? "modular" : "entangled, documented") +
                             " judgment=" + fmt(za.at("judgment").before) + "->" + fmt(za.at("judgment").after) +
                             " knowledge=" + fmt(za.at("knowledge").before) + "->" +
                             fmt(za.at("knowledge").after) + " ablated=" + std::to_string(senders.size()) + " [" +
                             names + "] report=" + (lab.dir / "modularity_report.csv").string();
  return {true, detail};
}

Outcome steering_contract(const Lab& lab) {
  const auto sc = lab.ts.rating_scale();
  std::vector<NodeRef> hooks;
  for (const auto& c : sender_components(lab.split.le)) hooks.push_back({c, -1});
  if (hooks.empty()) return {false, "LE has no senders to steer"};
  const auto bundle = steering_vectors(lab.w, lab.pairs, hooks);
  const std::vector<double> alphas{0, 0.5, 1, 2};
  const std::vector<double> two_sided{-2, -1, -0.5, 0, 0.5, 1, 2};
  bool identical = true;
  double min_rho = 1, min_rho_two_sided = 1, min_margin = std::numeric_limits<double>::infinity();
  double min_true = std::numeric_limits<double>::infinity(), max_rot = 0;
  int n = 0;
  for (const auto& e : generate_task(lab.ts, 41, 200)) {
    if (e.rating > 2) continue;
    if (++n > 10) break;
    const auto r0 = steer(lab.w, e.tokens, bundle, 0.0, sc);
    identical = identical && r0.logits == forward_with_cache(lab.w, e.tokens).final_logits().cast<double>();
    std::vector<double> ev;
    for (double a : alphas) ev.push_back(steer(lab.w, e.tokens, bundle, a, sc).ev);
    min_rho = std::min(min_rho, spearman_rho(std::span<const double>(alphas), std::span<const double>(ev)));
    std::vector<double> ev2;
    for (double a : two_sided) ev2.push_back(steer(lab.w, e.tokens, bundle, a, sc).ev);
    min_rho_two_sided =
        std::min(min_rho_two_sided, spearman_rho(std::span<const double>(two_sided), std::span<const double>(ev2)));
    const double effect = std::abs(steer(lab.w, e.tokens, bundle, 1.0, sc).ev - r0.ev);
    double rot = 0;
    for (double x : random_rotation_control(lab.w, e.tokens, bundle, 1.0, kRotations, 5 + n, sc))
      rot = std::max(rot, std::abs(x));
    min_margin = std::min(min_margin, effect - rot);
    min_true = std::min(min_true, effect);
    max_rot = std::max(max_rot, rot);
  }
  return {identical && min_rho > kSteerRho && min_margin > 0,
          "prompts=" + std::to_string(std::min(n, 10)) + " hooks=" + std::to_string(hooks.size()) +
              " alpha0_identical=" + (identical ? "yes" : "no") + " min_spearman=" + fmt(min_rho) +
              " min_true_effect=" + fmt(min_true) + " max_rotation_effect=" + fmt(max_rot) +
              " | two_sided_min_spearman=" + fmt(min_rho_two_sided)};
}

Outcome fti_identities(const Lab& lab) {
  const auto senders = sender_components(lab.split.le);
  const auto labels = lab.ts.class_labels();
  const auto sc = lab.ts.rating_scale();
  const auto inst = fti_instances(lab.ts, lab.pairs);

  auto self = inst;
  for (auto& i : self) i.source = i.target;
  bool self_ok = true;
  for (const auto& r : fti(lab.w, self, senders, labels, lab.ts.class_scale(), -1e9, threads()).records)
    self_ok = self_ok && r.base_positive == r.patched_positive && r.base_argmax == r.patched_argmax && !r.flipped;
  bool empty_ok = true;
  for (const auto& r : fti(lab.w, inst, {}, labels, sc, -1e9, threads()).records)
    empty_ok = empty_ok && r.base_positive == r.patched_positive && !r.flipped;

  const auto rep = fti(lab.w, inst, senders, labels, sc, 4.0, threads());
  bool rule_ok = true;
  int n = 0, flips = 0;
  for (const auto& r : rep.records) {
    rule_ok = rule_ok && r.included == (r.source_ev > 4.0 && !labels.is_positive(r.base_argmax));
    rule_ok = rule_ok && r.flipped == (r.included && labels.is_positive(r.patched_argmax));
    n += r.included;
    flips += r.flipped;
  }
  const bool reconciled = rep.n == n && rep.flips == flips && rep.candidates == static_cast<int>(inst.size()) &&
                          (n == 0 || rep.flip_rate() == static_cast<double>(flips) / n);
  return {self_ok && empty_ok && rule_ok && reconciled,
          std::string("self_patch=") + (self_ok ? "exact" : "broken") + " empty_nodes=" +
              (empty_ok ? "exact" : "broken") + " inclusion_rule=" + (rule_ok ? "ok" : "broken") +
              " candidates=" + std::to_string(rep.candidates) + " N=" + std::to_string(rep.n) +
              " flips=" + std::to_string(rep.flips) + " flip_rate=" + fmt(rep.flip_rate())};
}

Outcome statistics_oracles() {
  std::string detail;
  bool ok = true;
  auto timed = [&](const std::string& name, auto&& body) {
    const auto t0 = Clock::now();
    const auto [pass, what] = body();
    const double secs = seconds_since(t0);
    ok = ok && pass && secs < kMinute;
    detail += name + "=" + (pass ? "ok" : "FAIL") + "(" + what + ", " + fmt(secs, 2) + "s) ";
  };

  timed("spearman", [] {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> x(50), y(50);
      for (int i = 0; i < 50; ++i) {
        x[i] = nd(rng);
        y[i] = 0.4 * x[i] + nd(rng);
      }
      if (trial % 2) {
        for (auto& v : x) v = std::round(v);
        for (auto& v : y) v = std::round(2 * v);
      }
      worst = std::max(worst, std::abs(spearman_rho(x, y) - naive_spearman(x, y)));
    }
    return std::pair{worst < kSpearmanTol, "max_diff=" + fmt(worst)};
  });

  timed("ridge", [] {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd x(30, 5);
    Eigen::VectorXd y(30);
    for (int i = 0; i < 30; ++i) {
      for (int j = 0; j < 5; ++j) x(i, j) = nd(rng) + (j == 2 ? 3.0 : 0.0);
      y(i) = 1.5 * x(i, 0) - 0.7 * x(i, 3) + 2.0 + 0.3 * nd(rng);
    }
    double worst = 0;
    for (double lambda : {0.1, 1.0, 10.0}) {
      const auto fit = ridge_fit(x, y, lambda);
      Eigen::VectorXd b = Eigen::VectorXd::Zero(5);
      double c = 0;
      const double lr = 1.0 / (x.squaredNorm() + lambda + x.rows());
      for (int it = 0; it < 200000; ++it) {
        const Eigen::VectorXd r = (x * b).array() + c - y.array();
        const Eigen::VectorXd gb = x.transpose() * r + lambda * b;
        const double gc = r.sum();
        b -= lr * gb;
        c -= lr * gc;
        if (gb.norm() + std::abs(gc) < 1e-12) break;
      }
      worst = std::max({worst, (fit.beta - b).cwiseAbs().maxCoeff(), std::abs(fit.intercept - c)});
    }
    return std::pair{worst < kRidgeTol, "max_diff=" + fmt(worst)};
  });

  timed("null", [] {
    std::vector<int> pool(10000);
    std::iota(pool.begin(), pool.end(), 0);
    const int k = 100;
    const auto n = permutation_null(pool, pool, k, 2000, kNullQ, 2);
    const double expected = static_cast<double>(k) / (2.0 * pool.size() - k);
    const double rel = std::abs(n.mean - expected) / expected;
    return std::pair{rel <= kHypergeomRel, "rel_err=" + fmt(rel)};
  });

  timed("pc1", [] {
    std::mt19937_64 rng(26);
    std::normal_distribution<double> nd;
    double worst = 0;
    for (int trial = 0; trial < 5; ++trial) {
      Eigen::MatrixXd x(10, 16);
      for (int i = 0; i < 10; ++i)
        for (int j = 0; j < 16; ++j) x(i, j) = nd(rng) * (j == trial ? 4.0 : 1.0);
      const Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c.transpose() * c);
      const auto v = pc1(x);
      worst = std::max(worst, 1 - std::abs(v.dot(es.eigenvectors().col(15))));
    }
    return std::pair{worst < kPc1Tol, "max_misalignment=" + fmt(worst)};
  });

  detail.pop_back();
  return {ok, detail};
}

Outcome lrpeap(const Lab& lab) {
  double worst = 0;
  for (std::uint64_t seed : {201, 202, 203}) {
    const auto w = linear_model(seed);
    const auto c = forward_with_cache(w, random_tokens(6, 12, seed));
    const auto metric = ev_metric<double>(small_scale());
    const auto g = backward_gradients(w, c, metric);
    const auto l = lrp_backward(w, c, metric, RuleAssignment{Rule::Gradient, Rule::IdentityRule, Rule::Gradient});
    for (const auto& r : receivers(w.spec))
      worst = std::max(worst, (g.read_grad(r) - l.read_grad(r)).cwiseAbs().maxCoeff());
    worst = std::max(worst, (g.embed - l.embed).cwiseAbs().maxCoeff());
  }

  PeapOptions lo;
  lo.mode = BackwardMode::Lrp;
  const auto ls = score_pairs(lab.w, lab.pairs, lab.ts.rating_scale(), lo, threads());
  const auto lc = top_k(aggregate(ls.tables, default_min_pairs(ls.tables.size())), kCircuitK);
  const double overlap = jaccard(lab.rate_circuit.edge_set(), lc.edge_set());
  const auto null = permutation_null(lab.universe, lab.universe, kCircuitK, kNullSamples, kNullQ, 4);
  return {worst < kLrpIdentityTol && overlap > null.value,
          "identity_rule_max_diff=" + fmt(worst) + " top200_iou=" + fmt(overlap) + " null_p99=" + fmt(null.value)};
}

struct CliRun {
  int code = -1;
  std::string out;
};

CliRun cli(const fs::path& cwd, const std::string& args) {
  const auto out = cwd / "cli_stdout.txt";
  const std::string cmd = "cd " + cwd.string() + " && " + std::string(CLENS_CLI_PATH) + " " + args + " > " +
                          out.string() + " 2> " + (cwd / "cli_stderr.txt").string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

Outcome end_to_end(const fs::path& dir) {
  const auto root = dir / "e2e";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::vector<std::pair<std::string, std::string>> steps{
      {"data", "gen-data --seed 1"},
      {"model",
       "train --seed 2 --data runs/data/train.jsonl --set model.n_layers=2 --set model.n_heads=4 "
       "--set model.d_model=32 --set model.d_head=8 --set model.d_mlp=64 --set train.steps=300"},
      {"trace", "trace --weights runs/model/model.clns --pairs runs/data/pairs.jsonl --n-pairs 30"},
      {"faith",
       "faithfulness --weights runs/model/model.clns --pairs runs/data/pairs.jsonl --n-pairs 30 "
       "--table runs/trace/table.csv --bootstrap 200 --seed 3"},
      {"report", "report --dir runs"}};
  const auto t0 = Clock::now();
  for (const auto& [id, args] : steps) {
    const auto r = cli(root, args + " --out runs --run-id " + id);
    if (r.code != 0) return {false, "step " + id + " exited " + std::to_string(r.code)};
  }
  const double secs = seconds_since(t0);
  int identical = 0;
  for (const auto& [id, args] : steps) {
    const auto r = cli(root, "replay --manifest runs/" + id + "/manifest.json --out replays");
    identical += r.code == 0 && r.out.find("replay=identical") != std::string::npos;
  }
  const int total = static_cast<int>(steps.size());
  return {secs < 10 * kMinute && identical == total,
          "pipeline_seconds=" + fmt(secs, 4) + " replays_identical=" + std::to_string(identical) + "/" +
              std::to_string(total)};
}

std::set<int> parse_list(const std::string& s) {
  std::set<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.insert(std::stoi(tok));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clens acceptance suite"};
  std::string workdir = "acceptance_run", known = "", only = "";
  app.add_option("--workdir", workdir, "scratch directory for checkpoints and CLI runs");
  app.add_option("--known-fail", known, "criteria expected to fail, comma separated");
  app.add_option("--only", only, "run only these criteria, comma separated");
  CLI11_PARSE(app, argc, argv);

  const auto expected_fail = parse_list(known);
  const auto selected = parse_list(only);
  auto wanted = [&](int c) { return selected.empty() || selected.count(c); };

  Lab lab;
  lab.dir = fs::absolute(workdir);
  fs::create_directories(lab.dir);
  const bool needs_lab = std::any_of(selected.begin(), selected.end(), [](int c) { return c >= 3 && c != 8 && c != 10; }) ||
                         selected.empty();
  if (needs_lab) {
    lab.prepare();
    std::cout << "reference model: train_seconds=" << fmt(lab.train_seconds, 4);
    for (const auto& [task, acc] : lab.accuracy) std::cout << ' ' << task << "_accuracy=" << fmt(acc);
    std::cout << " pairs=" << lab.pairs.size() << " scored=" << lab.rate_scores.tables.size() << '\n'
              << std::flush;
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"first-order fidelity", [&] { return first_order_fidelity(lab); }},
      {"faithfulness endpoints", [&] { return faithfulness_endpoints(lab); }},
      {"LE/TF replication", [&] { return le_tf_replication(lab); }},
      {"modularity", [&] { return modularity(lab); }},
      {"steering contract", [&] { return steering_contract(lab); }},
      {"FTI identities", [&] { return fti_identities(lab); }},
      {"statistics oracles", statistics_oracles},
      {"LRPEAP", [&] { return lrpeap(lab); }},
      {"end-to-end smoke", [&] { return end_to_end(lab.dir); }},
  };

  json summary = json::array();
  bool ok = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const bool known_fail = expected_fail.count(id) > 0;
    ok = ok && (o.pass != known_fail);
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << (known_fail && !o.pass ? " (known)" : "")
              << " " << criteria[i].first << ": " << o.detail << '\n'
              << std::flush;
    summary.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail}});
  }
  std::ofstream(lab.dir / "acceptance.json") << summary.dump(2) << '\n';
  if (!ok) std::cout << "acceptance: unexpected outcome (a criterion failed, or a known failure now passes)\n";
  return ok ? 0 : 1;
}
