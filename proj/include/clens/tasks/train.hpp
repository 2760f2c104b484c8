#pragma once

#include "clens/error.hpp"
#include "clens/metrics.hpp"
#include "clens/model/backward.hpp"
#include "clens/model/forward.hpp"
#include "clens/model/weights.hpp"
#include "clens/tasks/dataset.hpp"
#include "clens/util/parallel.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace clens {

struct TrainConfig {
  int steps = 1500;
  int batch_size = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double init_std = 0.02;
  std::uint64_t seed = 1;
  int log_every = 100;
  int threads = 1;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"steps", c.steps},         {"batch_size", c.batch_size}, {"lr", c.lr},
                     {"beta1", c.beta1},         {"beta2", c.beta2},           {"adam_eps", c.adam_eps},
                     {"init_std", c.init_std},   {"seed", c.seed},             {"log_every", c.log_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.init_std = j.value("init_std", d.init_std);
  c.seed = j.value("seed", d.seed);
  c.log_every = j.value("log_every", d.log_every);
}

struct TrainLogEntry {
  int step = 0;
  double loss = 0;
};

struct TrainResult {
  Weights<float> weights;
  std::map<std::string, double> accuracy;  // per task, answer-position argmax
  std::vector<TrainLogEntry> log;
};

/// Loss went non-finite. Carries the last weights that produced a finite
/// loss.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& msg, Weights<float> last_stable)
      : NumericError(msg), last_stable_(std::move(last_stable)) {}
  const Weights<float>& last_stable() const { return last_stable_; }

 private:
  Weights<float> last_stable_;
};

/// Cross-entropy of the final-position prediction; returns the loss and
/// writes d(loss)/d(logits).
template <class T>
T cross_entropy(const RowVec<T>& logits, int target, RowVec<T>* grad) {
  const T mx = logits.maxCoeff();
  RowVec<T> p = (logits.array() - mx).exp();
  const T z = p.sum();
  p /= z;
  const T loss = -(logits(target) - mx - std::log(z));
  if (grad) {
    *grad = p;
    (*grad)(target) -= T(1);
  }
  return loss;
}

/// Answer-position accuracy (full-vocabulary argmax) per task name.
template <class T>
std::map<std::string, double> answer_accuracy(const Weights<T>& w, const Dataset& data,
                                              const InterventionPlan<T>& plan = {}) {
  std::map<std::string, std::pair<int, int>> tally;
  for (const auto& e : data) {
    const auto logits = forward_with_cache(w, e.tokens, plan).final_logits();
    auto& t = tally[e.task];
    t.first += argmax_token(logits) == e.target ? 1 : 0;
    t.second += 1;
  }
  std::map<std::string, double> out;
  for (const auto& [k, v] : tally) out[k] = static_cast<double>(v.first) / v.second;
  return out;
}

/// Trains with plain Adam on the final-position cross-entropy of every
/// example. Batches are drawn from a seeded shuffle; per-example gradients
/// are accumulated into a fixed number of chunks and reduced in chunk order,
/// so the result does not depend on `threads`.
inline TrainResult train(const ModelSpec& model_spec, const Dataset& data, const TrainConfig& cfg,
                         const std::function<void(int, double)>& progress = {}) {
  model_spec.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  if (cfg.batch_size < 1 || cfg.steps < 0) throw ConfigError("train: bad batch size or step count");
  for (const auto& e : data) {
    if (static_cast<int>(e.tokens.size()) > model_spec.max_seq)
      throw ConfigError("train: prompt longer than max_seq");
    for (int t : e.tokens)
      if (t < 0 || t >= model_spec.vocab_size) throw ConfigError("train: token outside vocabulary");
    if (e.target < 0 || e.target >= model_spec.vocab_size)
      throw ConfigError("train: target outside vocabulary");
  }

  TrainResult res;
  Weights<float> w = random_weights<float>(model_spec, cfg.seed, cfg.init_std);
  Weights<float> m1 = zeros_like(w);
  Weights<float> m2 = zeros_like(w);
  Weights<float> last_stable = w;
  auto wv = param_views(w);
  auto m1v = param_views(m1);
  auto m2v = param_views(m2);

  constexpr int kChunks = 8;
  const int n_chunks = std::min(kChunks, cfg.batch_size);
  std::vector<Weights<float>> chunk_grads(n_chunks, zeros_like(w));
  std::vector<double> chunk_loss(n_chunks);

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::vector<int> batch(cfg.batch_size);

  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& b : batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      b = order[cursor++];
    }
    util::parallel_for(n_chunks, cfg.threads, [&](std::size_t c) {
      auto& g = chunk_grads[c];
      for (auto& p : param_views(g)) std::fill(p.data, p.data + p.size, 0.0f);
      double loss = 0;
      const int lo = cfg.batch_size * static_cast<int>(c) / n_chunks;
      const int hi = cfg.batch_size * (static_cast<int>(c) + 1) / n_chunks;
      try {
        for (int i = lo; i < hi; ++i) {
          const auto& e = data[batch[i]];
          const auto cache = forward_with_cache(w, e.tokens);
          RowVec<float> dlogits;
          loss += cross_entropy(cache.final_logits(), e.target, &dlogits);
          backward_from_logit_grad(w, cache, dlogits, RuleAssignment::gradient(), &g);
        }
      } catch (const NumericError&) {
        loss = std::numeric_limits<double>::quiet_NaN();
      }
      chunk_loss[c] = loss;
    });
    double loss = 0;
    for (double l : chunk_loss) loss += l;
    loss /= cfg.batch_size;
    if (!std::isfinite(loss))
      throw TrainingDiverged("train: loss became non-finite at step " + std::to_string(step), last_stable);
    last_stable = w;

    std::vector<std::vector<ParamView<float>>> gv;
    for (auto& g : chunk_grads) gv.push_back(param_views(g));
    const double bc1 = 1.0 - std::pow(cfg.beta1, step);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step);
    const float inv_b = 1.0f / static_cast<float>(cfg.batch_size);
    for (std::size_t t = 0; t < wv.size(); ++t) {
      for (std::size_t i = 0; i < wv[t].size; ++i) {
        float g = 0;
        for (int c = 0; c < n_chunks; ++c) g += gv[c][t].data[i];
        g *= inv_b;
        float& a = m1v[t].data[i];
        float& b = m2v[t].data[i];
        a = static_cast<float>(cfg.beta1 * a + (1 - cfg.beta1) * g);
        b = static_cast<float>(cfg.beta2 * b + (1 - cfg.beta2) * g * g);
        const double mhat = a / bc1;
        const double vhat = b / bc2;
        wv[t].data[i] -= static_cast<float>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps));
      }
    }
    if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps)) {
      res.log.push_back({step, loss});
      if (progress) progress(step, loss);
    }
  }
  res.accuracy = answer_accuracy(w, data);
  res.weights = std::move(w);
  return res;
}

}  // namespace clens
