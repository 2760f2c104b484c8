#pragma once

#include "clens/error.hpp"
#include "clens/tasks/task_spec.hpp"

#include <json.hpp>

#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace clens {

/// One prompt with its answer token. `rating` is the ground-truth latent
/// rating (0 for knowledge probes). `task` is "rating", "classification" or
/// "knowledge".
struct Example {
  std::vector<int> tokens;
  int target = 0;
  int rating = 0;
  std::string task;

  bool operator==(const Example&) const = default;
};

using Dataset = std::vector<Example>;

inline void to_json(nlohmann::json& j, const Example& e) {
  j = nlohmann::json{{"tokens", e.tokens}, {"target", e.target}, {"rating", e.rating}, {"task", e.task}};
}

inline void from_json(const nlohmann::json& j, Example& e) {
  e.tokens = j.at("tokens").get<std::vector<int>>();
  e.target = j.at("target").get<int>();
  e.rating = j.value("rating", 0);
  e.task = j.value("task", std::string());
}

/// Judgment prompt for a content sequence.
inline std::vector<int> make_prompt(const TaskSpec& spec, const std::vector<int>& content, Format f) {
  std::vector<int> p;
  p.reserve(content.size() + 3);
  p.push_back(spec.bos);
  p.insert(p.end(), content.begin(), content.end());
  p.push_back(spec.format_token(f));
  p.push_back(spec.anchor);
  return p;
}

/// Stratified generator: the rating is drawn uniformly from 1..5, then the
/// positive count uniformly among the counts that land in that bucket.
/// Deterministic for a given (spec, seed).
inline Dataset generate_task(const TaskSpec& spec, std::uint64_t seed, int n) {
  spec.validate();
  if (n < 1) throw ConfigError("generate_task: n must be >= 1");
  std::mt19937_64 rng(seed);
  auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto pick = [&](const std::vector<int>& pool) { return pool[uniform(0, static_cast<int>(pool.size()) - 1)]; };
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Dataset out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int len = uniform(spec.content_len_min, spec.content_len_max);
    const int rating = uniform(1, 5);
    std::vector<int> counts;
    for (int c = 0; c <= len; ++c)
      if (spec.rating_of_count(c, len) == rating) counts.push_back(c);
    if (counts.empty()) throw ConfigError("generate_task: content too short for every rating");
    const int n_pos = counts[uniform(0, static_cast<int>(counts.size()) - 1)];
    std::vector<int> slots(len);
    std::iota(slots.begin(), slots.end(), 0);
    std::shuffle(slots.begin(), slots.end(), rng);
    std::vector<int> content(len);
    for (int k = 0; k < len; ++k) {
      const int slot = slots[k];
      if (k < n_pos) {
        content[slot] = pick(spec.positive_pool);
      } else if (!spec.neutral_pool.empty() && unit(rng) < spec.neutral_rate) {
        content[slot] = pick(spec.neutral_pool);
      } else {
        content[slot] = pick(spec.negative_pool);
      }
    }
    Example e;
    e.tokens = make_prompt(spec, content, spec.format);
    e.rating = rating;
    e.target = spec.target_for(rating, spec.format);
    e.task = to_string(spec.format);
    out.push_back(std::move(e));
  }
  return out;
}

/// The same content re-rendered in another format.
inline Example reformat(const TaskSpec& spec, const Example& e, Format f) {
  Example r = e;
  r.tokens[r.tokens.size() - 2] = spec.format_token(f);
  r.target = spec.target_for(e.rating, f);
  r.task = to_string(f);
  return r;
}

/// key -> value bijection of the knowledge probe (fixed by knowledge_seed).
inline std::vector<int> knowledge_map(const TaskSpec& spec) {
  std::vector<int> perm(spec.knowledge_values.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(spec.knowledge_seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<int> out(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out[i] = spec.knowledge_values[perm[i]];
  return out;
}

/// Binary verification prompts over the memorised key -> value map; half
/// propose the correct value.
inline Dataset generate_knowledge(const TaskSpec& spec, std::uint64_t seed, int n) {
  spec.validate();
  if (n < 1) throw ConfigError("generate_knowledge: n must be >= 1");
  if (spec.knowledge_keys.size() < 2) throw ConfigError("knowledge probe needs at least two keys");
  const auto values = knowledge_map(spec);
  std::mt19937_64 rng(seed);
  const int nk = static_cast<int>(spec.knowledge_keys.size());
  std::uniform_int_distribution<int> key_dist(0, nk - 1);
  std::uniform_int_distribution<int> other_dist(1, nk - 1);
  Dataset out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const int k = key_dist(rng);
    const bool correct = (i % 2) == 0;
    const int proposed = correct ? values[k] : values[(k + other_dist(rng)) % nk];
    Example e;
    e.tokens = {spec.bos, spec.know_token, spec.knowledge_keys[k], proposed, spec.anchor};
    e.target = correct ? spec.yes : spec.no;
    e.rating = 0;
    e.task = "knowledge";
    out.push_back(std::move(e));
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline void save_jsonl(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArtifactError("cannot write '" + path + "'");
  for (const auto& e : d) out << nlohmann::json(e).dump() << '\n';
}

inline Dataset load_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open dataset '" + path + "'");
  Dataset d;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      d.push_back(nlohmann::json::parse(line).get<Example>());
    } catch (const nlohmann::json::exception& e) {
      throw ArtifactError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return d;
}

}  // namespace clens
