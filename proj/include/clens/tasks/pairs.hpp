#pragma once

#include "clens/error.hpp"
#include "clens/tasks/dataset.hpp"

#include <fstream>
#include <map>
#include <random>
#include <vector>

namespace clens {

/// Length-matched clean/corrupted prompts with opposed ground-truth ratings.
/// `polarity` is sign(clean_rating - corrupt_rating).
struct MinimalPair {
  Example clean;
  Example corrupt;
  int polarity = 1;

  int length() const { return static_cast<int>(clean.tokens.size()); }
};

/// Pairs low (<= 2) with high (>= 4) rated prompts of the same task and
/// length. Pair i puts the higher rating on the clean side when i is even,
/// so polarities stay balanced to within one pair.
inline std::vector<MinimalPair> build_minimal_pairs(const Dataset& data, std::uint64_t seed) {
  std::map<std::pair<std::string, std::size_t>, std::pair<std::vector<int>, std::vector<int>>> groups;
  for (int i = 0; i < static_cast<int>(data.size()); ++i) {
    const auto& e = data[i];
    auto& g = groups[{e.task, e.tokens.size()}];
    if (e.rating >= 1 && e.rating <= 2) g.first.push_back(i);
    if (e.rating >= 4) g.second.push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<MinimalPair> pairs;
  for (auto& [key, g] : groups) {
    auto& [low, high] = g;
    std::shuffle(low.begin(), low.end(), rng);
    std::shuffle(high.begin(), high.end(), rng);
    const std::size_t n = std::min(low.size(), high.size());
    for (std::size_t k = 0; k < n; ++k) {
      MinimalPair p;
      const bool high_clean = pairs.size() % 2 == 0;
      p.clean = data[high_clean ? high[k] : low[k]];
      p.corrupt = data[high_clean ? low[k] : high[k]];
      p.polarity = high_clean ? 1 : -1;
      pairs.push_back(std::move(p));
    }
  }
  if (pairs.empty()) throw ConfigError("build_minimal_pairs: insufficient opposed-label instances");
  return pairs;
}

inline void to_json(nlohmann::json& j, const MinimalPair& p) {
  j = nlohmann::json{{"clean", p.clean}, {"corrupt", p.corrupt}, {"polarity", p.polarity}};
}

inline void from_json(const nlohmann::json& j, MinimalPair& p) {
  p.clean = j.at("clean").get<Example>();
  p.corrupt = j.at("corrupt").get<Example>();
  p.polarity = j.at("polarity").get<int>();
  if (p.polarity != 1 && p.polarity != -1) throw ConfigError("pair polarity must be +1 or -1");
}

inline void save_pairs_jsonl(const std::vector<MinimalPair>& pairs, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArtifactError("cannot write '" + path + "'");
  for (const auto& p : pairs) out << nlohmann::json(p).dump() << '\n';
}

inline std::vector<MinimalPair> load_pairs_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open pairs '" + path + "'");
  std::vector<MinimalPair> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      pairs.push_back(nlohmann::json::parse(line).get<MinimalPair>());
    } catch (const nlohmann::json::exception& e) {
      throw ArtifactError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ArtifactError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (pairs.back().clean.tokens.size() != pairs.back().corrupt.tokens.size())
      throw ArtifactError(path + ":" + std::to_string(lineno) + ": pair prompts differ in length");
  }
  return pairs;
}

inline MinimalPair reformat(const TaskSpec& spec, const MinimalPair& p, Format f) {
  return {reformat(spec, p.clean, f), reformat(spec, p.corrupt, f), p.polarity};
}

/// Positions counted from the end: the final (anchor) token is -1.
struct RightAlignment {
  int length = 0;
  int to_aligned(int pos) const { return pos - length; }
  int from_aligned(int aligned) const { return length + aligned; }
};

inline std::vector<RightAlignment> right_align(const std::vector<MinimalPair>& pairs) {
  std::vector<RightAlignment> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.length()});
  return out;
}

}  // namespace clens
