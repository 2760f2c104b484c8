#include "clens/tasks/dataset.hpp"
#include "clens/tasks/pairs.hpp"
#include "clens/tasks/train.hpp"
#include "test_common.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

using namespace clens;
using namespace clens::testing;

namespace {

bool same_weights(const Weights<float>& a, const Weights<float>& b) {
  const auto va = param_views(a), vb = param_views(b);
  if (va.size() != vb.size()) return false;
  for (std::size_t t = 0; t < va.size(); ++t) {
    if (va[t].size != vb[t].size) return false;
    if (!std::equal(va[t].data, va[t].data + va[t].size, vb[t].data)) return false;
  }
  return true;
}

TaskSpec short_spec() {
  auto s = TaskSpec::standard();
  s.content_len_min = s.content_len_max = 5;
  return s;
}

}  // namespace

TEST(TaskSpec, StandardLayoutIsValid) {
  const auto s = TaskSpec::standard();
  EXPECT_NO_THROW(s.validate());
  EXPECT_EQ(s.vocab_size(), 74);
  const nlohmann::json j = s;
  const auto back = j.get<TaskSpec>();
  EXPECT_EQ(nlohmann::json(back), j);
}

TEST(TaskSpec, RejectsOverlappingRolesAndSmallPools) {
  auto s = TaskSpec::standard();
  s.yes = s.positive_pool[0];
  EXPECT_THROW(s.validate(), ConfigError);
  s = TaskSpec::standard();
  s.positive_pool.clear();
  EXPECT_THROW(generate_task(s, 1, 10), ConfigError);
  s = TaskSpec::standard();
  s.content_len_min = 3;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(GenerateTask, AllPositiveContentRatesFive) {
  const auto s = TaskSpec::standard();
  const std::vector<int> content(10, s.positive_pool[3]);
  const auto p = make_prompt(s, content, Format::Rating);
  EXPECT_EQ(s.rate_prompt(p), 5);
  EXPECT_EQ(s.target_for(s.rate_prompt(p), Format::Rating), s.rating_tokens[4]);
  EXPECT_EQ(p.back(), s.anchor);
}

TEST(GenerateTask, DeterministicUnderSeed) {
  const auto s = TaskSpec::standard();
  EXPECT_EQ(generate_task(s, 9, 200), generate_task(s, 9, 200));
  EXPECT_NE(generate_task(s, 9, 200), generate_task(s, 10, 200));
}

TEST(GenerateTask, TargetsFollowTheRatingRuleExactly) {
  for (auto f : {Format::Rating, Format::Classification}) {
    auto s = TaskSpec::standard();
    s.format = f;
    for (const auto& e : generate_task(s, 3, 2000)) {
      const int r = s.rate_prompt(e.tokens);
      EXPECT_EQ(r, e.rating);
      EXPECT_EQ(e.target, s.target_for(r, f));
      EXPECT_EQ(e.tokens.back(), s.anchor);
      EXPECT_EQ(static_cast<int>(e.tokens.size()), s.max_prompt_len());
    }
  }
}

TEST(GenerateTask, RatingHistogramIsNearUniform) {
  const auto data = generate_task(TaskSpec::standard(), 11, 10000);
  std::map<int, int> hist;
  for (const auto& e : data) hist[e.rating]++;
  ASSERT_EQ(hist.size(), 5u);
  for (const auto& [r, n] : hist) EXPECT_NEAR(n / 10000.0, 0.2, 0.05) << "rating " << r;
}

TEST(GenerateTask, VariableLengthsAreHonoured) {
  auto s = TaskSpec::standard();
  s.content_len_min = 6;
  s.content_len_max = 9;
  std::set<std::size_t> lens;
  for (const auto& e : generate_task(s, 2, 500)) {
    lens.insert(e.tokens.size());
    EXPECT_EQ(s.rate_prompt(e.tokens), e.rating);
  }
  EXPECT_EQ(lens, (std::set<std::size_t>{9, 10, 11, 12}));
}

TEST(GenerateTask, RejectsNonPositiveCount) {
  EXPECT_THROW(generate_task(TaskSpec::standard(), 1, 0), ConfigError);
}

TEST(Reformat, ChangesOnlyFormatTokenAndTarget) {
  const auto s = TaskSpec::standard();
  for (const auto& e : generate_task(s, 4, 50)) {
    const auto c = reformat(s, e, Format::Classification);
    EXPECT_EQ(c.tokens.size(), e.tokens.size());
    for (std::size_t i = 0; i < e.tokens.size(); ++i)
      if (i != e.tokens.size() - 2) EXPECT_EQ(c.tokens[i], e.tokens[i]);
    EXPECT_EQ(c.tokens[c.tokens.size() - 2], s.class_token);
    EXPECT_EQ(c.target, e.rating >= s.class_threshold ? s.yes : s.no);
  }
}

TEST(Knowledge, BijectionAndDisjointVocabulary) {
  const auto s = TaskSpec::standard();
  const auto vals = knowledge_map(s);
  EXPECT_EQ(std::set<int>(vals.begin(), vals.end()).size(), s.knowledge_keys.size());
  std::set<int> judgment(s.positive_pool.begin(), s.positive_pool.end());
  judgment.insert(s.negative_pool.begin(), s.negative_pool.end());
  judgment.insert(s.neutral_pool.begin(), s.neutral_pool.end());
  for (const auto& e : generate_knowledge(s, 5, 400)) {
    for (int t : {e.tokens[2], e.tokens[3]}) EXPECT_EQ(judgment.count(t), 0u);
    const auto k = std::find(s.knowledge_keys.begin(), s.knowledge_keys.end(), e.tokens[2]) - s.knowledge_keys.begin();
    EXPECT_EQ(e.target == s.yes, vals[k] == e.tokens[3]);
  }
}

TEST(Knowledge, BalancedAnswers) {
  const auto s = TaskSpec::standard();
  int yes = 0;
  const auto d = generate_knowledge(s, 6, 1000);
  for (const auto& e : d) yes += e.target == s.yes;
  EXPECT_EQ(yes, 500);
}

TEST(MinimalPairs, OnlyMiddleRatingsIsAnError) {
  Dataset d;
  for (int i = 0; i < 10; ++i) d.push_back({{0, 12, 24, 13, 25, 26, 1, 4}, 7, 3, "rating"});
  EXPECT_THROW(build_minimal_pairs(d, 1), ConfigError);
}

TEST(MinimalPairs, HundredItemsGiveFiftyBalancedPairs) {
  const auto s = TaskSpec::standard();
  Dataset d;
  for (const auto& e : generate_task(s, 7, 5000)) {
    if (e.rating <= 2 && std::count_if(d.begin(), d.end(), [](auto& x) { return x.rating <= 2; }) < 50) d.push_back(e);
    if (e.rating >= 4 && std::count_if(d.begin(), d.end(), [](auto& x) { return x.rating >= 4; }) < 50) d.push_back(e);
  }
  ASSERT_EQ(d.size(), 100u);
  const auto pairs = build_minimal_pairs(d, 3);
  ASSERT_EQ(pairs.size(), 50u);
  int pos = 0;
  for (const auto& p : pairs) pos += p.polarity > 0;
  EXPECT_EQ(pos, 25);
}

TEST(MinimalPairs, DifferOnlyAtContentPositions) {
  auto s = TaskSpec::standard();
  s.content_len_min = 7;
  s.content_len_max = 10;
  const auto pairs = build_minimal_pairs(generate_task(s, 8, 1500), 4);
  int pos = 0;
  for (const auto& p : pairs) {
    ASSERT_EQ(p.clean.tokens.size(), p.corrupt.tokens.size());
    const std::size_t n = p.clean.tokens.size();
    for (std::size_t i = 0; i < n; ++i) {
      const bool content = i >= 1 && i + 2 < n;
      if (!content) EXPECT_EQ(p.clean.tokens[i], p.corrupt.tokens[i]) << "position " << i;
    }
    EXPECT_EQ(p.polarity, p.clean.rating > p.corrupt.rating ? 1 : -1);
    EXPECT_TRUE((p.clean.rating <= 2 && p.corrupt.rating >= 4) || (p.clean.rating >= 4 && p.corrupt.rating <= 2));
    pos += p.polarity > 0;
  }
  EXPECT_LE(std::abs(2 * pos - static_cast<int>(pairs.size())), 1);
}

TEST(RightAlign, AnchorsShareMinusOne) {
  MinimalPair a, b;
  a.clean.tokens.assign(18, 0);
  b.clean.tokens.assign(20, 0);
  const auto al = right_align({a, b});
  EXPECT_EQ(al[0].to_aligned(17), -1);
  EXPECT_EQ(al[1].to_aligned(19), -1);
  EXPECT_EQ(al[1].to_aligned(0), -20);
  for (int p = 0; p < 20; ++p) EXPECT_EQ(al[1].from_aligned(al[1].to_aligned(p)), p);
}

TEST(Dataset, JsonlRoundTrip) {
  const auto dir = temp_dir("jsonl");
  const auto d = generate_task(TaskSpec::standard(), 12, 30);
  save_jsonl(d, (dir / "d.jsonl").string());
  EXPECT_EQ(load_jsonl((dir / "d.jsonl").string()), d);
  EXPECT_THROW(load_jsonl((dir / "missing.jsonl").string()), ArtifactError);
}

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
  const auto s = short_spec();
  ModelSpec m = small_spec(1, 2, 4, s.vocab_size(), s.max_prompt_len());
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 4;
  cfg.lr = 0;
  const auto res = train(m, generate_task(s, 1, 20), cfg);
  const auto init = random_weights<float>(m, cfg.seed, cfg.init_std);
  EXPECT_TRUE(same_weights(res.weights, init));
}

TEST(Train, DeterministicUnderSeed) {
  const auto s = short_spec();
  ModelSpec m = small_spec(1, 2, 4, s.vocab_size(), s.max_prompt_len());
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch_size = 8;
  const auto data = generate_task(s, 2, 40);
  const auto a = train(m, data, cfg);
  cfg.threads = 3;
  const auto b = train(m, data, cfg);
  EXPECT_TRUE(same_weights(a.weights, b.weights));
  EXPECT_EQ(a.log.back().loss, b.log.back().loss);
}

TEST(Train, LearnsASmallTaskAndReportsAccuracy) {
  const auto s = short_spec();
  ModelSpec m = small_spec(1, 4, 8, s.vocab_size(), s.max_prompt_len());
  m.d_mlp = 64;
  TrainConfig cfg;
  cfg.steps = 200;
  cfg.batch_size = 16;
  cfg.lr = 3e-3;
  cfg.log_every = 10;
  Dataset data = generate_knowledge(s, 3, 200);
  const auto res = train(m, data, cfg);
  ASSERT_EQ(res.accuracy.count("knowledge"), 1u);
  EXPECT_LT(res.log.back().loss, res.log.front().loss);
  EXPECT_GT(res.accuracy.at("knowledge"), 0.5);
}

TEST(Train, Errors) {
  const auto s = short_spec();
  ModelSpec m = small_spec(1, 2, 4, 10, 8);
  EXPECT_THROW(train(m, {}, TrainConfig{}), ConfigError);
  EXPECT_THROW(train(m, generate_task(s, 1, 5), TrainConfig{}), ConfigError);  // vocab too small
}

TEST(Train, DivergenceCarriesLastStableWeights) {
  const auto s = short_spec();
  ModelSpec m = small_spec(1, 2, 4, s.vocab_size(), s.max_prompt_len());
  TrainConfig cfg;
  cfg.steps = 50;
  cfg.batch_size = 4;
  cfg.lr = 1e30;
  try {
    train(m, generate_task(s, 1, 20), cfg);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    for (const auto& p : param_views(e.last_stable()))
      for (std::size_t i = 0; i < p.size; ++i) ASSERT_TRUE(std::isfinite(p.data[i]));
  }
}

TEST(MinimalPairs, JsonlRoundTripAndValidation) {
  const auto pairs = build_minimal_pairs(generate_task(TaskSpec::standard(), 21, 60), 22);
  const std::string path = ::testing::TempDir() + "clens_pairs.jsonl";
  save_pairs_jsonl(pairs, path);
  const auto back = load_pairs_jsonl(path);
  ASSERT_EQ(back.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(back[i].clean, pairs[i].clean);
    EXPECT_EQ(back[i].corrupt, pairs[i].corrupt);
    EXPECT_EQ(back[i].polarity, pairs[i].polarity);
  }
  auto bad = nlohmann::json(pairs.front());
  bad["polarity"] = 0;
  std::ofstream(path) << bad.dump() << "\n";
  EXPECT_THROW(load_pairs_jsonl(path), ArtifactError);
  bad = nlohmann::json(pairs.front());
  bad["corrupt"]["tokens"].push_back(1);
  std::ofstream(path) << bad.dump() << "\n";
  EXPECT_THROW(load_pairs_jsonl(path), ArtifactError);
  EXPECT_THROW(load_pairs_jsonl(path + ".missing"), ArtifactError);
}
