#include "clens/attribution/edges.hpp"
#include "clens/attribution/peap.hpp"
#include "clens/attribution/table.hpp"
#include "clens/circuits/circuit.hpp"
#include "clens/circuits/export.hpp"
#include "clens/circuits/reliability.hpp"
#include "clens/error.hpp"
#include "clens/interventions/ablation.hpp"
#include "clens/interventions/faithfulness.hpp"
#include "clens/interventions/fti.hpp"
#include "clens/interventions/lens.hpp"
#include "clens/interventions/steering.hpp"
#include "clens/model/checkpoint.hpp"
#include "clens/signals/signals.hpp"
#include "clens/tasks/dataset.hpp"
#include "clens/tasks/pairs.hpp"
#include "clens/tasks/train.hpp"
#include "clens/util/hash.hpp"
#include "clens/util/parallel.hpp"
#include "clens/util/rng.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace clens;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kVersion = CLENS_VERSION;

void progress(const std::string& phase, double pct) {
  std::fprintf(stderr, "phase=%s pct=%d\n", phase.c_str(), static_cast<int>(std::clamp(pct, 0.0, 100.0)));
  std::fflush(stderr);
}

std::string num(double v) { return detail::fmt_double(v); }

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '"', '\'');
  return s;
}

/// Definition of one subcommand: its config fields with defaults, which of
/// them name input files, and the body.
struct Run;
struct Command {
  std::string name;
  std::string help;
  json defaults;
  std::set<std::string> path_keys;
  bool stochastic = false;
  std::function<void(Run&)> body;
};

/// One execution: effective config, a private staging directory and the
/// manifest being assembled.
struct Run {
  const Command* cmd = nullptr;
  json cfg;
  std::string config_hash;
  std::string run_id;
  fs::path out_root;
  fs::path stage;
  int threads = 1;
  json inputs = json::object();
  json outputs = json::object();
  json seeds = json::object();
  json summary = json::object();
  json weights_hash = nullptr;

  std::uint64_t seed() const {
    if (cfg.at("seed").is_null()) throw ConfigError(cmd->name + ": --seed is required");
    return cfg.at("seed").get<std::uint64_t>();
  }

  std::uint64_t derived(const std::string& name, std::uint64_t index) {
    const auto s = util::derive_seed(seed(), index);
    seeds[name] = s;
    return s;
  }

  bool has(const std::string& key) const { return cfg.contains(key) && !cfg.at(key).is_null(); }

  std::string input_path(const std::string& key) {
    if (!has(key)) throw ConfigError(cmd->name + ": '" + key + "' is required");
    return input_file(key, cfg.at(key).get<std::string>());
  }

  std::string input_file(const std::string& label, const std::string& path) {
    if (!fs::is_regular_file(path)) throw ArtifactError("missing artifact '" + path + "'");
    inputs[label] = {{"path", path}, {"hash", util::file_hash(path)}};
    return path;
  }

  void write(const std::string& name, const std::string& bytes) {
    const fs::path p = stage / name;
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw ArtifactError("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArtifactError("write failed for " + p.string());
    outputs[name] = util::git_blob_hash(bytes);
  }

  TaskSpec task() const {
    auto t = cfg.at("task").get<TaskSpec>();
    t.validate();
    return t;
  }

  Weights<double> weights(const TaskSpec* task = nullptr) {
    const auto path = input_path("weights");
    const auto w = load_checkpoint(path);
    weights_hash = inputs["weights"]["hash"];
    if (task && task->vocab_size() > w.spec.vocab_size)
      throw ConfigError("task vocabulary exceeds the model's vocabulary");
    return cast_weights<double>(w);
  }

  json manifest() const {
    return {{"toolkit", "clens"},       {"version", kVersion},         {"command", cmd->name},
            {"run_id", run_id},         {"config", cfg},                {"config_hash", config_hash},
            {"seeds", seeds},           {"weights_hash", weights_hash}, {"inputs", inputs},
            {"outputs", outputs},       {"summary", summary}};
  }

  /// Writes the manifest and moves the staged directory to its run id.
  void commit() {
    const auto text = manifest().dump(2) + "\n";
    std::ofstream(stage / "manifest.json", std::ios::binary) << text;
    const fs::path dest = out_root / run_id;
    if (fs::exists(dest)) throw ConfigError("run id '" + run_id + "' already exists");
    fs::rename(stage, dest);
    stage.clear();
  }

  ~Run() {
    std::error_code ec;
    if (!stage.empty()) fs::remove_all(stage, ec);
  }
};

/// Flag text to JSON: a JSON literal when it parses, a comma list when the
/// field is an array, otherwise a string.
json parse_value(const std::string& text, const json& like) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
  }
  if (like.is_array()) {
    json arr = json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) arr.push_back(parse_value(item, json()));
    return arr;
  }
  if (like.is_object()) {
    json obj = json::object();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw ConfigError("expected name=value pairs, got '" + item + "'");
      obj[item.substr(0, eq)] = parse_value(item.substr(eq + 1), json());
    }
    return obj;
  }
  return text;
}

void set_dotted(json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  json* node = &cfg;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i]) || !(*node)[parts[i]].is_object())
      throw ConfigError("--set: '" + key + "' is not a config field");
    node = &(*node)[parts[i]];
  }
  if (parts.empty() || (node == &cfg && !node->contains(parts.back())))
    throw ConfigError("--set: '" + key + "' is not a config field");
  const json like = node->contains(parts.back()) ? (*node)[parts.back()] : json();
  (*node)[parts.back()] = parse_value(assignment.substr(eq + 1), like);
}

std::string absolute(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

void resolve_paths(json& cfg, const std::set<std::string>& keys) {
  for (const auto& k : keys) {
    if (!cfg.contains(k)) continue;
    auto& v = cfg[k];
    if (v.is_string()) v = absolute(v.get<std::string>());
    if (v.is_object())
      for (auto& [name, p] : v.items())
        if (p.is_string()) p = absolute(p.get<std::string>());
  }
}

/// Merge order: defaults, then matching fields of the config file, then flags.
json effective_config(const Command& c, const std::string& config_file, const std::map<std::string, std::string>& flags,
                      const std::vector<std::string>& sets) {
  json cfg = c.defaults;
  if (!config_file.empty()) {
    if (!fs::is_regular_file(config_file)) throw ArtifactError("missing config file '" + config_file + "'");
    json file;
    try {
      file = json::parse(util::read_file(config_file));
    } catch (const json::exception& e) {
      throw ConfigError("config file: " + std::string(e.what()));
    }
    if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
    for (auto& [k, v] : file.items())
      if (cfg.contains(k)) {
        if (cfg[k].is_object() && v.is_object())
          cfg[k].update(v);
        else
          cfg[k] = v;
      }
  }
  for (const auto& [k, text] : flags) cfg[k] = parse_value(text, c.defaults.at(k));
  for (const auto& s : sets) set_dotted(cfg, s);
  if (c.stochastic && cfg.at("seed").is_null()) throw ConfigError(c.name + ": --seed is required");
  resolve_paths(cfg, c.path_keys);
  return cfg;
}

// ---------------------------------------------------------------------------
// shared loaders

Format run_format(const Run& r) { return format_from_string(r.cfg.at("format").get<std::string>()); }

std::vector<MinimalPair> load_pairs(Run& r, const TaskSpec& task) {
  auto pairs = load_pairs_jsonl(r.input_path("pairs"));
  const int n = r.cfg.value("n_pairs", 0);
  if (n < 0) throw ConfigError("n_pairs must be >= 0");
  if (n > 0 && static_cast<std::size_t>(n) < pairs.size()) pairs.resize(n);
  if (pairs.empty()) throw ConfigError("no pairs in '" + r.cfg.at("pairs").get<std::string>() + "'");
  if (r.has("format")) {
    const auto f = run_format(r);
    for (auto& p : pairs) p = reformat(task, p, f);
  }
  return pairs;
}

std::vector<std::vector<int>> load_prompts(Run& r, Dataset* keep = nullptr) {
  auto data = load_jsonl(r.input_path("prompts"));
  const int n = r.cfg.value("n_prompts", 0);
  if (n > 0 && static_cast<std::size_t>(n) < data.size()) data.resize(n);
  if (data.empty()) throw ConfigError("no prompts");
  std::vector<std::vector<int>> out;
  for (const auto& e : data) out.push_back(e.tokens);
  if (keep) *keep = std::move(data);
  return out;
}

int max_length(const std::vector<MinimalPair>& pairs) {
  int T = 0;
  for (const auto& p : pairs) T = std::max(T, p.length());
  return T;
}

std::vector<PairRuns<double>> pair_runs(const Weights<double>& w, const std::vector<MinimalPair>& pairs,
                                        const RatingScale& scale, int threads) {
  std::vector<PairRuns<double>> runs(pairs.size());
  util::parallel_for(pairs.size(), threads, [&](std::size_t i) { runs[i] = run_pair(w, pairs[i], scale); });
  return runs;
}

PeapOptions peap_options(const Run& r) {
  PeapOptions o;
  o.mode = backward_mode_from_string(r.cfg.at("mode").get<std::string>());
  o.min_gap = r.cfg.at("min_gap").get<double>();
  return o;
}

/// Table ranking followed by the universe edges the table lacks, in storage
/// order, so that the ranking covers the whole universe.
std::vector<EdgeRef> full_ranking(const AttributionTable& table, const ModelSpec& spec, int T) {
  std::vector<EdgeRef> ranking;
  if (!table.empty()) ranking = ranked_edges(top_k(table, static_cast<int>(table.size())));
  const std::set<EdgeRef> seen(ranking.begin(), ranking.end());
  for (const auto& e : edge_universe(spec, T))
    if (!seen.count(e)) ranking.push_back(e);
  return ranking;
}

NodeRef parse_node(const std::string& s) {
  const auto at = s.find('@');
  NodeRef n{parse_component(s.substr(0, at)), std::nullopt};
  if (at != std::string::npos) {
    try {
      n.position = std::stoi(s.substr(at + 1));
    } catch (const std::logic_error&) {
      throw ConfigError("bad node position in '" + s + "'");
    }
  }
  return n;
}

std::string node_name(const NodeRef& n) {
  return to_string(n.comp) + (n.position ? "@" + std::to_string(*n.position) : std::string());
}

std::vector<NodeRef> hooks_of(const Run& r, const ModelSpec& spec) {
  std::vector<NodeRef> hooks;
  for (const auto& h : r.cfg.at("hooks")) hooks.push_back(parse_node(h.get<std::string>()));
  if (hooks.empty())
    for (int l = 0; l < spec.n_layers; ++l) hooks.push_back({Component::mlp(l), -1});
  return hooks;
}

/// Heads and MLPs named in `nodes`, or the senders of `circuit`.
std::set<Component> components_of(Run& r, const std::string& list_key) {
  std::set<Component> out;
  for (const auto& c : r.cfg.at(list_key)) out.insert(parse_component(c.get<std::string>()));
  if (r.has("circuit")) {
    const auto extra = sender_components(load_circuit(r.input_path("circuit")));
    out.insert(extra.begin(), extra.end());
  }
  return out;
}

std::string metric_rows(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::string out = "metric,value\n";
  for (const auto& [k, v] : rows) out += k + "," + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// subcommands

void cmd_gen_data(Run& r) {
  const auto task = r.task();
  const int n_train = r.cfg.at("n_train").get<int>();
  const int n_eval = r.cfg.at("n_eval").get<int>();
  const int n_know = r.cfg.at("n_knowledge").get<int>();
  auto rated = [&](Format f, std::uint64_t seed, int n) {
    Dataset d = generate_task(task, seed, n);
    for (auto& e : d) e = reformat(task, e, f);
    return d;
  };
  auto dump = [](const Dataset& d) {
    std::string s;
    for (const auto& e : d) s += json(e).dump() + "\n";
    return s;
  };
  progress("gen-data", 0);
  const auto rate_train = rated(Format::Rating, r.derived("rating_train", 0), n_train);
  const auto class_train = rated(Format::Classification, r.derived("classification_train", 1), n_train);
  const auto know_train = generate_knowledge(task, r.derived("knowledge_train", 2), n_know);
  const auto rate_eval = rated(Format::Rating, r.derived("rating_eval", 3), n_eval);
  const auto class_eval = rated(Format::Classification, r.derived("classification_eval", 4), n_eval);
  const auto know_eval = generate_knowledge(task, r.derived("knowledge_eval", 5), n_eval);
  Dataset all = rate_train;
  all.insert(all.end(), class_train.begin(), class_train.end());
  all.insert(all.end(), know_train.begin(), know_train.end());
  r.write("train.jsonl", dump(all));
  r.write("rating_eval.jsonl", dump(rate_eval));
  r.write("classification_eval.jsonl", dump(class_eval));
  r.write("knowledge_eval.jsonl", dump(know_eval));
  progress("gen-data", 60);
  const auto pairs = build_minimal_pairs(rate_eval, r.derived("pairs", 6));
  std::string ps;
  for (const auto& p : pairs) ps += json(p).dump() + "\n";
  r.write("pairs.jsonl", ps);
  r.summary = {{"train_examples", all.size()}, {"eval_examples", rate_eval.size()}, {"pairs", pairs.size()}};
  progress("gen-data", 100);
}

void cmd_train(Run& r) {
  const auto task = r.task();
  const auto spec = r.cfg.at("model").get<ModelSpec>();
  spec.validate();
  if (task.vocab_size() > spec.vocab_size || task.max_prompt_len() > spec.max_seq)
    throw ConfigError("model vocabulary or context is too small for the task");
  auto tc = r.cfg.at("train").get<TrainConfig>();
  tc.seed = r.seed();
  r.seeds["init_and_batches"] = tc.seed;
  tc.threads = r.threads;
  const auto data = load_jsonl(r.input_path("data"));
  std::map<std::string, Dataset> suites;
  for (const auto& [name, p] : r.cfg.at("eval").items())
    suites[name] = load_jsonl(r.input_file("eval." + name, p.get<std::string>()));

  auto log_csv = [](const std::vector<TrainLogEntry>& log) {
    std::string s = "step,loss\n";
    for (const auto& e : log) s += std::to_string(e.step) + "," + num(e.loss) + "\n";
    return s;
  };
  progress("train", 0);
  TrainResult res;
  try {
    res = train(spec, data, tc, [&](int step, double) { progress("train", 100.0 * step / std::max(1, tc.steps)); });
  } catch (const TrainingDiverged& e) {
    r.write("last_stable.clns", encode_checkpoint(e.last_stable()));
    r.summary = {{"status", "diverged"}};
    r.weights_hash = r.outputs["last_stable.clns"];
    r.commit();
    throw;
  }
  r.write("model.clns", encode_checkpoint(res.weights));
  r.weights_hash = r.outputs["model.clns"];
  r.write("train_log.csv", log_csv(res.log));
  std::string acc = "split,task,accuracy\n";
  for (const auto& [t, a] : res.accuracy) acc += "train," + t + "," + num(a) + "\n";
  const auto wd = cast_weights<double>(res.weights);
  for (const auto& [name, d] : suites) {
    const double a = suite_accuracy(wd, d, {}, r.threads);
    acc += "eval," + name + "," + num(a) + "\n";
    r.summary["eval_accuracy." + name] = a;
  }
  r.write("accuracy.csv", acc);
  for (const auto& [t, a] : res.accuracy) r.summary["train_accuracy." + t] = a;
  if (!res.log.empty()) r.summary["final_loss"] = res.log.back().loss;
  r.summary["status"] = "ok";
  progress("train", 100);
}

void cmd_trace(Run& r) {
  const auto task = r.task();
  const auto w = r.weights(&task);
  const auto pairs = load_pairs(r, task);
  const auto scale = task.scale_for(run_format(r));
  progress("trace.score", 0);
  const auto scored = score_pairs(w, pairs, scale, peap_options(r), r.threads);
  progress("trace.score", 90);
  if (scored.tables.empty()) throw PairRejected("trace: every pair fell below min_gap");
  const int min_pairs = r.has("min_pairs") ? r.cfg.at("min_pairs").get<int>() : default_min_pairs(scored.tables.size());
  auto table = aggregate(scored.tables, min_pairs);
  table.provenance.mode = peap_options(r).mode;
  table.provenance.task = to_string(run_format(r));
  bool truncated = false;
  const int k = r.cfg.at("k").get<int>();
  const auto circuit = top_k(apply_layer_floor(table, r.cfg.at("layer_floor").get<int>()), k, &truncated);
  r.write("table.csv", table_to_csv(table));
  r.write("circuit.csv", circuit_to_csv(circuit));
  r.write("circuit.dot", circuit_to_dot(circuit, w.spec));
  r.write("heatmap.csv", circuit_to_heatmap_csv(circuit, max_length(pairs)));
  std::string status = "pair,status\n";
  for (int i : scored.used) status += std::to_string(i) + ",used\n";
  for (int i : scored.rejected) status += std::to_string(i) + ",rejected\n";
  r.write("pairs_status.csv", status);
  r.summary = {{"pairs_used", scored.used.size()},
               {"pairs_rejected", scored.rejected.size()},
               {"table_edges", table.size()},
               {"circuit_edges", circuit.size()},
               {"truncated", truncated}};
  progress("trace", 100);
}

void cmd_overlap(Run& r) {
  const auto a = load_circuit(r.input_file("circuit_a", r.cfg.at("circuit_a").get<std::string>()));
  const auto b = load_circuit(r.input_file("circuit_b", r.cfg.at("circuit_b").get<std::string>()));
  std::vector<std::pair<std::string, std::string>> rows;
  const double edge_iou = iou(a, b, Grain::Edge);
  rows.push_back({"edge_iou", num(edge_iou)});
  r.summary["edge_iou"] = edge_iou;
  try {
    const double node_iou = iou(a, b, Grain::Node);
    rows.push_back({"node_iou", num(node_iou)});
    r.summary["node_iou"] = node_iou;
  } catch (const ConfigError&) {
    rows.push_back({"node_iou", "undefined"});
  }
  const auto split = le_tf_decompose(a, b);
  rows.push_back({"size_a", std::to_string(a.size())});
  rows.push_back({"size_b", std::to_string(b.size())});
  rows.push_back({"le_edges", std::to_string(split.le.size())});
  rows.push_back({"tf_a_edges", std::to_string(split.tf_rate.size())});
  rows.push_back({"tf_b_edges", std::to_string(split.tf_class.size())});
  r.summary["le_edges"] = split.le.size();
  if (r.has("weights")) {
    const auto w = r.weights();
    int T = r.cfg.at("length").get<int>();
    for (const auto* c : {&a, &b})
      for (const auto& e : c->edges) T = std::max(T, -e.edge.src);
    const auto universe = edge_universe(w.spec, T);
    rows.push_back({"median_layer_universe", num(median_layer(universe.begin(), universe.end(), w.spec))});
    if (!split.le.empty()) rows.push_back({"median_layer_le", num(median_layer(split.le, w.spec))});
    const int samples = r.cfg.at("null_samples").get<int>();
    if (samples > 0) {
      const int k = static_cast<int>(std::min(a.size(), b.size()));
      const auto null = structural_null(universe, universe, k, samples, r.cfg.at("q").get<double>(),
                                        r.derived("null", 0), r.threads);
      rows.push_back({"null_quantile", num(null.value)});
      rows.push_back({"null_mean", num(null.mean)});
      r.summary["null_quantile"] = null.value;
    }
  }
  r.write("overlap.csv", metric_rows(rows));
  r.write("le.csv", circuit_to_csv(split.le));
  progress("overlap", 100);
}

void cmd_split_half(Run& r) {
  const auto task = r.task();
  const auto w = r.weights(&task);
  const auto pairs = load_pairs(r, task);
  const auto scale = task.scale_for(run_format(r));
  progress("split-half.score", 0);
  const auto scored = score_pairs(w, pairs, scale, peap_options(r), r.threads);
  progress("split-half.score", 70);
  SplitHalfOptions opt;
  opt.n_partitions = r.cfg.at("partitions").get<int>();
  opt.spearman_brown = r.cfg.at("spearman_brown").get<bool>();
  opt.layer_floor = r.cfg.at("layer_floor").get<int>();
  opt.min_pairs_fraction = r.cfg.at("min_pairs_fraction").get<double>();
  opt.threads = r.threads;
  const int k = r.cfg.at("k").get<int>();
  const auto res = split_half(scored.tables, k, r.derived("partitions", 0), opt);
  std::string s = "partition,iou\n";
  for (std::size_t i = 0; i < res.iou.size(); ++i) s += std::to_string(i) + "," + num(res.iou[i]) + "\n";
  r.write("split_half.csv", s);
  std::vector<std::pair<std::string, std::string>> rows{{"pairs_used", std::to_string(scored.tables.size())},
                                                        {"mean_iou", num(res.mean)},
                                                        {"sd_iou", num(res.sd)}};
  r.summary = {{"mean_iou", res.mean}, {"sd_iou", res.sd}, {"pairs_used", scored.tables.size()}};
  const int samples = r.cfg.at("null_samples").get<int>();
  if (samples > 0) {
    const auto universe = edge_universe(w.spec, max_length(pairs));
    const auto null = structural_null(universe, universe, std::min<int>(k, universe.size()), samples,
                                      r.cfg.at("q").get<double>(), r.derived("null", 1), r.threads);
    rows.push_back({"null_quantile", num(null.value)});
    rows.push_back({"null_mean", num(null.mean)});
    rows.push_back({"exceeds_null", res.mean > null.value ? "1" : "0"});
    r.summary["null_quantile"] = null.value;
  }
  r.write("split_half_summary.csv", metric_rows(rows));
  progress("split-half", 100);
}

void cmd_faithfulness(Run& r) {
  const auto task = r.task();
  const auto w = r.weights(&task);
  const auto pairs = load_pairs(r, task);
  const auto scale = task.scale_for(run_format(r));
  const auto table = load_table(r.input_path("table"));
  const int T = max_length(pairs);
  const auto ranking = full_ranking(table, w.spec, T);
  const auto random = random_ranking(edge_universe(w.spec, T), r.derived("random_ranking", 0));
  auto grid = r.cfg.at("k_grid").get<std::vector<int>>();
  if (r.cfg.at("include_universe").get<bool>()) grid.push_back(static_cast<int>(ranking.size()));
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  grid.erase(std::remove_if(grid.begin(), grid.end(), [&](int k) { return k > static_cast<int>(ranking.size()); }),
             grid.end());
  progress("faithfulness.runs", 0);
  const auto runs = pair_runs(w, pairs, scale, r.threads);
  FaithOptions opt;
  opt.min_gap = r.cfg.at("min_gap").get<double>();
  opt.bootstrap = r.cfg.at("bootstrap").get<int>();
  opt.threads = r.threads;
  std::string curve = "method,k,median,mean,ci_low,ci_high,used,skipped\n";
  std::string pooled = "method,k,value\n";
  int method_index = 0;
  for (const auto& [method, rank] : {std::pair{"peap", &ranking}, std::pair{"random", &random}}) {
    progress(std::string("faithfulness.") + method, 10 + 45 * method_index);
    opt.seed = r.derived(std::string("bootstrap_") + method, 10 + method_index++);
    const auto c = faithfulness_curve(w, runs, *rank, grid, scale, opt);
    for (const auto& p : c.points)
      curve += std::string(method) + "," + std::to_string(p.k) + "," + num(p.median) + "," + num(p.mean) + "," +
               num(p.ci_low) + "," + num(p.ci_high) + "," + std::to_string(p.used) + "," +
               std::to_string(p.skipped) + "\n";
    for (const auto& p : pooled_faithfulness(w, runs, *rank, grid, scale, r.threads))
      pooled += std::string(method) + "," + std::to_string(p.k) + "," + num(p.value) + "\n";
    if (!c.points.empty()) {
      r.summary[std::string(method) + ".median_at_0"] = c.points.front().median;
      r.summary[std::string(method) + ".median_at_max"] = c.points.back().median;
      r.summary["pairs_used"] = c.points.front().used;
    }
  }
  r.write("faithfulness.csv", curve);
  r.write("pooled.csv", pooled);
  r.summary["universe"] = ranking.size();
  progress("faithfulness", 100);
}

void cmd_ablate(Run& r) {
  const auto task = r.task();
  const auto w = r.weights(&task);
  const auto pairs = load_pairs(r, task);
  const auto table = load_table(r.input_path("table"));
  auto ranking = full_ranking(table, w.spec, max_length(pairs));
  const int k = r.cfg.at("k").get<int>();
  if (k < 1) throw ConfigError("ablate: k must be >= 1");
  if (static_cast<std::size_t>(k) < ranking.size()) ranking.resize(k);
  progress("ablate", 0);
  const auto traj = iterative_ablation(w, pairs, ranking, task.scale_for(run_format(r)),
                                       r.cfg.at("step").get<int>(), r.threads);
  std::string s = "edges,mean_ev,accuracy\n";
  for (const auto& a : traj) s += std::to_string(a.edges) + "," + num(a.mean_ev) + "," + num(a.accuracy) + "\n";
  r.write("ablation.csv", s);
  const double ratio = phase_transition_ratio(traj);
  r.write("ablation_summary.csv", metric_rows({{"phase_transition_ratio", num(ratio)}}));
  r.summary["phase_transition_ratio"] = std::isfinite(ratio) ? json(ratio) : json(num(ratio));
  progress("ablate", 100);
}

void cmd_zero_ablate(Run& r) {
  const auto w = r.weights();
  const auto comps = components_of(r, "components");
  std::map<std::string, Dataset> suites;
  for (const auto& [name, p] : r.cfg.at("suites").items())
    suites[name] = load_jsonl(r.input_file("suite." + name, p.get<std::string>()));
  if (suites.empty()) throw ConfigError("zero-ablate: no suites");
  for (const auto& c : comps) Topology(w.spec).check(c);
  progress("zero-ablate", 0);
  const auto res = zero_ablate_eval(w, comps, suites, r.threads);
  std::string s = "suite,before,after,delta\n";
  for (const auto& [name, d] : res) {
    s += name + "," + num(d.before) + "," + num(d.after) + "," + num(d.delta()) + "\n";
    r.summary["delta." + name] = d.delta();
  }
  r.write("zero_ablate.csv", s);
  std::string cs = "component\n";
  for (const auto& c : comps) cs += to_string(c) + "\n";
  r.write("components.csv", cs);
  progress("zero-ablate", 100);
}

void cmd_fti(Run& r) {
  const auto task = r.task();
  const auto w = r.weights(&task);
  auto pairs = load_pairs_jsonl(r.input_path("pairs"));
  const int n = r.cfg.at("n_pairs").get<int>();
  if (n > 0 && static_cast<std::size_t>(n) < pairs.size()) pairs.resize(n);
  const auto nodes = components_of(r, "nodes");
  progress("fti", 0);
  const auto rep = fti(w, fti_instances(task, pairs), nodes, task.class_labels(), task.rating_scale(),
                       r.cfg.at("min_source_ev").get<double>(), r.threads);
  std::string s =
      "instance,source_ev,included,base_argmax,patched_argmax,base_positive,patched_positive,patched_top_token,"
      "flipped\n";
  for (std::size_t i = 0; i < rep.records.size(); ++i) {
    const auto& x = rep.records[i];
    s += std::to_string(i) + "," + num(x.source_ev) + "," + (x.included ? "1" : "0") + "," +
         std::to_string(x.base_argmax) + "," + std::to_string(x.patched_argmax) + "," + num(x.base_positive) + "," +
         num(x.patched_positive) + "," + std::to_string(x.patched_top_token) + "," + (x.flipped ? "1" : "0") + "\n";
  }
  r.write("fti.csv", s);
  r.write("fti_summary.csv", metric_rows({{"candidates", std::to_string(rep.candidates)},
                                          {"n", std::to_string(rep.n)},
                                          {"flips", std::to_string(rep.flips)},
                                          {"flip_rate", num(rep.flip_rate())},
                                          {"out_of_label", std::to_string(rep.out_of_label)},
                                          {"base_mean", num(rep.base_mean)},
                                          {"base_sd", num(rep.base_sd)},
                                          {"patched_mean", num(rep.patched_mean)},
                                          {"patched_sd", num(rep.patched_sd)}}));
  r.summary = {{"n", rep.n}, {"flips", rep.flips}, {"flip_rate", rep.flip_rate()}};
  progress("fti", 100);
}

void cmd_steer(Run& r) {
  const auto task = r.task();
  const auto w = r.weights(&task);
  const auto pairs = load_pairs(r, task);
  const auto prompts = load_prompts(r);
  const auto scale = task.scale_for(run_format(r));
  const auto bundle = steering_vectors(w, pairs, hooks_of(r, w.spec));
  const auto alphas = r.cfg.at("alpha_grid").get<std::vector<double>>();
  if (alphas.size() < 2) throw ConfigError("steer: alpha_grid needs at least two values");
  const int rotations = r.cfg.at("rotations").get<int>();
  double amax = 0;
  for (double a : alphas) amax = std::max(amax, std::abs(a));
  if (!(amax > 0)) throw ConfigError("steer: alpha_grid needs a nonzero value");
  const auto rot_seed = r.derived("rotations", 0);

  std::vector<std::vector<double>> ev(prompts.size());
  std::vector<std::vector<double>> control(prompts.size());
  std::vector<double> true_effect(prompts.size());
  util::parallel_for(prompts.size(), r.threads, [&](std::size_t i) {
    for (double a : alphas) ev[i].push_back(steer(w, prompts[i], bundle, a, scale).ev);
    true_effect[i] = steer(w, prompts[i], bundle, amax, scale).ev - steer(w, prompts[i], bundle, 0.0, scale).ev;
    if (rotations > 0) control[i] = random_rotation_control(w, prompts[i], bundle, amax, rotations, rot_seed, scale);
  });
  std::string s = "prompt,alpha,ev\n";
  std::vector<double> rho;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (std::size_t j = 0; j < alphas.size(); ++j)
      s += std::to_string(i) + "," + num(alphas[j]) + "," + num(ev[i][j]) + "\n";
    try {
      rho.push_back(spearman_rho(std::span<const double>(alphas), std::span<const double>(ev[i])));
    } catch (const UndefinedStatistic&) {
      rho.push_back(0.0);
    }
  }
  r.write("steer.csv", s);
  std::string cs = "prompt,sample,delta_ev\n";
  std::vector<double> sample_effect(rotations, 0.0);
  for (std::size_t i = 0; i < prompts.size(); ++i)
    for (int k = 0; k < rotations; ++k) {
      cs += std::to_string(i) + "," + std::to_string(k) + "," + num(control[i][k]) + "\n";
      sample_effect[k] += std::abs(control[i][k]) / static_cast<double>(prompts.size());
    }
  r.write("rotation_control.csv", cs);
  double true_mean = 0;
  for (double t : true_effect) true_mean += std::abs(t) / static_cast<double>(prompts.size());
  const double max_rot = sample_effect.empty() ? 0.0 : *std::max_element(sample_effect.begin(), sample_effect.end());
  std::string vs = "hook,norm\n";
  for (const auto& [h, v] : bundle.vectors) vs += node_name(h) + "," + num(v.norm()) + "\n";
  r.write("vectors.csv", vs);
  r.write("steer_summary.csv", metric_rows({{"mean_spearman", num(mean_of(rho))},
                                            {"min_spearman", num(*std::min_element(rho.begin(), rho.end()))},
                                            {"true_effect", num(true_mean)},
                                            {"max_rotation_effect", num(max_rot)}}));
  r.summary = {{"mean_spearman", mean_of(rho)}, {"true_effect", true_mean}, {"max_rotation_effect", max_rot}};
  progress("steer", 100);
}

void cmd_lens(Run& r) {
  const auto task = r.task();
  const auto w = r.weights(&task);
  const auto prompts = load_prompts(r);
  std::vector<NodeRef> nodes;
  for (const auto& n : r.cfg.at("nodes")) nodes.push_back(parse_node(n.get<std::string>()));
  if (nodes.empty()) {
    for (int l = 0; l < w.spec.n_layers; ++l) {
      for (int h = 0; h < w.spec.n_heads; ++h) nodes.push_back({Component::attn(l, h), std::nullopt});
      nodes.push_back({Component::mlp(l), std::nullopt});
    }
  }
  const auto which = r.cfg.at("targets").get<std::string>();
  std::vector<int> targets;
  if (which == "rating")
    targets = task.rating_tokens;
  else if (which == "class")
    targets = {task.no, task.yes};
  else
    throw ConfigError("lens: targets must be 'rating' or 'class'");
  const int top = r.cfg.at("top_k").get<int>();
  const bool ln = r.cfg.at("apply_ln").get<bool>();
  std::vector<std::vector<LensResult>> res(prompts.size());
  util::parallel_for(prompts.size(), r.threads, [&](std::size_t i) {
    const auto c = forward_with_cache(w, prompts[i]);
    for (const auto& n : nodes) res[i].push_back(logit_lens(w, c, n, targets, top, ln));
  });
  std::string s = "prompt,node,rank,token,logit,prob\n";
  std::string t = "prompt,node,target,prob\n";
  std::string ratio = "prompt,node,target_mass,ratio\n";
  for (std::size_t i = 0; i < prompts.size(); ++i)
    for (std::size_t j = 0; j < nodes.size(); ++j) {
      const auto& x = res[i][j];
      const auto name = node_name(nodes[j]);
      for (std::size_t k = 0; k < x.top.size(); ++k)
        s += std::to_string(i) + "," + name + "," + std::to_string(k + 1) + "," + std::to_string(x.top[k].token) +
             "," + num(x.top[k].logit) + "," + num(x.top[k].prob) + "\n";
      for (std::size_t k = 0; k < targets.size(); ++k)
        t += std::to_string(i) + "," + name + "," + std::to_string(targets[k]) + "," + num(x.target_probs[k]) + "\n";
      ratio += std::to_string(i) + "," + name + "," + num(x.target_mass) + "," + num(x.ratio) + "\n";
    }
  r.write("lens_top.csv", s);
  r.write("lens_targets.csv", t);
  r.write("lens_ratio.csv", ratio);
  r.summary = {{"prompts", prompts.size()}, {"nodes", nodes.size()}};
  progress("lens", 100);
}

void cmd_judge(Run& r) {
  const auto task = r.task();
  const auto w = r.weights(&task);
  Dataset data;
  const auto prompts = load_prompts(r, &data);
  const auto scale = task.rating_scale();
  std::vector<double> labels;
  for (const auto& e : data) labels.push_back(e.rating);
  progress("judge", 0);
  const auto m12 = signal_m1_m2(w, prompts, scale);
  const auto features = residual_features(w, prompts, parse_node(r.cfg.at("probe_node").get<std::string>()));
  const auto probe = signal_m3_probe(features, labels, r.cfg.at("folds").get<int>(),
                                     r.cfg.at("lambdas").get<std::vector<double>>(), r.derived("folds", 0));
  progress("judge", 60);
  const auto bundle = steering_vectors(w, load_pairs(r, task), hooks_of(r, w.spec));
  const auto m4 = signal_m4_direction(w, prompts, bundle, m12.m2);
  SignalTable t{m12.m1, m12.m2, probe.predictions, m4.calibrated};
  const auto rho = correlate(t, labels);
  const auto csv = signal_table_csv(t, labels, rho);
  const auto cut = csv.find("# spearman\n");
  r.write("signals.csv", csv.substr(0, cut));
  r.write("signal_rho.csv", csv.substr(cut + std::string("# spearman\n").size()));
  for (const auto& [name, v] : {std::pair{"m1", rho.m1}, std::pair{"m2", rho.m2}, std::pair{"m3", rho.m3}, std::pair{"m4", rho.m4}})
    r.summary[std::string("rho.") + name] = v ? json(*v) : json("undefined");
  progress("judge", 100);
}

/// Scans run directories, checks every output against its manifest and
/// writes long-format summaries in a fixed order.
void cmd_report(Run& r) {
  const fs::path dir = r.cfg.at("dir").get<std::string>();
  if (!fs::is_directory(dir)) throw ArtifactError("missing run directory '" + dir.string() + "'");
  std::vector<fs::path> runs;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_directory() && entry.path().filename().string().front() != '.' &&
        fs::is_regular_file(entry.path() / "manifest.json"))
      runs.push_back(entry.path());
  std::sort(runs.begin(), runs.end());
  std::string runs_csv = "run_id,command,config_hash,weights_hash,version\n";
  std::string outputs_csv = "run_id,file,hash\n";
  std::string metrics_csv = "run_id,command,metric,value\n";
  std::map<std::string, std::pair<std::string, std::string>> merged;  // name -> (header, rows)
  int n = 0;
  for (const auto& run_dir : runs) {
    const auto mpath = (run_dir / "manifest.json").string();
    json m;
    try {
      m = json::parse(util::read_file(mpath));
    } catch (const json::exception& e) {
      throw ArtifactError(mpath + ": " + e.what());
    }
    const auto command = m.at("command").get<std::string>();
    if (command == "report") continue;
    const auto id = m.at("run_id").get<std::string>();
    r.input_file("manifest." + id, mpath);
    runs_csv += id + "," + command + "," + m.at("config_hash").get<std::string>() + "," +
                (m.at("weights_hash").is_null() ? std::string() : m.at("weights_hash").get<std::string>()) + "," +
                m.at("version").get<std::string>() + "\n";
    for (const auto& [file, hash] : m.at("outputs").items()) {
      const auto path = (run_dir / file).string();
      if (!fs::is_regular_file(path)) throw ArtifactError("missing artifact '" + path + "'");
      const auto bytes = util::read_file(path);
      if (util::git_blob_hash(bytes) != hash.get<std::string>())
        throw ArtifactError("output '" + path + "' does not match its manifest");
      outputs_csv += id + "," + file + "," + hash.get<std::string>() + "\n";
      if (file.size() < 4 || file.substr(file.size() - 4) != ".csv" || file == "table.csv" || file == "heatmap.csv")
        continue;
      const auto nl = bytes.find('\n');
      const std::string header = bytes.substr(0, nl);
      auto& slot = merged[command + "__" + file];
      if (slot.first.empty()) slot.first = "run_id," + header;
      if (slot.first != "run_id," + header) throw ArtifactError("inconsistent header in '" + path + "'");
      std::stringstream ss(nl == std::string::npos ? std::string() : bytes.substr(nl + 1));
      std::string line;
      while (std::getline(ss, line))
        if (!line.empty()) slot.second += id + "," + line + "\n";
    }
    for (const auto& [k, v] : m.at("summary").items())
      metrics_csv += id + "," + command + "," + k + "," + (v.is_string() ? v.get<std::string>() : v.dump()) + "\n";
    ++n;
    progress("report", 100.0 * n / static_cast<double>(runs.size()));
  }
  r.write("runs.csv", runs_csv);
  r.write("outputs.csv", outputs_csv);
  r.write("metrics.csv", metrics_csv);
  for (const auto& [name, body] : merged) r.write(name, body.first + "\n" + body.second);
  r.summary = {{"runs", n}};
  progress("report", 100);
}

// ---------------------------------------------------------------------------
// command table

std::vector<Command> commands() {
  const json task = TaskSpec::standard();
  json train_cfg = TrainConfig{};
  train_cfg.erase("seed");
  const json pair_fields = {{"task", task}, {"weights", nullptr}, {"pairs", nullptr}, {"format", "rating"},
                            {"n_pairs", 0}};
  auto with = [](json base, const json& extra) {
    base.update(extra);
    return base;
  };
  std::vector<Command> c;
  c.push_back({"gen-data", "Generate training and evaluation sets and minimal pairs",
               {{"task", task}, {"n_train", 2000}, {"n_eval", 400}, {"n_knowledge", 2000}, {"seed", nullptr}},
               {},
               true,
               cmd_gen_data});
  c.push_back({"train", "Train a model on a JSONL dataset",
               {{"task", task},
                {"model", {{"n_layers", 4}, {"n_heads", 4}, {"d_model", 128}, {"d_head", 32}, {"d_mlp", 256}}},
                {"train", train_cfg},
                {"data", nullptr},
                {"eval", json::object()},
                {"seed", nullptr}},
               {"data", "eval"},
               true,
               cmd_train});
  c.push_back({"trace", "Score the edge universe over minimal pairs and extract the top-k circuit",
               with(pair_fields, {{"mode", "gradient"}, {"min_gap", 0.05}, {"min_pairs", nullptr}, {"k", 200},
                                  {"layer_floor", 0}}),
               {"weights", "pairs"},
               false,
               cmd_trace});
  c.push_back({"overlap", "IoU and LE/TF split of two circuits",
               {{"circuit_a", nullptr}, {"circuit_b", nullptr}, {"weights", nullptr}, {"length", 0},
                {"null_samples", 0}, {"q", 0.99}, {"seed", nullptr}},
               {"circuit_a", "circuit_b", "weights"},
               false,
               cmd_overlap});
  c.push_back({"split-half", "Split-half reliability of circuit discovery",
               with(pair_fields, {{"mode", "gradient"}, {"min_gap", 0.05}, {"k", 200}, {"partitions", 10},
                                  {"spearman_brown", false}, {"layer_floor", 0}, {"min_pairs_fraction", 0.25},
                                  {"null_samples", 500}, {"q", 0.99}, {"seed", nullptr}}),
               {"weights", "pairs"},
               true,
               cmd_split_half});
  c.push_back({"faithfulness", "Faithfulness curve of a ranking against a random-edge baseline",
               with(pair_fields, {{"table", nullptr},
                                  {"k_grid", {0, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000}},
                                  {"include_universe", true},
                                  {"min_gap", 0.05},
                                  {"bootstrap", 1000},
                                  {"seed", nullptr}}),
               {"weights", "pairs", "table"},
               true,
               cmd_faithfulness});
  c.push_back({"ablate", "Iterative edge ablation trajectory",
               with(pair_fields, {{"table", nullptr}, {"k", 200}, {"step", 10}}),
               {"weights", "pairs", "table"},
               false,
               cmd_ablate});
  c.push_back({"zero-ablate", "Suite accuracy with components clamped to zero",
               {{"weights", nullptr}, {"components", json::array()}, {"circuit", nullptr}, {"suites", json::object()}},
               {"weights", "circuit", "suites"},
               false,
               cmd_zero_ablate});
  c.push_back({"fti", "Format transfer injection from rating to classification prompts",
               {{"task", task}, {"weights", nullptr}, {"pairs", nullptr}, {"n_pairs", 0}, {"nodes", json::array()},
                {"circuit", nullptr}, {"min_source_ev", 4.0}},
               {"weights", "pairs", "circuit"},
               false,
               cmd_fti});
  c.push_back({"steer", "Steering sweep with a random-rotation control",
               with(pair_fields, {{"prompts", nullptr}, {"n_prompts", 20}, {"hooks", json::array()},
                                  {"alpha_grid", {-4, -2, -1, 0, 1, 2, 4}}, {"rotations", 10}, {"seed", nullptr}}),
               {"weights", "pairs", "prompts"},
               true,
               cmd_steer});
  c.push_back({"lens", "Logit lens over component outputs",
               {{"task", task}, {"weights", nullptr}, {"prompts", nullptr}, {"n_prompts", 20},
                {"nodes", json::array()}, {"targets", "rating"}, {"top_k", 5}, {"apply_ln", true}},
               {"weights", "prompts"},
               false,
               cmd_lens});
  c.push_back({"judge", "Judge signals M1-M4 and their rank correlation with ground truth",
               with(pair_fields, {{"prompts", nullptr}, {"n_prompts", 0}, {"hooks", json::array()},
                                  {"probe_node", "logits"}, {"folds", 5}, {"lambdas", {0.1, 1.0, 10.0}},
                                  {"seed", nullptr}}),
               {"weights", "pairs", "prompts"},
               true,
               cmd_judge});
  c.push_back({"report", "Long-format summaries over a directory of runs", {{"dir", nullptr}}, {"dir"}, false,
               cmd_report});
  return c;
}

std::string dashed(std::string s) {
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

struct Invocation {
  std::string config_file;
  std::string out = "runs";
  std::string run_id;
  int threads = 0;
  std::map<std::string, std::string> flags;
  std::vector<std::string> sets;
};

/// Stages, executes and commits one run. Returns the committed manifest.
json execute(const Command& c, json cfg, const Invocation& inv) {
  if (c.stochastic && cfg.at("seed").is_null()) throw ConfigError(c.name + ": --seed is required");
  if (c.name == "train") {
    const auto t = cfg.at("task").get<TaskSpec>();
    auto& m = cfg["model"];
    if (!m.contains("vocab_size")) m["vocab_size"] = t.vocab_size();
    if (!m.contains("max_seq")) m["max_seq"] = t.max_prompt_len();
  }
  Run r;
  r.cmd = &c;
  r.cfg = std::move(cfg);
  r.config_hash = util::sha256_hex(json{{"command", c.name}, {"config", r.cfg}}.dump());
  r.run_id = inv.run_id.empty() ? c.name + "-" + r.config_hash.substr(0, 12) : inv.run_id;
  if (r.run_id.find('/') != std::string::npos || r.run_id.front() == '.')
    throw ConfigError("run id must be a plain name");
  r.out_root = fs::absolute(inv.out).lexically_normal();
  r.threads = inv.threads > 0 ? inv.threads : util::default_threads();
  if (r.has("seed")) r.seeds["seed"] = r.cfg.at("seed");
  if (fs::exists(r.out_root / r.run_id)) throw ConfigError("run id '" + r.run_id + "' already exists");
  fs::create_directories(r.out_root);
  r.stage = r.out_root / (".stage-" + r.run_id + "-" + std::to_string(::getpid()));
  fs::create_directories(r.stage);
  c.body(r);
  r.commit();
  std::cout << "run_id=" << r.run_id << " dir=" << (r.out_root / r.run_id).string() << "\n";
  return r.manifest();
}

int replay(const std::vector<Command>& table, const std::string& manifest_path, Invocation inv) {
  if (!fs::is_regular_file(manifest_path)) throw ArtifactError("missing manifest '" + manifest_path + "'");
  json m;
  try {
    m = json::parse(util::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw ArtifactError(std::string("manifest: ") + e.what());
  }
  const auto name = m.at("command").get<std::string>();
  const auto it = std::find_if(table.begin(), table.end(), [&](const Command& c) { return c.name == name; });
  if (it == table.end()) throw ConfigError("manifest names unknown command '" + name + "'");
  if (inv.run_id.empty()) inv.run_id = m.at("run_id").get<std::string>() + "-replay";
  if (inv.out.empty()) inv.out = fs::absolute(manifest_path).parent_path().parent_path().string();
  const auto again = execute(*it, m.at("config"), inv);
  if (again.at("config_hash") != m.at("config_hash")) throw ArtifactError("replay: config hash differs");
  int differ = 0;
  for (const auto& [file, hash] : m.at("outputs").items())
    if (!again.at("outputs").contains(file) || again.at("outputs").at(file) != hash) {
      std::fprintf(stderr, "replay_mismatch file=%s\n", file.c_str());
      ++differ;
    }
  if (again.at("outputs").size() != m.at("outputs").size()) ++differ;
  if (differ) throw ArtifactError("replay: " + std::to_string(differ) + " outputs differ from the manifest");
  std::cout << "replay=identical outputs=" << m.at("outputs").size() << "\n";
  return 0;
}

int exit_code(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const ArtifactError*>(&e)) return 2;
  return 3;
}

int fail(const char* tag, int code, const std::string& msg) {
  std::fprintf(stderr, "error=%s exit=%d msg=\"%s\"\n", tag, code, one_line(msg).c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  const auto table = commands();
  CLI::App app{"clens: circuit analysis toolkit for small judgment transformers"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  std::vector<Invocation> inv(table.size());
  std::vector<CLI::App*> subs;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& c = table[i];
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", inv[i].config_file, "JSON config file");
    sub->add_option("--out", inv[i].out, "Root directory for run outputs")->capture_default_str();
    sub->add_option("--run-id", inv[i].run_id, "Run id (default: command and config hash)");
    sub->add_option("--threads", inv[i].threads, "Worker threads (default: available cores)");
    sub->add_option("--set", inv[i].sets, "Override a nested field, e.g. train.steps=200");
    for (const auto& [key, def] : c.defaults.items())
      sub->add_option("--" + dashed(key), inv[i].flags[key], "Config field '" + key + "' (default " + def.dump() + ")");
    subs.push_back(sub);
  }
  std::string manifest_path;
  Invocation replay_inv;
  replay_inv.out.clear();
  auto* rep = app.add_subcommand("replay", "Re-execute a run from its manifest and compare output hashes");
  rep->add_option("--manifest", manifest_path, "manifest.json of the run to replay")->required();
  rep->add_option("--out", replay_inv.out, "Root directory (default: the original run's root)");
  rep->add_option("--run-id", replay_inv.run_id, "Run id (default: original id with -replay)");
  rep->add_option("--threads", replay_inv.threads, "Worker threads (default: available cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("config", 1, e.what());
  }

  try {
    if (rep->parsed()) return replay(table, manifest_path, replay_inv);
    for (std::size_t i = 0; i < table.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      std::map<std::string, std::string> given;
      for (const auto& [key, text] : inv[i].flags)
        if (subs[i]->count("--" + dashed(key)) > 0) given[key] = text;
      const auto cfg = effective_config(table[i], inv[i].config_file, given, inv[i].sets);
      execute(table[i], cfg, inv[i]);
      return 0;
    }
  } catch (const Error& e) {
    return fail(e.tag(), exit_code(e), e.what());
  } catch (const json::exception& e) {
    return fail("config", 1, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail("artifact", 2, e.what());
  } catch (const std::exception& e) {
    return fail("numeric", 3, e.what());
  }
  return 0;
}
