#pragma once

#include "clens/attribution/edges.hpp"
#include "clens/error.hpp"
#include "clens/util/hash.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace clens {

struct EdgeStat {
  double mean = 0;
  double var = 0;
  int n = 0;
};

enum class BackwardMode { Gradient, Lrp };

inline std::string to_string(BackwardMode m) { return m == BackwardMode::Gradient ? "gradient" : "lrp"; }

inline BackwardMode backward_mode_from_string(const std::string& s) {
  if (s == "gradient") return BackwardMode::Gradient;
  if (s == "lrp") return BackwardMode::Lrp;
  throw ConfigError("unknown backward mode '" + s + "'");
}

struct Provenance {
  BackwardMode mode = BackwardMode::Gradient;
  std::string task;
  std::uint64_t seed = 0;
};

/// Edge scores sorted by EdgeRef order.
struct AttributionTable {
  std::vector<std::pair<EdgeRef, EdgeStat>> entries;
  Provenance provenance;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }

  const EdgeStat* find(const EdgeRef& e) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), e,
                               [](const auto& a, const EdgeRef& b) { return a.first < b; });
    if (it == entries.end() || !(it->first == e)) return nullptr;
    return &it->second;
  }

  double score(const EdgeRef& e) const {
    const auto* s = find(e);
    return s ? s->mean : 0.0;
  }

  void sort() {
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  }
};

/// Per-edge mean over the tables containing the edge. Edges present in fewer
/// than `min_pairs` tables are dropped. `var` is the sample variance of the
/// per-table means (0 when n = 1).
inline AttributionTable aggregate(const std::vector<AttributionTable>& tables, int min_pairs) {
  if (tables.empty()) throw ConfigError("aggregate: no tables");
  struct Acc {
    double sum = 0, sumsq = 0;
    int n = 0;
  };
  std::map<EdgeRef, Acc> acc;
  for (const auto& t : tables) {
    for (const auto& [e, s] : t.entries) {
      auto& a = acc[e];
      a.sum += s.mean;
      a.n += 1;
    }
  }
  // second pass: deviations from the mean
  for (const auto& t : tables) {
    for (const auto& [e, s] : t.entries) {
      auto& a = acc[e];
      const double d = s.mean - a.sum / a.n;
      a.sumsq += d * d;
    }
  }
  AttributionTable out;
  out.provenance = tables.front().provenance;
  out.entries.reserve(acc.size());
  for (const auto& [e, a] : acc) {
    if (a.n < min_pairs) continue;
    out.entries.push_back({e, {a.sum / a.n, a.n > 1 ? a.sumsq / (a.n - 1) : 0.0, a.n}});
  }
  return out;
}

/// Default min_pairs: a quarter of the table count, at least one.
inline int default_min_pairs(std::size_t n_tables) {
  return std::max(1, static_cast<int>(n_tables / 4));
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s) {
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ArtifactError("bad number '" + s + "'");
  return v;
}

}  // namespace detail

inline const char* kTableCsvHeader = "kind,sender,receiver,layer,head,src_pos,dst_pos,mean,var,n";

/// CSV rows in storage order. Doubles use the shortest round-trip form.
inline std::string table_to_csv(const AttributionTable& t) {
  std::string out = std::string(kTableCsvHeader) + "\n";
  for (const auto& [e, s] : t.entries) {
    const int layer = e.receiver.kind == NodeKind::Logits ? -1 : e.receiver.layer;
    out += to_string(e.kind) + "," + to_string(e.sender) + "," + to_string(e.receiver) + "," +
           std::to_string(layer) + "," + std::to_string(e.receiver.head) + "," + std::to_string(e.src) +
           "," + std::to_string(e.dst) + "," + detail::fmt_double(s.mean) + "," +
           detail::fmt_double(s.var) + "," + std::to_string(s.n) + "\n";
  }
  return out;
}

inline AttributionTable table_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kTableCsvHeader) throw ArtifactError("attribution CSV: bad header");
  AttributionTable t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 10) throw ArtifactError("attribution CSV: expected 10 fields");
    try {
      EdgeRef e{edge_kind_from_string(f[0]), parse_component(f[1]), parse_component(f[2]), std::stoi(f[5]),
                std::stoi(f[6])};
      t.entries.push_back({e, {detail::parse_double(f[7]), detail::parse_double(f[8]), std::stoi(f[9])}});
    } catch (const ConfigError& err) {
      throw ArtifactError(std::string("attribution CSV: ") + err.what());
    } catch (const std::logic_error&) {
      throw ArtifactError("attribution CSV: bad integer field");
    }
  }
  t.sort();
  return t;
}

inline void save_table(const AttributionTable& t, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path);
  out << table_to_csv(t);
}

inline AttributionTable load_table(const std::string& path) { return table_from_csv(util::read_file(path)); }

}  // namespace clens
