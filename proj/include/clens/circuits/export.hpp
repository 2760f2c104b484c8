#pragma once

#include "clens/attribution/table.hpp"
#include "clens/circuits/circuit.hpp"
#include "clens/circuits/layers.hpp"
#include "clens/error.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>

namespace clens {

enum class ExportFormat { Dot, Csv, HeatmapCsv };

inline ExportFormat export_format_from_string(const std::string& s) {
  if (s == "dot") return ExportFormat::Dot;
  if (s == "csv") return ExportFormat::Csv;
  if (s == "heatmap" || s == "heatmap-csv") return ExportFormat::HeatmapCsv;
  throw ConfigError("unknown export format '" + s + "'");
}

namespace detail {

inline std::string dot_node_id(const Component& c, int pos) {
  std::string id = to_string(c);
  for (auto& ch : id)
    if (ch == '.') ch = '_';
  return id + "_p" + std::to_string(-pos);
}

}  // namespace detail

/// Graphviz digraph. Nodes are (component, position) with `pos` and `layer`
/// attributes; residual edges stay within a position, cross edges connect a
/// head's source position to its destination position.
inline std::string circuit_to_dot(const Circuit& c, const ModelSpec& spec) {
  std::map<std::string, std::pair<Component, int>> nodes;
  for (const auto& e : c.edges) {
    nodes.emplace(detail::dot_node_id(e.edge.sender, e.edge.src), std::make_pair(e.edge.sender, e.edge.src));
    nodes.emplace(detail::dot_node_id(e.edge.receiver, e.edge.dst), std::make_pair(e.edge.receiver, e.edge.dst));
  }
  std::string out = "digraph circuit {\n  rankdir=BT;\n";
  for (const auto& [id, n] : nodes) {
    out += "  " + id + " [label=\"" + to_string(n.first) + "@" + std::to_string(n.second) +
           "\", pos=" + std::to_string(n.second) + ", layer=" + std::to_string(component_layer(n.first, spec)) +
           "];\n";
  }
  for (const auto& e : c.edges) {
    out += "  " + detail::dot_node_id(e.edge.sender, e.edge.src) + " -> " +
           detail::dot_node_id(e.edge.receiver, e.edge.dst) + " [kind=" + to_string(e.edge.kind) +
           ", score=" + detail::fmt_double(e.score) + "];\n";
  }
  out += "}\n";
  return out;
}

inline std::string circuit_to_csv(const Circuit& c) {
  std::string out = "rank,kind,sender,receiver,src_pos,dst_pos,score\n";
  int rank = 1;
  for (const auto& e : c.edges) {
    out += std::to_string(rank++) + "," + to_string(e.edge.kind) + "," + to_string(e.edge.sender) + "," +
           to_string(e.edge.receiver) + "," + std::to_string(e.edge.src) + "," + std::to_string(e.edge.dst) + "," +
           detail::fmt_double(e.score) + "\n";
  }
  return out;
}

inline Circuit circuit_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "rank,kind,sender,receiver,src_pos,dst_pos,score")
    throw ArtifactError("circuit CSV: bad header");
  std::vector<ScoredEdge> edges;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv(line);
    if (f.size() != 7) throw ArtifactError("circuit CSV: expected 7 fields");
    try {
      edges.push_back({EdgeRef{edge_kind_from_string(f[1]), parse_component(f[2]), parse_component(f[3]),
                               std::stoi(f[4]), std::stoi(f[5])},
                       detail::parse_double(f[6])});
    } catch (const ConfigError& err) {
      throw ArtifactError(std::string("circuit CSV: ") + err.what());
    } catch (const std::logic_error&) {
      throw ArtifactError("circuit CSV: bad integer field");
    }
  }
  return make_circuit(std::move(edges));
}

inline Circuit load_circuit(const std::string& path) { return circuit_from_csv(util::read_file(path)); }

/// Dense destination x source score matrix per head, from the circuit's
/// cross edges. `length` sets the matrix size; 0 infers it from the edges.
inline std::string circuit_to_heatmap_csv(const Circuit& c, int length = 0) {
  int T = length;
  for (const auto& e : c.edges) T = std::max(T, -e.edge.src);
  std::map<Component, std::map<std::pair<int, int>, double>> cells;
  for (const auto& e : c.edges)
    if (e.edge.kind == EdgeKind::AttnCross) cells[e.edge.sender][{e.edge.dst, e.edge.src}] += e.score;
  std::string out = "component,dst_pos";
  for (int s = -T; s <= -1; ++s) out += ",src" + std::to_string(s);
  out += "\n";
  for (const auto& [comp, m] : cells) {
    for (int d = -T; d <= -1; ++d) {
      out += to_string(comp) + "," + std::to_string(d);
      for (int s = -T; s <= -1; ++s) {
        auto it = m.find({d, s});
        out += "," + detail::fmt_double(it == m.end() ? 0.0 : it->second);
      }
      out += "\n";
    }
  }
  return out;
}

inline void write_text(const std::string& text, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ArtifactError("cannot write " + path);
  out << text;
  if (!out) throw ArtifactError("write failed for " + path);
}

inline void export_circuit(const Circuit& c, ExportFormat f, const std::string& path, const ModelSpec& spec,
                           int length = 0) {
  switch (f) {
    case ExportFormat::Dot: write_text(circuit_to_dot(c, spec), path); break;
    case ExportFormat::Csv: write_text(circuit_to_csv(c), path); break;
    case ExportFormat::HeatmapCsv: write_text(circuit_to_heatmap_csv(c, length), path); break;
  }
}

}  // namespace clens
