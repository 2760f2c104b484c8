#pragma once

#include "clens/error.hpp"
#include "clens/model/spec.hpp"

#include <compare>
#include <cstdint>
#include <optional>
#include <string>

namespace clens {

enum class NodeKind : std::uint8_t { Embed = 0, AttnHead = 1, Mlp = 2, Logits = 3 };

/// A position-free node of the computation graph.
struct Component {
  NodeKind kind = NodeKind::Embed;
  int layer = -1;
  int head = -1;

  static Component embed() { return {NodeKind::Embed, -1, -1}; }
  static Component attn(int layer, int head) { return {NodeKind::AttnHead, layer, head}; }
  static Component mlp(int layer) { return {NodeKind::Mlp, layer, -1}; }
  static Component logits() { return {NodeKind::Logits, -1, -1}; }

  bool is_sender() const { return kind != NodeKind::Logits; }
  bool is_receiver() const { return kind != NodeKind::Embed; }

  auto operator<=>(const Component&) const = default;
};

/// A component at a (signed) position. Negative positions count from the
/// end of the sequence; an empty position means "every position".
struct NodeRef {
  Component comp;
  std::optional<int> position;

  auto operator<=>(const NodeRef&) const = default;
};

/// Resolves a signed position against a sequence length.
inline int resolve_position(int pos, int seq_len) {
  const int p = pos < 0 ? seq_len + pos : pos;
  if (p < 0 || p >= seq_len)
    throw ConfigError("position " + std::to_string(pos) + " out of range for length " +
                      std::to_string(seq_len));
  return p;
}

/// Layer used for bucketing: embed sits below layer 0, logits above the top.
inline int component_layer(const Component& c, const ModelSpec& spec) {
  switch (c.kind) {
    case NodeKind::Embed: return -1;
    case NodeKind::Logits: return spec.n_layers;
    default: return c.layer;
  }
}

/// Topological indexing. Senders occupy [0, n_senders), logits is last.
/// Every receiver reads the sum of a prefix of the sender order.
struct Topology {
  int n_layers = 0;
  int n_heads = 0;

  explicit Topology(const ModelSpec& s) : n_layers(s.n_layers), n_heads(s.n_heads) {}

  int n_senders() const { return 1 + n_layers * (n_heads + 1); }
  int n_components() const { return n_senders() + 1; }

  int index(const Component& c) const {
    switch (c.kind) {
      case NodeKind::Embed: return 0;
      case NodeKind::AttnHead: return 1 + c.layer * (n_heads + 1) + c.head;
      case NodeKind::Mlp: return 1 + c.layer * (n_heads + 1) + n_heads;
      case NodeKind::Logits: return n_senders();
    }
    return -1;
  }

  Component at(int idx) const {
    if (idx == 0) return Component::embed();
    if (idx == n_senders()) return Component::logits();
    const int l = (idx - 1) / (n_heads + 1);
    const int r = (idx - 1) % (n_heads + 1);
    return r == n_heads ? Component::mlp(l) : Component::attn(l, r);
  }

  /// Number of senders whose outputs are summed into this receiver's input.
  int n_upstream(const Component& r) const {
    switch (r.kind) {
      case NodeKind::Embed: return 0;
      case NodeKind::AttnHead: return 1 + r.layer * (n_heads + 1);
      case NodeKind::Mlp: return 1 + r.layer * (n_heads + 1) + n_heads;
      case NodeKind::Logits: return n_senders();
    }
    return 0;
  }

  bool upstream(const Component& s, const Component& r) const {
    return s.is_sender() && r.is_receiver() && index(s) < n_upstream(r);
  }

  void check(const Component& c) const {
    const bool ok = [&] {
      switch (c.kind) {
        case NodeKind::Embed:
        case NodeKind::Logits: return true;
        case NodeKind::AttnHead:
          return c.layer >= 0 && c.layer < n_layers && c.head >= 0 && c.head < n_heads;
        case NodeKind::Mlp: return c.layer >= 0 && c.layer < n_layers;
      }
      return false;
    }();
    if (!ok) throw ConfigError("node does not exist in this model");
  }
};

inline std::string to_string(const Component& c) {
  switch (c.kind) {
    case NodeKind::Embed: return "embed";
    case NodeKind::AttnHead: return "a" + std::to_string(c.layer) + "." + std::to_string(c.head);
    case NodeKind::Mlp: return "m" + std::to_string(c.layer);
    case NodeKind::Logits: return "logits";
  }
  return "?";
}

inline Component parse_component(const std::string& s) {
  try {
    if (s == "embed") return Component::embed();
    if (s == "logits") return Component::logits();
    if (s.size() >= 2 && s[0] == 'm') return Component::mlp(std::stoi(s.substr(1)));
    if (s.size() >= 4 && s[0] == 'a') {
      const auto dot = s.find('.');
      if (dot != std::string::npos)
        return Component::attn(std::stoi(s.substr(1, dot - 1)), std::stoi(s.substr(dot + 1)));
    }
  } catch (const std::logic_error&) {
  }
  throw ConfigError("cannot parse component '" + s + "'");
}

}  // namespace clens
