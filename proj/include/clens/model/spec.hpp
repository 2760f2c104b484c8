#pragma once

#include "clens/error.hpp"

#include <json.hpp>

#include <string>

namespace clens {

enum class Activation { Gelu, Identity };

/// Shape of a pre-LayerNorm decoder-only transformer with per-head
/// attention weights. `Identity` activation gives the linearised MLP used
/// by the rule-equivalence checks.
struct ModelSpec {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_head = 32;
  int d_mlp = 256;
  int vocab_size = 64;
  int max_seq = 32;
  double ln_epsilon = 1e-5;
  Activation activation = Activation::Gelu;

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 ||
        vocab_size < 1)
      throw ConfigError("model spec: all counts must be >= 1");
    if (max_seq < 2) throw ConfigError("model spec: max_seq must be >= 2");
    if (!(ln_epsilon > 0)) throw ConfigError("model spec: ln_epsilon must be > 0");
    if (d_model != n_heads * d_head)
      throw ConfigError("model spec: d_model must equal n_heads * d_head");
  }

  bool operator==(const ModelSpec&) const = default;
};

inline std::string to_string(Activation a) {
  return a == Activation::Gelu ? "gelu" : "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "identity") return Activation::Identity;
  throw ConfigError("unknown activation '" + s + "'");
}

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"n_layers", s.n_layers},     {"n_heads", s.n_heads},
                     {"d_model", s.d_model},       {"d_head", s.d_head},
                     {"d_mlp", s.d_mlp},           {"vocab_size", s.vocab_size},
                     {"max_seq", s.max_seq},       {"ln_epsilon", s.ln_epsilon},
                     {"activation", to_string(s.activation)}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  ModelSpec d;
  s.n_layers = j.value("n_layers", d.n_layers);
  s.n_heads = j.value("n_heads", d.n_heads);
  s.d_model = j.value("d_model", d.d_model);
  s.d_head = j.value("d_head", s.d_model / s.n_heads);
  s.d_mlp = j.value("d_mlp", d.d_mlp);
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.max_seq = j.value("max_seq", d.max_seq);
  s.ln_epsilon = j.value("ln_epsilon", d.ln_epsilon);
  s.activation = activation_from_string(j.value("activation", std::string("gelu")));
}

}  // namespace clens
