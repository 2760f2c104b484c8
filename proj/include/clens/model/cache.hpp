#pragma once

#include "clens/error.hpp"
#include "clens/model/nodes.hpp"
#include "clens/model/spec.hpp"
#include "clens/tensor.hpp"

#include <vector>

namespace clens {

template <class T>
struct LnState {
  Mat<T> xhat;    // normalised input, [seq x d]
  Vec<T> rstd;    // 1 / sqrt(var + eps) per row
};

template <class T>
struct HeadActs {
  Mat<T> input;     // residual read point, [seq x d_model]
  LnState<T> ln;
  Mat<T> ln_out;
  Mat<T> q, k, v;   // [seq x d_head]
  Mat<T> pattern;   // A[dest][src], [seq x seq], zero above the diagonal
  Mat<T> z;         // pre-W_O output, [seq x d_head]
  Mat<T> out;       // residual contribution, [seq x d_model]
};

template <class T>
struct MlpActs {
  Mat<T> input;
  LnState<T> ln;
  Mat<T> ln_out;
  Mat<T> pre, act;  // [seq x d_mlp]
  Mat<T> out;
};

/// Every intermediate of one forward pass. Component outputs are the values
/// after any intervention was applied.
template <class T>
struct ActivationCache {
  int seq_len = 0;
  std::vector<int> tokens;  // empty when the run started from embeddings
  bool intervened = false;
  Mat<T> embed;             // embed contribution, [seq x d_model]
  std::vector<std::vector<HeadActs<T>>> heads;
  std::vector<MlpActs<T>> mlps;
  Mat<T> final_input;
  LnState<T> final_ln;
  Mat<T> final_ln_out;
  Mat<T> logits;            // [seq x vocab]

  RowVec<T> final_logits() const { return logits.row(seq_len - 1); }

  const Mat<T>& output(const Component& c) const {
    switch (c.kind) {
      case NodeKind::Embed: return embed;
      case NodeKind::AttnHead: return heads.at(c.layer).at(c.head).out;
      case NodeKind::Mlp: return mlps.at(c.layer).out;
      case NodeKind::Logits: break;
    }
    throw ConfigError("logits has no residual contribution");
  }

  /// Residual stream as read by a receiver (pre-LayerNorm).
  const Mat<T>& read_input(const Component& c) const {
    switch (c.kind) {
      case NodeKind::AttnHead: return heads.at(c.layer).at(c.head).input;
      case NodeKind::Mlp: return mlps.at(c.layer).input;
      case NodeKind::Logits: return final_input;
      case NodeKind::Embed: break;
    }
    throw ConfigError("embed has no read point");
  }

  RowVec<T> contribution(const NodeRef& n) const {
    return output(n.comp).row(resolve_position(n.position.value_or(-1), seq_len));
  }
};

/// Metric gradients with respect to every receiver's read-point input and
/// every head's pre-W_O output. Entries are exact gradients for
/// `backward_gradients` and rule-modified coefficients for `lrp_backward`.
template <class T>
struct GradCache {
  int seq_len = 0;
  Mat<T> embed;  // gradient at the bottom of the residual stream
  std::vector<std::vector<Mat<T>>> head_input;
  std::vector<std::vector<Mat<T>>> head_z;
  std::vector<Mat<T>> mlp_input;
  Mat<T> final_input;

  const Mat<T>& read_grad(const Component& c) const {
    switch (c.kind) {
      case NodeKind::AttnHead: return head_input.at(c.layer).at(c.head);
      case NodeKind::Mlp: return mlp_input.at(c.layer);
      case NodeKind::Logits: return final_input;
      case NodeKind::Embed: break;
    }
    throw ConfigError("embed has no read point");
  }
};

}  // namespace clens
