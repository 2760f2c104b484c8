#pragma once

#include "clens/error.hpp"
#include "clens/model/nodes.hpp"
#include "clens/tensor.hpp"

#include <map>
#include <set>
#include <variant>
#include <vector>

namespace clens {

/// Clamp a component's output to zero at every position.
struct ZeroComponent {
  Component comp;
};

/// Replace a component's output at one position.
template <class T>
struct PatchActivation {
  NodeRef node;
  RowVec<T> value;
};

/// Add `scale * vector` to a component's output at one position (or at
/// every position when the node has no position).
template <class T>
struct AddVector {
  NodeRef node;
  RowVec<T> vector;
  double scale = 1.0;
};

template <class T>
using InterventionAction = std::variant<ZeroComponent, PatchActivation<T>, AddVector<T>>;

/// Ordered list of node-level forward modifications. Zero and Patch are
/// applied first, then every Add in list order.
template <class T>
struct InterventionPlan {
  std::vector<InterventionAction<T>> actions;

  bool empty() const { return actions.empty(); }
  InterventionPlan& zero(Component c) {
    actions.emplace_back(ZeroComponent{c});
    return *this;
  }
  InterventionPlan& patch(NodeRef n, RowVec<T> v) {
    actions.emplace_back(PatchActivation<T>{n, std::move(v)});
    return *this;
  }
  InterventionPlan& add(NodeRef n, RowVec<T> v, double scale) {
    actions.emplace_back(AddVector<T>{n, std::move(v), scale});
    return *this;
  }
};

/// Restores one sender -> receiver residual edge at an absolute position.
struct ResidualEdgePatch {
  Component sender;
  Component receiver;
  int position = 0;
};

/// Restores a value -> attention-output edge of one head.
struct CrossEdgePatch {
  int layer = 0;
  int head = 0;
  int src = 0;
  int dst = 0;
};

/// Edge-level restoration: each listed edge carries the source run's sender
/// value instead of the current run's. Every other edge carries the current
/// value.
struct EdgePatchSet {
  std::vector<ResidualEdgePatch> residual;
  std::vector<CrossEdgePatch> cross;
  /// When set, a restored cross edge also restores the source position's
  /// key, so the destination's attention row is recomputed.
  bool recompute_pattern = false;

  bool empty() const { return residual.empty() && cross.empty(); }
};

}  // namespace clens
