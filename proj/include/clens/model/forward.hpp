#pragma once

#include "clens/error.hpp"
#include "clens/model/cache.hpp"
#include "clens/model/intervention.hpp"
#include "clens/model/nodes.hpp"
#include "clens/model/weights.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace clens {

namespace ops {

template <class T>
T gelu(T x) {
  return x * T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

/// gelu(x) / x, continuous at zero.
template <class T>
T gelu_ratio(T x) {
  return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
void layer_norm(const Mat<T>& x, const RowVec<T>& g, const RowVec<T>& b, double eps,
                LnState<T>& st, Mat<T>& out) {
  const auto n = x.cols();
  st.xhat.resize(x.rows(), n);
  st.rstd.resize(x.rows());
  out.resize(x.rows(), n);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const RowVec<T> c = x.row(r).array() - mean;
    const T var = c.squaredNorm() / T(n);
    const T rstd = T(1) / std::sqrt(var + T(eps));
    st.rstd(r) = rstd;
    st.xhat.row(r) = c * rstd;
    out.row(r) = st.xhat.row(r).cwiseProduct(g) + b;
  }
}

}  // namespace ops

template <class T>
Mat<T> embed_tokens(const Weights<T>& w, std::span<const int> tokens) {
  const auto& s = w.spec;
  if (tokens.empty()) throw ConfigError("empty token sequence");
  if (static_cast<int>(tokens.size()) > s.max_seq)
    throw ConfigError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq");
  Mat<T> e(tokens.size(), s.d_model);
  for (std::size_t p = 0; p < tokens.size(); ++p) {
    const int t = tokens[p];
    if (t < 0 || t >= s.vocab_size)
      throw ConfigError("token id " + std::to_string(t) + " out of range");
    e.row(p) = w.tok_embed.row(t) + w.pos_embed.row(p);
  }
  return e;
}

namespace detail {

template <class T>
struct CompiledPlan {
  struct Add {
    std::optional<int> pos;
    const RowVec<T>* vec;
    T scale;
  };
  struct Entry {
    bool zero = false;
    std::map<int, const RowVec<T>*> patches;
    std::vector<Add> adds;
  };
  std::vector<Entry> entries;  // by topo index
  bool any = false;

  CompiledPlan(const InterventionPlan<T>& plan, const ModelSpec& spec, int seq_len) {
    Topology topo(spec);
    entries.resize(topo.n_senders());
    auto check_comp = [&](const Component& c) {
      topo.check(c);
      if (!c.is_sender()) throw ConfigError("interventions cannot target the logits node");
      return topo.index(c);
    };
    auto check_vec = [&](const RowVec<T>& v) {
      if (v.size() != spec.d_model) throw ShapeError("intervention vector has wrong width");
    };
    for (const auto& a : plan.actions) {
      any = true;
      if (const auto* z = std::get_if<ZeroComponent>(&a)) {
        auto& e = entries[check_comp(z->comp)];
        if (e.zero || !e.patches.empty())
          throw ConfigError("more than one zero/patch on " + to_string(z->comp));
        e.zero = true;
      } else if (const auto* p = std::get_if<PatchActivation<T>>(&a)) {
        auto& e = entries[check_comp(p->node.comp)];
        check_vec(p->value);
        if (!p->node.position) throw ConfigError("patch requires a position");
        const int pos = resolve_position(*p->node.position, seq_len);
        if (e.zero || e.patches.count(pos))
          throw ConfigError("more than one zero/patch on " + to_string(p->node.comp));
        e.patches[pos] = &p->value;
      } else if (const auto* d = std::get_if<AddVector<T>>(&a)) {
        auto& e = entries[check_comp(d->node.comp)];
        check_vec(d->vector);
        std::optional<int> pos;
        if (d->node.position) pos = resolve_position(*d->node.position, seq_len);
        e.adds.push_back({pos, &d->vector, static_cast<T>(d->scale)});
      }
    }
  }

  void apply(int idx, Mat<T>& out) const {
    if (!any) return;
    const auto& e = entries[idx];
    if (e.zero) out.setZero();
    for (const auto& [pos, v] : e.patches) out.row(pos) = *v;
    for (const auto& a : e.adds) {
      if (a.pos) {
        out.row(*a.pos) += a.scale * *a.vec;
      } else {
        for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) += a.scale * *a.vec;
      }
    }
  }
};

struct CompiledEdges {
  // residual[receiver topo][sender topo] -> per-position flag (empty = none)
  std::vector<std::vector<std::vector<std::uint8_t>>> residual;
  std::vector<bool> receiver_patched;
  // cross[layer][head] -> dst -> src flags
  std::vector<std::vector<std::map<int, std::vector<std::uint8_t>>>> cross;
  bool recompute = false;
  bool any = false;

  CompiledEdges(const EdgePatchSet* set, const ModelSpec& spec, int seq_len) {
    Topology topo(spec);
    residual.resize(topo.n_components());
    receiver_patched.assign(topo.n_components(), false);
    cross.assign(spec.n_layers, std::vector<std::map<int, std::vector<std::uint8_t>>>(spec.n_heads));
    if (!set) return;
    recompute = set->recompute_pattern;
    for (const auto& e : set->residual) {
      topo.check(e.sender);
      topo.check(e.receiver);
      if (!topo.upstream(e.sender, e.receiver))
        throw ConfigError("edge sender " + to_string(e.sender) + " is not upstream of " +
                          to_string(e.receiver));
      if (e.position < 0 || e.position >= seq_len) throw ConfigError("edge position out of range");
      const int r = topo.index(e.receiver);
      auto& rows = residual[r];
      if (rows.empty()) rows.resize(topo.n_upstream(e.receiver));
      auto& flags = rows[topo.index(e.sender)];
      if (flags.empty()) flags.assign(seq_len, 0);
      flags[e.position] = 1;
      receiver_patched[r] = true;
      any = true;
    }
    for (const auto& c : set->cross) {
      topo.check(Component::attn(c.layer, c.head));
      if (c.src < 0 || c.dst >= seq_len || c.src > c.dst)
        throw ConfigError("cross edge positions must satisfy 0 <= src <= dst < seq_len");
      auto& flags = cross[c.layer][c.head][c.dst];
      if (flags.empty()) flags.assign(seq_len, 0);
      flags[c.src] = 1;
      any = true;
    }
  }
};

/// Ordered sum of the first `n_up` sender outputs. Restored (sender,
/// position) rows come from `src`. The summation order is identical whether
/// or not a row is restored, so restoring every edge from a run reproduces
/// that run's read-point inputs bit for bit.
template <class T>
Mat<T> read_point(const std::vector<const Mat<T>*>& outs, int n_up,
                  const std::vector<std::vector<std::uint8_t>>* flags,
                  const std::vector<const Mat<T>*>* src) {
  auto pick_row = [&](int s, Eigen::Index p) -> const auto {
    const bool restored = flags && !(*flags)[s].empty() && (*flags)[s][p];
    return restored ? (*src)[s]->row(p) : outs[s]->row(p);
  };
  Mat<T> acc = *outs[0];
  if (flags && !(*flags)[0].empty())
    for (Eigen::Index p = 0; p < acc.rows(); ++p) acc.row(p) = pick_row(0, p);
  for (int s = 1; s < n_up; ++s) {
    if (flags && !(*flags)[s].empty()) {
      for (Eigen::Index p = 0; p < acc.rows(); ++p) acc.row(p) += pick_row(s, p);
    } else {
      acc += *outs[s];
    }
  }
  return acc;
}

template <class T>
void attention_pattern_row(const Mat<T>& q, const Mat<T>& k, int j, T scale, Mat<T>& pattern) {
  T mx = -std::numeric_limits<T>::infinity();
  for (int i = 0; i <= j; ++i) {
    const T s = q.row(j).dot(k.row(i)) * scale;
    pattern(j, i) = s;
    mx = std::max(mx, s);
  }
  T sum = 0;
  for (int i = 0; i <= j; ++i) {
    const T e = std::exp(pattern(j, i) - mx);
    pattern(j, i) = e;
    sum += e;
  }
  for (int i = 0; i <= j; ++i) pattern(j, i) /= sum;
  for (Eigen::Index i = j + 1; i < pattern.cols(); ++i) pattern(j, i) = 0;
}

}  // namespace detail

/// Runs the model on a residual-stream input (token + position embeddings,
/// possibly interpolated) and records every intermediate.
///
/// `plan` modifies component outputs. `edges` restores individual edges to
/// the values they carried in `source`, which must be a cache of the same
/// length.
template <class T>
ActivationCache<T> forward_with_cache(const Weights<T>& w, const Mat<T>& embed_input,
                                      const InterventionPlan<T>& plan = {},
                                      const EdgePatchSet* edges = nullptr,
                                      const ActivationCache<T>* source = nullptr) {
  const ModelSpec& s = w.spec;
  const int T_ = static_cast<int>(embed_input.rows());
  if (T_ < 1 || T_ > s.max_seq) throw ConfigError("sequence length out of range");
  if (embed_input.cols() != s.d_model) throw ShapeError("embedding input has wrong width");
  Topology topo(s);

  detail::CompiledPlan<T> cplan(plan, s, T_);
  detail::CompiledEdges cedges(edges, s, T_);
  if (cedges.any) {
    if (!source) throw ConfigError("edge restoration requires a source cache");
    if (source->seq_len != T_) throw ConfigError("source cache length differs from input");
  }

  ActivationCache<T> c;
  c.seq_len = T_;
  c.intervened = cplan.any || cedges.any;
  c.embed = embed_input;
  cplan.apply(0, c.embed);
  c.heads.resize(s.n_layers);
  c.mlps.resize(s.n_layers);

  std::vector<const Mat<T>*> outs(topo.n_senders(), nullptr);
  std::vector<const Mat<T>*> src_outs;
  if (cedges.any) {
    src_outs.resize(topo.n_senders());
    for (int i = 0; i < topo.n_senders(); ++i) src_outs[i] = &source->output(topo.at(i));
  }
  outs[0] = &c.embed;

  auto input_for = [&](const Component& r, const Mat<T>* shared) -> Mat<T> {
    const int ri = topo.index(r);
    if (!cedges.receiver_patched[ri]) return *shared;
    return detail::read_point(outs, topo.n_upstream(r), &cedges.residual[ri], &src_outs);
  };

  const T scale = T(1) / std::sqrt(static_cast<T>(s.d_head));
  for (int l = 0; l < s.n_layers; ++l) {
    const auto& L = w.layers[l];
    // Heads of one layer all read the same prefix of the residual stream.
    const Mat<T> attn_in =
        detail::read_point<T>(outs, topo.n_upstream(Component::attn(l, 0)), nullptr, nullptr);
    c.heads[l].resize(s.n_heads);
    for (int h = 0; h < s.n_heads; ++h) {
      const auto& H = L.heads[h];
      auto& a = c.heads[l][h];
      a.input = input_for(Component::attn(l, h), &attn_in);
      ops::layer_norm(a.input, L.ln1_g, L.ln1_b, s.ln_epsilon, a.ln, a.ln_out);
      a.q = a.ln_out * H.w_q;
      a.q.rowwise() += H.b_q;
      a.k = a.ln_out * H.w_k;
      a.k.rowwise() += H.b_k;
      a.v = a.ln_out * H.w_v;
      a.v.rowwise() += H.b_v;
      a.pattern = Mat<T>::Zero(T_, T_);
      for (int j = 0; j < T_; ++j) detail::attention_pattern_row(a.q, a.k, j, scale, a.pattern);
      a.z = Mat<T>::Zero(T_, s.d_head);
      for (int j = 0; j < T_; ++j)
        for (int i = 0; i <= j; ++i) a.z.row(j) += a.pattern(j, i) * a.v.row(i);

      for (const auto& [dst, flags] : cedges.cross[l][h]) {
        const auto& sh = source->heads[l][h];
        if (cedges.recompute) {
          Mat<T> k2 = a.k;
          for (int i = 0; i <= dst; ++i)
            if (flags[i]) k2.row(i) = sh.k.row(i);
          detail::attention_pattern_row(a.q, k2, dst, scale, a.pattern);
        }
        RowVec<T> zj = RowVec<T>::Zero(s.d_head);
        for (int i = 0; i <= dst; ++i) {
          if (flags[i]) {
            zj += a.pattern(dst, i) * sh.v.row(i);
          } else {
            zj += a.pattern(dst, i) * a.v.row(i);
          }
        }
        a.z.row(dst) = zj;
      }

      a.out = a.z * H.w_o;
      cplan.apply(topo.index(Component::attn(l, h)), a.out);
      outs[topo.index(Component::attn(l, h))] = &a.out;
    }

    auto& m = c.mlps[l];
    const Component mc = Component::mlp(l);
    const Mat<T> mlp_in = detail::read_point<T>(outs, topo.n_upstream(mc), nullptr, nullptr);
    m.input = input_for(mc, &mlp_in);
    ops::layer_norm(m.input, L.ln2_g, L.ln2_b, s.ln_epsilon, m.ln, m.ln_out);
    m.pre = m.ln_out * L.w_in;
    m.pre.rowwise() += L.b_in;
    if (s.activation == Activation::Gelu) {
      m.act = m.pre.unaryExpr([](T x) { return ops::gelu(x); });
    } else {
      m.act = m.pre;
    }
    m.out = m.act * L.w_out;
    m.out.rowwise() += L.b_out;
    cplan.apply(topo.index(mc), m.out);
    outs[topo.index(mc)] = &m.out;
  }

  const Component lc = Component::logits();
  const Mat<T> fin = detail::read_point<T>(outs, topo.n_upstream(lc), nullptr, nullptr);
  c.final_input = input_for(lc, &fin);
  ops::layer_norm(c.final_input, w.lnf_g, w.lnf_b, s.ln_epsilon, c.final_ln, c.final_ln_out);
  c.logits = c.final_ln_out * w.w_u;
  return c;
}

template <class T>
ActivationCache<T> forward_with_cache(const Weights<T>& w, std::span<const int> tokens,
                                      const InterventionPlan<T>& plan = {},
                                      const EdgePatchSet* edges = nullptr,
                                      const ActivationCache<T>* source = nullptr) {
  auto c = forward_with_cache(w, embed_tokens(w, tokens), plan, edges, source);
  c.tokens.assign(tokens.begin(), tokens.end());
  return c;
}

template <class T>
ActivationCache<T> forward_with_cache(const Weights<T>& w, const std::vector<int>& tokens,
                                      const InterventionPlan<T>& plan = {},
                                      const EdgePatchSet* edges = nullptr,
                                      const ActivationCache<T>* source = nullptr) {
  return forward_with_cache(w, std::span<const int>(tokens), plan, edges, source);
}

/// Final-position logits only.
template <class T>
RowVec<T> final_logits(const Weights<T>& w, const std::vector<int>& tokens,
                       const InterventionPlan<T>& plan = {}) {
  return forward_with_cache(w, tokens, plan).final_logits();
}

}  // namespace clens
