#pragma once

#include "clens/error.hpp"
#include "clens/model/cache.hpp"
#include "clens/model/forward.hpp"
#include "clens/model/weights.hpp"

#include <functional>
#include <optional>
#include <string>

namespace clens {

/// Scalar function of the final-position logits. Returns the value and,
/// when `grad` is non-null, writes d(value)/d(logits) into it.
template <class T>
using Metric = std::function<T(const RowVec<T>& logits, RowVec<T>* grad)>;

template <class T>
Metric<T> constant_metric(T value) {
  return [value](const RowVec<T>& logits, RowVec<T>* grad) {
    if (grad) *grad = RowVec<T>::Zero(logits.size());
    return value;
  };
}

/// Raw logit of one token.
template <class T>
Metric<T> logit_metric(int token) {
  return [token](const RowVec<T>& logits, RowVec<T>* grad) {
    if (grad) {
      *grad = RowVec<T>::Zero(logits.size());
      (*grad)(token) = 1;
    }
    return logits(token);
  };
}

/// Backward rule per site family. `Gradient` is the exact derivative.
enum class Rule { Gradient, LnRule, IdentityRule, HalfRule };

inline std::string to_string(Rule r) {
  switch (r) {
    case Rule::Gradient: return "gradient";
    case Rule::LnRule: return "ln-rule";
    case Rule::IdentityRule: return "identity-rule";
    case Rule::HalfRule: return "half-rule";
  }
  return "?";
}

/// Which rule applies at LayerNorm, elementwise-nonlinearity and
/// attention-pattern x value sites.
///  - LN-rule: the normaliser 1/sigma is held constant.
///  - Identity-rule: the nonlinearity passes f(x)/x instead of f'(x).
///  - Half-rule: each factor of A.v receives half of its gradient.
struct RuleAssignment {
  std::optional<Rule> layer_norm;
  std::optional<Rule> nonlinearity;
  std::optional<Rule> bilinear;

  static RuleAssignment gradient() { return {Rule::Gradient, Rule::Gradient, Rule::Gradient}; }
  static RuleAssignment relp() { return {Rule::LnRule, Rule::IdentityRule, Rule::HalfRule}; }

  void validate() const {
    if (!layer_norm || !nonlinearity || !bilinear)
      throw ConfigError("unassigned rule site (layer_norm, nonlinearity and bilinear required)");
    if (*layer_norm != Rule::Gradient && *layer_norm != Rule::LnRule)
      throw ConfigError("layer_norm site accepts gradient or ln-rule");
    if (*nonlinearity != Rule::Gradient && *nonlinearity != Rule::IdentityRule)
      throw ConfigError("nonlinearity site accepts gradient or identity-rule");
    if (*bilinear != Rule::Gradient && *bilinear != Rule::HalfRule)
      throw ConfigError("bilinear site accepts gradient or half-rule");
  }
};

namespace detail {

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LnState<T>& st, const RowVec<T>& g,
                           bool detach_normaliser, RowVec<T>* dg, RowVec<T>* db) {
  if (dg) *dg += dy.cwiseProduct(st.xhat).colwise().sum();
  if (db) *db += dy.colwise().sum();
  const auto n = static_cast<T>(dy.cols());
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const RowVec<T> dxhat = dy.row(r).cwiseProduct(g);
    const T mean_d = dxhat.sum() / n;
    if (detach_normaliser) {
      dx.row(r) = st.rstd(r) * (dxhat.array() - mean_d).matrix();
    } else {
      const T mean_dx = dxhat.cwiseProduct(st.xhat.row(r)).sum() / n;
      dx.row(r) = st.rstd(r) * (dxhat.array() - mean_d - st.xhat.row(r).array() * mean_dx).matrix();
    }
  }
  return dx;
}

template <class T>
void check_finite(const Mat<T>& m, const std::string& where) {
  if (!m.allFinite()) throw NumericError("non-finite gradient at " + where);
}

}  // namespace detail

/// Reverse pass from d(metric)/d(final logits). Fills `param_grads` (added
/// to, not overwritten) when non-null. The cache must come from a forward
/// pass without interventions.
template <class T>
GradCache<T> backward_from_logit_grad(const Weights<T>& w, const ActivationCache<T>& c,
                                      const RowVec<T>& dlogits_final,
                                      const RuleAssignment& rules = RuleAssignment::gradient(),
                                      Weights<T>* param_grads = nullptr) {
  rules.validate();
  if (c.intervened) throw ConfigError("backward requires an unintervened forward cache");
  const ModelSpec& s = w.spec;
  const int T_ = c.seq_len;
  const bool ln_detach = *rules.layer_norm == Rule::LnRule;
  const bool act_identity = *rules.nonlinearity == Rule::IdentityRule;
  const T bil = *rules.bilinear == Rule::HalfRule ? T(0.5) : T(1);
  Weights<T>* pg = param_grads;

  GradCache<T> g;
  g.seq_len = T_;
  g.head_input.assign(s.n_layers, std::vector<Mat<T>>(s.n_heads));
  g.head_z.assign(s.n_layers, std::vector<Mat<T>>(s.n_heads));
  g.mlp_input.resize(s.n_layers);

  Mat<T> dlogits = Mat<T>::Zero(T_, s.vocab_size);
  dlogits.row(T_ - 1) = dlogits_final;
  if (pg) pg->w_u.noalias() += c.final_ln_out.transpose() * dlogits;
  Mat<T> d_ln = dlogits * w.w_u.transpose();
  g.final_input = detail::layer_norm_backward(d_ln, c.final_ln, w.lnf_g, ln_detach,
                                              pg ? &pg->lnf_g : nullptr, pg ? &pg->lnf_b : nullptr);
  detail::check_finite(g.final_input, "logits");
  Mat<T> G = g.final_input;

  const T scale = T(1) / std::sqrt(static_cast<T>(s.d_head));
  for (int l = s.n_layers - 1; l >= 0; --l) {
    const auto& L = w.layers[l];
    auto* PL = pg ? &pg->layers[l] : nullptr;

    // MLP
    const auto& m = c.mlps[l];
    if (PL) {
      PL->w_out.noalias() += m.act.transpose() * G;
      PL->b_out += G.colwise().sum();
    }
    Mat<T> d_act = G * L.w_out.transpose();
    Mat<T> d_pre(d_act.rows(), d_act.cols());
    if (s.activation == Activation::Identity) {
      d_pre = d_act;
    } else if (act_identity) {
      d_pre = d_act.cwiseProduct(m.pre.unaryExpr([](T x) { return ops::gelu_ratio(x); }));
    } else {
      d_pre = d_act.cwiseProduct(m.pre.unaryExpr([](T x) { return ops::gelu_grad(x); }));
    }
    if (PL) {
      PL->w_in.noalias() += m.ln_out.transpose() * d_pre;
      PL->b_in += d_pre.colwise().sum();
    }
    Mat<T> d_mln = d_pre * L.w_in.transpose();
    g.mlp_input[l] = detail::layer_norm_backward(d_mln, m.ln, L.ln2_g, ln_detach,
                                                 PL ? &PL->ln2_g : nullptr, PL ? &PL->ln2_b : nullptr);
    detail::check_finite(g.mlp_input[l], to_string(Component::mlp(l)));
    G += g.mlp_input[l];

    // Attention heads read the residual below the MLP; their outputs receive G.
    Mat<T> G_below = G;
    for (int h = 0; h < s.n_heads; ++h) {
      const auto& H = L.heads[h];
      const auto& a = c.heads[l][h];
      auto* PH = PL ? &PL->heads[h] : nullptr;
      if (PH) PH->w_o.noalias() += a.z.transpose() * G;
      Mat<T> dz = G * H.w_o.transpose();
      g.head_z[l][h] = dz;

      Mat<T> dA = Mat<T>::Zero(T_, T_);
      Mat<T> dv = Mat<T>::Zero(T_, s.d_head);
      for (int j = 0; j < T_; ++j)
        for (int i = 0; i <= j; ++i) {
          dA(j, i) = bil * dz.row(j).dot(a.v.row(i));
          dv.row(i) += (bil * a.pattern(j, i)) * dz.row(j);
        }
      Mat<T> dscore = Mat<T>::Zero(T_, T_);
      for (int j = 0; j < T_; ++j) {
        T dot = 0;
        for (int i = 0; i <= j; ++i) dot += a.pattern(j, i) * dA(j, i);
        for (int i = 0; i <= j; ++i) dscore(j, i) = a.pattern(j, i) * (dA(j, i) - dot) * scale;
      }
      Mat<T> dq = dscore * a.k;
      Mat<T> dk = dscore.transpose() * a.q;
      if (PH) {
        PH->w_q.noalias() += a.ln_out.transpose() * dq;
        PH->w_k.noalias() += a.ln_out.transpose() * dk;
        PH->w_v.noalias() += a.ln_out.transpose() * dv;
        PH->b_q += dq.colwise().sum();
        PH->b_k += dk.colwise().sum();
        PH->b_v += dv.colwise().sum();
      }
      Mat<T> d_hln = dq * H.w_q.transpose();
      d_hln.noalias() += dk * H.w_k.transpose();
      d_hln.noalias() += dv * H.w_v.transpose();
      g.head_input[l][h] = detail::layer_norm_backward(
          d_hln, a.ln, L.ln1_g, ln_detach, PL ? &PL->ln1_g : nullptr, PL ? &PL->ln1_b : nullptr);
      detail::check_finite(g.head_input[l][h], to_string(Component::attn(l, h)));
      G_below += g.head_input[l][h];
    }
    G = std::move(G_below);
  }
  g.embed = G;
  if (pg && !c.tokens.empty()) {
    for (int p = 0; p < T_; ++p) {
      pg->tok_embed.row(c.tokens[p]) += G.row(p);
      pg->pos_embed.row(p) += G.row(p);
    }
  }
  return g;
}

template <class T>
GradCache<T> backward_with_rules(const Weights<T>& w, const ActivationCache<T>& c,
                                 const Metric<T>& metric, const RuleAssignment& rules) {
  RowVec<T> dlogits;
  metric(c.final_logits(), &dlogits);
  if (!dlogits.allFinite()) throw NumericError("non-finite metric gradient at logits");
  return backward_from_logit_grad(w, c, dlogits, rules);
}

/// Exact reverse-mode gradients of `metric` for a cached forward pass.
template <class T>
GradCache<T> backward_gradients(const Weights<T>& w, const ActivationCache<T>& c,
                                const Metric<T>& metric) {
  return backward_with_rules(w, c, metric, RuleAssignment::gradient());
}

template <class T>
GradCache<T> backward_gradients(const Weights<T>& w, const std::vector<int>& tokens,
                                const Metric<T>& metric) {
  return backward_gradients(w, forward_with_cache(w, tokens), metric);
}

/// Rule-modified backward with the same key structure as
/// `backward_gradients`.
template <class T>
GradCache<T> lrp_backward(const Weights<T>& w, const ActivationCache<T>& c,
                          const Metric<T>& metric, const RuleAssignment& rules = RuleAssignment::relp()) {
  return backward_with_rules(w, c, metric, rules);
}

template <class T>
GradCache<T> lrp_backward(const Weights<T>& w, const std::vector<int>& tokens,
                          const Metric<T>& metric, const RuleAssignment& rules = RuleAssignment::relp()) {
  return lrp_backward(w, forward_with_cache(w, tokens), metric, rules);
}

}  // namespace clens
