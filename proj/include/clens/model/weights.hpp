#pragma once

#include "clens/error.hpp"
#include "clens/model/spec.hpp"
#include "clens/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace clens {

template <class T>
struct HeadWeights {
  Mat<T> w_q, w_k, w_v;   // [d_model x d_head]
  RowVec<T> b_q, b_k, b_v;  // [d_head]
  Mat<T> w_o;             // [d_head x d_model]
};

template <class T>
struct LayerWeights {
  RowVec<T> ln1_g, ln1_b;
  std::vector<HeadWeights<T>> heads;
  RowVec<T> ln2_g, ln2_b;
  Mat<T> w_in;    // [d_model x d_mlp]
  RowVec<T> b_in;
  Mat<T> w_out;   // [d_mlp x d_model]
  RowVec<T> b_out;
};

template <class T>
struct Weights {
  ModelSpec spec;
  Mat<T> tok_embed;  // [vocab x d_model]
  Mat<T> pos_embed;  // [max_seq x d_model]
  std::vector<LayerWeights<T>> layers;
  RowVec<T> lnf_g, lnf_b;
  Mat<T> w_u;  // [d_model x vocab]
};

/// Non-owning view of one parameter tensor, in canonical order.
template <class T>
struct ParamView {
  std::string name;
  std::vector<int> shape;
  T* data = nullptr;
  std::size_t size = 0;
};

namespace detail {

template <class T, class M>
void push_view(std::vector<ParamView<T>>& out, std::string name, M& m, bool is_row) {
  std::vector<int> shape = is_row ? std::vector<int>{static_cast<int>(m.size())}
                                  : std::vector<int>{static_cast<int>(m.rows()),
                                                     static_cast<int>(m.cols())};
  out.push_back({std::move(name), std::move(shape), m.data(), static_cast<std::size_t>(m.size())});
}

}  // namespace detail

/// Every parameter tensor of `w` in a fixed order. The checkpoint layout and
/// the optimizer state both follow this order.
template <class T>
std::vector<ParamView<T>> param_views(Weights<T>& w) {
  std::vector<ParamView<T>> v;
  detail::push_view(v, "tok_embed", w.tok_embed, false);
  detail::push_view(v, "pos_embed", w.pos_embed, false);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    detail::push_view(v, p + "ln1_g", L.ln1_g, true);
    detail::push_view(v, p + "ln1_b", L.ln1_b, true);
    for (std::size_t h = 0; h < L.heads.size(); ++h) {
      auto& H = L.heads[h];
      const std::string q = p + "heads." + std::to_string(h) + ".";
      detail::push_view(v, q + "w_q", H.w_q, false);
      detail::push_view(v, q + "w_k", H.w_k, false);
      detail::push_view(v, q + "w_v", H.w_v, false);
      detail::push_view(v, q + "b_q", H.b_q, true);
      detail::push_view(v, q + "b_k", H.b_k, true);
      detail::push_view(v, q + "b_v", H.b_v, true);
      detail::push_view(v, q + "w_o", H.w_o, false);
    }
    detail::push_view(v, p + "ln2_g", L.ln2_g, true);
    detail::push_view(v, p + "ln2_b", L.ln2_b, true);
    detail::push_view(v, p + "w_in", L.w_in, false);
    detail::push_view(v, p + "b_in", L.b_in, true);
    detail::push_view(v, p + "w_out", L.w_out, false);
    detail::push_view(v, p + "b_out", L.b_out, true);
  }
  detail::push_view(v, "lnf_g", w.lnf_g, true);
  detail::push_view(v, "lnf_b", w.lnf_b, true);
  detail::push_view(v, "w_u", w.w_u, false);
  return v;
}

template <class T>
std::vector<ParamView<const T>> param_views(const Weights<T>& w) {
  auto mut = param_views(const_cast<Weights<T>&>(w));
  std::vector<ParamView<const T>> out;
  out.reserve(mut.size());
  for (auto& p : mut) out.push_back({std::move(p.name), std::move(p.shape), p.data, p.size});
  return out;
}

/// All-zero weights with LayerNorm scales set to one.
template <class T>
Weights<T> zero_weights(const ModelSpec& s) {
  s.validate();
  Weights<T> w;
  w.spec = s;
  w.tok_embed = Mat<T>::Zero(s.vocab_size, s.d_model);
  w.pos_embed = Mat<T>::Zero(s.max_seq, s.d_model);
  w.layers.resize(s.n_layers);
  for (auto& L : w.layers) {
    L.ln1_g = RowVec<T>::Ones(s.d_model);
    L.ln1_b = RowVec<T>::Zero(s.d_model);
    L.heads.resize(s.n_heads);
    for (auto& H : L.heads) {
      H.w_q = Mat<T>::Zero(s.d_model, s.d_head);
      H.w_k = Mat<T>::Zero(s.d_model, s.d_head);
      H.w_v = Mat<T>::Zero(s.d_model, s.d_head);
      H.b_q = RowVec<T>::Zero(s.d_head);
      H.b_k = RowVec<T>::Zero(s.d_head);
      H.b_v = RowVec<T>::Zero(s.d_head);
      H.w_o = Mat<T>::Zero(s.d_head, s.d_model);
    }
    L.ln2_g = RowVec<T>::Ones(s.d_model);
    L.ln2_b = RowVec<T>::Zero(s.d_model);
    L.w_in = Mat<T>::Zero(s.d_model, s.d_mlp);
    L.b_in = RowVec<T>::Zero(s.d_mlp);
    L.w_out = Mat<T>::Zero(s.d_mlp, s.d_model);
    L.b_out = RowVec<T>::Zero(s.d_model);
  }
  w.lnf_g = RowVec<T>::Ones(s.d_model);
  w.lnf_b = RowVec<T>::Zero(s.d_model);
  w.w_u = Mat<T>::Zero(s.d_model, s.vocab_size);
  return w;
}

/// Same-shaped tensors, all zero (including LayerNorm scales). Used for
/// gradient accumulators and optimizer moments.
template <class T>
Weights<T> zeros_like(const Weights<T>& w) {
  Weights<T> z = w;
  for (auto& p : param_views(z)) std::fill(p.data, p.data + p.size, T(0));
  return z;
}

/// Gaussian initialisation: matrices ~ N(0, std^2), output projections scaled
/// by 1/sqrt(2 * n_layers), biases zero, LayerNorm scales one.
template <class T>
Weights<T> random_weights(const ModelSpec& s, std::uint64_t seed, double std = 0.02) {
  Weights<T> w = zero_weights<T>(s);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const double out_scale = 1.0 / std::sqrt(2.0 * s.n_layers);
  for (auto& p : param_views(w)) {
    const auto& n = p.name;
    const bool is_matrix = p.shape.size() == 2;
    if (!is_matrix) continue;
    double scale = std;
    if (n.ends_with("w_o") || n.ends_with("w_out")) scale *= out_scale;
    for (std::size_t i = 0; i < p.size; ++i) p.data[i] = static_cast<T>(nd(rng) * scale);
  }
  return w;
}

/// Fills every tensor (including biases and LayerNorm parameters) with
/// random values; LayerNorm scales stay near one. Gives test models with no
/// structurally-zero paths.
template <class T>
Weights<T> random_dense_weights(const ModelSpec& s, std::uint64_t seed, double std = 0.3) {
  Weights<T> w = zero_weights<T>(s);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& p : param_views(w)) {
    const bool ln_scale = p.name.ends_with("_g");
    for (std::size_t i = 0; i < p.size; ++i) {
      const double r = nd(rng);
      p.data[i] = static_cast<T>(ln_scale ? 1.0 + 0.1 * r : std * r);
    }
  }
  return w;
}

template <class To, class From>
Weights<To> cast_weights(const Weights<From>& w) {
  Weights<To> out = zero_weights<To>(w.spec);
  auto src = param_views(w);
  auto dst = param_views(out);
  for (std::size_t i = 0; i < src.size(); ++i)
    for (std::size_t j = 0; j < src[i].size; ++j) dst[i].data[j] = static_cast<To>(src[i].data[j]);
  return out;
}

template <class T>
void validate_weights(const Weights<T>& w) {
  w.spec.validate();
  const auto ref = zero_weights<T>(w.spec);
  auto a = param_views(w);
  auto b = param_views(ref);
  if (a.size() != b.size()) throw ShapeError("weights: wrong tensor count");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape != b[i].shape) throw ShapeError("weights: shape mismatch for " + a[i].name);
    for (std::size_t j = 0; j < a[i].size; ++j)
      if (!std::isfinite(static_cast<double>(a[i].data[j])))
        throw NumericError("weights: non-finite entry in " + a[i].name);
  }
}

template <class T>
std::size_t parameter_count(const Weights<T>& w) {
  std::size_t n = 0;
  for (const auto& p : param_views(w)) n += p.size;
  return n;
}

}  // namespace clens
