#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <span>
#include <vector>

namespace clens {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

template <class T>
bool all_finite(const Eigen::DenseBase<T>& m) {
  return m.allFinite();
}

template <class To, class From>
Mat<To> cast_mat(const Mat<From>& m) {
  return m.template cast<To>();
}

template <class To, class From>
RowVec<To> cast_row(const RowVec<From>& v) {
  return v.template cast<To>();
}

inline std::span<const float> as_span(const RowVec<float>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace clens
