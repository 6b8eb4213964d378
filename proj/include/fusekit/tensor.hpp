#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <map>
#include <string>
#include <vector>

namespace fusekit {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// A rank-1 or rank-2 parameter tensor. Rank-1 tensors of length n are held
/// as a 1 x n matrix; `shape` keeps the declared rank.
template <typename Scalar>
struct Tensor {
  std::vector<std::size_t> shape;
  Matrix<Scalar> values;

  std::size_t numel() const { return static_cast<std::size_t>(values.size()); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape && a.values.rows() == b.values.rows() && a.values.cols() == b.values.cols() &&
           a.values == b.values;
  }
};

template <typename Scalar>
Tensor<Scalar> make_tensor(std::vector<std::size_t> shape) {
  Tensor<Scalar> t;
  t.shape = std::move(shape);
  const auto rows = t.shape.size() == 2 ? t.shape[0] : 1;
  const auto cols = t.shape.empty() ? 0 : t.shape.back();
  t.values = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  return t;
}

/// Named parameter tensors plus free-form string metadata. Ordered by name,
/// which is also the canonical on-disk order.
template <typename Scalar>
struct TensorMap {
  std::map<std::string, Tensor<Scalar>> tensors;
  std::map<std::string, std::string> metadata;

  bool operator==(const TensorMap&) const = default;
};

using NamedTensorMap = TensorMap<float>;

template <typename To, typename From>
TensorMap<To> tensor_cast(const TensorMap<From>& in) {
  TensorMap<To> out;
  out.metadata = in.metadata;
  for (const auto& [name, t] : in.tensors) {
    out.tensors.emplace(name, Tensor<To>{t.shape, t.values.template cast<To>()});
  }
  return out;
}

/// Bitwise equality of the float payloads (distinguishes -0.0 from +0.0).
bool bitwise_equal(const NamedTensorMap& a, const NamedTensorMap& b);

}  // namespace fusekit
