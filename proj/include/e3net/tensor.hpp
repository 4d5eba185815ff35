#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "e3net/error.hpp"

namespace e3net {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;
template <typename S>
using MatrixRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense n-dimensional array over contiguous row-major storage. The flat
/// buffer is an Eigen array so elementwise expressions apply directly; 2-D
/// views for GEMM are exposed through Eigen::Map.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(ArrayX<S>::Zero(numel(shape_))) {}
  Tensor(Shape shape, ArrayX<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_))
      throw ShapeMismatch("tensor data size does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }
  static Tensor scalar(S v) { return full({1}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(std::size_t i) const { return shape_[i]; }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  ArrayX<S>& array() { return data_; }
  const ArrayX<S>& array() const { return data_; }
  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](Index i) { return data_[i]; }
  S operator[](Index i) const { return data_[i]; }

  /// Element access by multi-index (slow path; meant for tests and loaders).
  S& at(std::initializer_list<Index> idx) { return data_[offset(idx)]; }
  S at(std::initializer_list<Index> idx) const { return data_[offset(idx)]; }

  /// Row-major matrix view over the flat buffer.
  Eigen::Map<MatrixRM<S>> as_matrix(Index rows, Index cols) {
    if (rows * cols != size())
      throw ShapeMismatch("matrix view size mismatch for " + shape_str(shape_));
    return Eigen::Map<MatrixRM<S>>(data_.data(), rows, cols);
  }
  Eigen::Map<const MatrixRM<S>> as_matrix(Index rows, Index cols) const {
    if (rows * cols != size())
      throw ShapeMismatch("matrix view size mismatch for " + shape_str(shape_));
    return Eigen::Map<const MatrixRM<S>>(data_.data(), rows, cols);
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw ShapeMismatch("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const { return data_.isFinite().all(); }

  template <typename T>
  Tensor<T> cast() const {
    return Tensor<T>(shape_, data_.template cast<T>());
  }

 private:
  Index offset(std::initializer_list<Index> idx) const {
    Index off = 0;
    std::size_t k = 0;
    for (Index i : idx) off = off * shape_[k++] + i;
    return off;
  }

  Shape shape_;
  ArrayX<S> data_;
};

template <typename S>
bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape() == b.shape();
}

}  // namespace e3net
