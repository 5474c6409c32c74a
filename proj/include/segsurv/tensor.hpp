// Dense C-order tensor templated on scalar type.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace segsurv {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Number of elements described by a shape (1 for rank 0).
Index numel(const Shape& shape);

/// "[2,3,4]" style rendering used in error messages.
std::string shape_str(const Shape& shape);

/// Thrown by primitives when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] void throw_shape_error(const std::string& op, const Shape& a, const Shape& b);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct Tensor {
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

  Shape shape;
  Array data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(Array::Zero(numel(shape))) {}
  Tensor(Shape s, Array d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) {
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor constant(Shape s, Scalar v) {
    Tensor t(std::move(s));
    t.data.setConstant(v);
    return t;
  }
  static Tensor scalar(Scalar v) { return constant(Shape{}, v); }

  Index size() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(Index axis) const { return shape.at(static_cast<size_t>(axis < 0 ? axis + rank() : axis)); }

  Scalar& operator[](Index i) { return data[i]; }
  const Scalar& operator[](Index i) const { return data[i]; }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape) + " is not a scalar");
    return data[0];
  }

  /// Views the buffer as a row-major rows x cols matrix.
  MatrixMap matrix(Index rows, Index cols) { return MatrixMap(data.data(), rows, cols); }
  ConstMatrixMap matrix(Index rows, Index cols) const { return ConstMatrixMap(data.data(), rows, cols); }
  /// Matrix view with the last axis as columns and all leading axes flattened.
  MatrixMap matrix() { return matrix(size() / dim(-1), dim(-1)); }
  ConstMatrixMap matrix() const { return matrix(size() / dim(-1), dim(-1)); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }

  bool allfinite() const { return data.allFinite(); }
};

}  // namespace segsurv
