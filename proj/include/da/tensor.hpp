#pragma once

#include <Eigen/Core>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace da {

using Scalar = double;
using Array = Eigen::ArrayXd;
using Index = Eigen::Index;

/// Base class for every error the library throws.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dimension/shape contract violations; the message names the offending dims.
struct ShapeError : Error {
  using Error::Error;
};

/// Invalid numeric argument or value (negative scale, bad probability, ...).
struct ValueError : Error {
  using Error::Error;
};

/// Invalid configuration (e.g. every alignment term switched off).
struct ConfigError : Error {
  using Error::Error;
};

/// Filesystem and serialization failures; the message names the path.
struct IoError : Error {
  using Error::Error;
};

std::string shape_to_string(const std::vector<Index>& shape);

/// Dense n-dimensional array of doubles in row-major order. This is the
/// universal value carrier: activations, parameters, gradients, images.
/// Plain value semantics; Eigen::ArrayXd is the only storage backend.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<Index> shape)
      : shape_(std::move(shape)), data_(Array::Zero(count(shape_))) {}

  Tensor(std::vector<Index> shape, Array data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_to_string(shape_));
    }
  }

  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<Index> shape, double v) {
    Tensor t(std::move(shape));
    t.data_.setConstant(v);
    return t;
  }

  static Tensor ones(std::vector<Index> shape) { return full(std::move(shape), 1.0); }

  static Tensor scalar(double v) { return full({1}, v); }

  /// Row-major tensor from a flat list, mainly for tests.
  static Tensor from(std::vector<Index> shape, std::initializer_list<double> values) {
    Tensor t(std::move(shape));
    if (static_cast<Index>(values.size()) != t.numel()) {
      throw ShapeError("initializer length " + std::to_string(values.size()) +
                       " does not match shape " + shape_to_string(t.shape()));
    }
    Index i = 0;
    for (double v : values) t.data_[i++] = v;
    return t;
  }

  const std::vector<Index>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index numel() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }

  /// Value of a one-element tensor.
  double item() const {
    if (numel() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
    }
    return data_[0];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const { return data_.isFinite().all(); }

  /// Same data, new shape (element count must match).
  Tensor reshaped(std::vector<Index> shape) const {
    if (count(shape) != numel()) {
      throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " +
                       shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  static Index count(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
      if (d < 0) throw ShapeError("negative dimension in " + shape_to_string(shape));
      n *= d;
    }
    return n;
  }

 private:
  std::vector<Index> shape_;
  Array data_;
};

}  // namespace da
