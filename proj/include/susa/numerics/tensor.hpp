#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <type_traits>
#include <vector>

namespace susa {

/// Scalar type for losses and reductions over T: double, or long double for
/// extended-precision tensors.
template <typename T>
using Accum = std::conditional_t<std::is_same_v<T, long double>, long double, double>;

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Thrown when an operation receives tensors whose shapes do not fit together.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown when a NaN or Inf shows up where finite values are required.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major tensor with the channel axis last.
///
/// Image batches are laid out as [N, H, W, C], single images as [H, W, C],
/// per-pixel feature matrices as [N, F]. The element count always equals the
/// product of the shape.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_size(shape_)) {
      throw ShapeError("tensor of shape " + shape_string(shape_) + " needs " +
                       std::to_string(shape_size(shape_)) + " values, got " +
                       std::to_string(data_.size()));
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Element access for rank-4 [N,H,W,C] tensors.
  T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) noexcept {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }
  const T& at(std::size_t n, std::size_t h, std::size_t w, std::size_t c) const noexcept {
    return data_[((n * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
  }

  /// Element access for rank-3 [H,W,C] tensors.
  T& at(std::size_t h, std::size_t w, std::size_t c) noexcept {
    return data_[(h * shape_[1] + w) * shape_[2] + c];
  }
  const T& at(std::size_t h, std::size_t w, std::size_t c) const noexcept {
    return data_[(h * shape_[1] + w) * shape_[2] + c];
  }

  /// Same data under a new shape with the same element count.
  Tensor reshaped(Shape shape) const& {
    Tensor out;
    out.shape_ = std::move(shape);
    check_reshape(out.shape_);
    out.data_ = data_;
    return out;
  }
  Tensor reshaped(Shape shape) && {
    check_reshape(shape);
    shape_ = std::move(shape);
    return std::move(*this);
  }

  void fill(T value) {
    for (auto& v : data_) v = value;
  }

  bool all_finite() const noexcept {
    for (const auto& v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  void require_finite(std::string_view what) const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
      if (!std::isfinite(data_[i])) {
        throw NonFiniteError(std::string(what) + ": non-finite value at element " +
                             std::to_string(i));
      }
    }
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_reshape(const Shape& shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

/// Throws ShapeError naming both shapes when they differ.
void require_same_shape(const Shape& a, const Shape& b, std::string_view what);

enum class ParamKind { weight, bias, pelu };

std::string_view to_string(ParamKind kind);
ParamKind param_kind_from_string(std::string_view s);

/// A trainable tensor and its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  ParamKind kind = ParamKind::weight;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, ParamKind k, Tensor<T> v)
      : name(std::move(n)), kind(k), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
void zero_grads(std::span<Parameter<T>> params) {
  for (auto& p : params) p.zero_grad();
}

template <typename T>
std::size_t parameter_count(std::span<const Parameter<T>> params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

/// Converts a whole parameter list to another precision, keeping names and kinds.
template <typename U, typename T>
std::vector<Parameter<U>> cast_parameters(std::span<const Parameter<T>> params) {
  std::vector<Parameter<U>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    Parameter<U> q(p.name, p.kind, p.value.template cast<U>());
    q.trainable = p.trainable;
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace susa
