#pragma once

#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "privpart/common.hpp"

namespace privpart {

using Shape = std::vector<size_t>;

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Dense row-major tensor. The element buffer is shared between copies;
// every op allocates a fresh output, and the only sanctioned in-place
// mutation is the optimizer writing into a parameter it owns, after the
// tape that referenced it has been dropped.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(shape_numel(shape_), T{})) {}

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)) {
    if (values.size() != shape_numel(shape_))
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape_));
    data_ = std::make_shared<std::vector<T>>(std::move(values));
  }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (T& x : *t.data_) x = value;
    return t;
  }

  static Tensor scalar(T value) { return full({1}, value); }

  bool empty() const { return !data_ || data_->empty(); }
  size_t size() const { return data_ ? data_->size() : 0; }
  size_t rank() const { return shape_.size(); }
  const Shape& shape() const { return shape_; }
  size_t dim(size_t i) const { return shape_.at(i); }

  T* data() { return data_->data(); }
  const T* data() const { return data_->data(); }

  T& operator[](size_t i) { return (*data_)[i]; }
  const T& operator[](size_t i) const { return (*data_)[i]; }

  T& at2(size_t r, size_t c) { return (*data_)[r * shape_[1] + c]; }
  const T& at2(size_t r, size_t c) const { return (*data_)[r * shape_[1] + c]; }

  // Same buffer, new shape.
  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                       shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_ ? std::make_shared<std::vector<T>>(*data_) : nullptr;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(size());
    for (size_t i = 0; i < size(); ++i) out[i] = static_cast<U>((*data_)[i]);
    return Tensor<U>(shape_, std::move(out));
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& x : *data_)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  bool bitwise_equal(const Tensor& o) const {
    if (shape_ != o.shape_) return false;
    return std::memcmp(data(), o.data(), size() * sizeof(T)) == 0;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace privpart
