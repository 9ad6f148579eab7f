// Copyright 2026 The fsdp-sim Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fsdp/errors.hpp"

namespace fsdp {

// Full precision is binary64 and low precision is binary32, so the byte
// widths differ by exactly 2x.
enum class DType { kFull, kLow };

template <typename T>
concept Scalar = std::is_same_v<T, double> || std::is_same_v<T, float>;

template <Scalar T>
constexpr DType dtype_of() {
  return std::is_same_v<T, double> ? DType::kFull : DType::kLow;
}

constexpr std::size_t bytes_per_element(DType d) { return d == DType::kFull ? 8 : 4; }

inline const char* dtype_name(DType d) { return d == DType::kFull ? "full" : "low"; }

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// "4x3", or "scalar" for an empty shape.
inline std::string shape_str(const Shape& shape) {
  if (shape.empty()) return "scalar";
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

// A non-owning (offset, numel, shape) window over contiguous storage.
template <Scalar T>
struct TensorView {
  std::span<T> data;
  Shape shape;

  std::size_t size() const { return data.size(); }
  T& operator[](std::size_t i) const { return data[i]; }
};

// Dense row-major tensor that owns its storage.
template <Scalar T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(fsdp::numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (fsdp::numel(shape_) != data_.size()) {
      throw ShapeError("tensor of shape " + shape_str(shape_) + " given " +
                       std::to_string(data_.size()) + " elements");
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  TensorView<T> view() { return {std::span<T>(data_), shape_}; }

  // Rows [begin, end) of a 2-D tensor, copied.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.size() != 2 || begin > end || end > rows()) {
      throw ShapeError("slice_rows out of range on shape " + shape_str(shape_));
    }
    const std::size_t c = cols();
    return Tensor({end - begin, c},
                  std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                                 data_.begin() + static_cast<std::ptrdiff_t>(end * c)));
  }

  template <Scalar U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  void validate_shape() const {
    for (std::size_t e : shape_) {
      if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

// Stacks the rows of 2-D tensors with equal column counts.
template <Scalar T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const std::size_t c = parts.front().cols();
  std::vector<T> data;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    data.insert(data.end(), p.storage().begin(), p.storage().end());
    rows += p.rows();
  }
  return Tensor<T>({rows, c}, std::move(data));
}

}  // namespace fsdp
