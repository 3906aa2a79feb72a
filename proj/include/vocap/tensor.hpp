#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include "vocap/common.hpp"

namespace vocap {

/// 64-byte aligned allocator. Fixing the buffer alignment keeps Eigen's SIMD
/// loop peeling identical across runs, which keeps reductions bit-for-bit
/// reproducible regardless of where the heap places an allocation.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) noexcept {
    ::operator delete(p, std::align_val_t(alignment));
  }
  // Default-construction is a no-op for trivial types, so resize() does not
  // zero buffers that are about to be overwritten.
  template <typename U>
  void construct(U* p) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
  template <typename U>
  bool operator!=(const AlignedAllocator<U>&) const {
    return false;
  }
};

/// Dense row-major tensor. Data is shared between copies; treat tensors as
/// immutable once published to other owners (graph nodes, memory banks).
template <typename S>
class Tensor {
 public:
  using Scalar = S;
  using Storage = std::vector<S, AlignedAllocator<S>>;
  using EigenMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstEigenMap =
      Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)),
        data_(std::make_shared<Storage>(count(shape_), S(0))) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  /// Allocation without zero-fill, for outputs that are fully overwritten.
  static Tensor uninit(std::vector<int> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<Storage>();
    t.data_->resize(static_cast<size_t>(count(t.shape_)));
    return t;
  }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor scalar(S value) { return full({1}, value); }

  static Tensor from_vector(std::vector<int> shape, const std::vector<S>& values) {
    if (static_cast<int64_t>(values.size()) != count(shape))
      throw ShapeMismatch("from_vector: element count does not match shape");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<Storage>(values.begin(), values.end());
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

  S* data() { return data_->data(); }
  const S* data() const { return data_->data(); }

  S& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  S& at(int i, int j) { return (*data_)[static_cast<size_t>(i) * dim(1) + j]; }
  S at(int i, int j) const { return (*data_)[static_cast<size_t>(i) * dim(1) + j]; }
  S& at(int i, int j, int k) {
    return (*data_)[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }
  S at(int i, int j, int k) const {
    return (*data_)[(static_cast<size_t>(i) * dim(1) + j) * dim(2) + k];
  }

  /// View with a different shape sharing the same buffer.
  Tensor reshaped(std::vector<int> new_shape) const {
    if (count(new_shape) != numel()) throw ShapeMismatch("reshaped: element count mismatch");
    Tensor t;
    t.shape_ = std::move(new_shape);
    t.data_ = data_;
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<Storage>(*data_);
    return t;
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  /// 2-D Eigen view; tensor must be reshapable to rows x cols.
  EigenMap mat(int rows, int cols) {
    assert(static_cast<int64_t>(rows) * cols == numel());
    return EigenMap(data(), rows, cols);
  }
  ConstEigenMap mat(int rows, int cols) const {
    assert(static_cast<int64_t>(rows) * cols == numel());
    return ConstEigenMap(data(), rows, cols);
  }

  /// Rows = product of leading dims, cols = last dim.
  int rows_flat() const { return static_cast<int>(numel() / dim(rank() - 1)); }
  int cols_flat() const { return dim(rank() - 1); }
  EigenMap mat() { return mat(rows_flat(), cols_flat()); }
  ConstEigenMap mat() const { return mat(rows_flat(), cols_flat()); }

  static int64_t count(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<Storage> data_;
};

template <typename S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

template <typename S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw ShapeMismatch("max_abs_diff");
  S m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace vocap
