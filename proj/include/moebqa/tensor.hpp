// Copyright (c) 2026, the moebqa authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "moebqa/error.hpp"

namespace moebqa {

// Dense row-major storage, rank 0 (scalar), 1 (vector) or 2 (matrix). The
// encoder never needs higher rank: attention heads are handled by column
// slicing.
class Shape {
 public:
  Shape() : rank_(0), dims_{1, 1} {}
  explicit Shape(int64_t n) : rank_(1), dims_{n, 1} {
    if (n < 0) throw DimensionError("negative dimension " + std::to_string(n));
  }
  Shape(int64_t r, int64_t c) : rank_(2), dims_{r, c} {
    if (r < 0 || c < 0) throw DimensionError("negative dimension in shape");
  }

  [[nodiscard]] int rank() const { return rank_; }
  [[nodiscard]] int64_t numel() const { return dims_[0] * dims_[1]; }
  [[nodiscard]] int64_t rows() const { return dims_[0]; }
  [[nodiscard]] int64_t cols() const { return rank_ == 2 ? dims_[1] : 1; }
  [[nodiscard]] int64_t dim(int i) const { return dims_[static_cast<size_t>(i)]; }
  // Length of the last dimension (softmax/layer-norm axis).
  [[nodiscard]] int64_t last_dim() const {
    if (rank_ == 0) return 1;
    return rank_ == 1 ? dims_[0] : dims_[1];
  }

  bool operator==(const Shape& o) const {
    if (rank_ != o.rank_) return false;
    for (int i = 0; i < rank_; ++i) {
      if (dims_[static_cast<size_t>(i)] != o.dims_[static_cast<size_t>(i)]) return false;
    }
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  [[nodiscard]] std::string str() const {
    std::ostringstream os;
    os << '[';
    for (int i = 0; i < rank_; ++i) {
      if (i) os << ',';
      os << dims_[static_cast<size_t>(i)];
    }
    os << ']';
    return os.str();
  }

 private:
  int rank_;
  std::array<int64_t, 2> dims_;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily, same length as data when present
  bool requires_grad = false;
};

// Value-semantics handle onto shared storage; copies alias. Gradients
// accumulate additively into `grad` during Tape::backward.
template <typename T>
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->data.assign(1, T(0));
  }
  explicit Tensor(Shape shape, T fill = T(0))
      : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->shape = shape;
    impl_->data.assign(static_cast<size_t>(shape.numel()), fill);
  }
  Tensor(Shape shape, std::vector<T> values)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    if (static_cast<int64_t>(values.size()) != shape.numel()) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + shape.str());
    }
    impl_->shape = shape;
    impl_->data = std::move(values);
  }

  static Tensor scalar(T v) {
    Tensor t{Shape{}};
    t.impl_->data[0] = v;
    return t;
  }

  // Handle semantics: a const Tensor is a const handle onto shared, mutable
  // storage (like shared_ptr), so autodiff closures can accumulate gradients
  // through captured copies.
  [[nodiscard]] const Shape& shape() const { return impl_->shape; }
  [[nodiscard]] int64_t numel() const { return impl_->shape.numel(); }

  [[nodiscard]] std::span<T> data() const { return impl_->data; }

  [[nodiscard]] bool requires_grad() const { return impl_->requires_grad; }
  const Tensor& set_requires_grad(bool v) const {
    impl_->requires_grad = v;
    return *this;
  }

  [[nodiscard]] bool has_grad() const { return !impl_->grad.empty(); }
  [[nodiscard]] std::span<T> grad() const {
    ensure_grad();
    return impl_->grad;
  }
  void zero_grad() const {
    if (!impl_->grad.empty()) impl_->grad.assign(impl_->grad.size(), T(0));
  }
  void ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  }

  [[nodiscard]] T item() const {
    if (impl_->shape.rank() != 0) {
      throw DimensionError("item() requires a scalar, got " + impl_->shape.str());
    }
    return impl_->data[0];
  }
  [[nodiscard]] T at(int64_t i) const { return impl_->data[static_cast<size_t>(i)]; }
  [[nodiscard]] T at(int64_t r, int64_t c) const {
    return impl_->data[static_cast<size_t>(r * impl_->shape.cols() + c)];
  }
  void set(int64_t i, T v) const { impl_->data[static_cast<size_t>(i)] = v; }
  void set(int64_t r, int64_t c, T v) const {
    impl_->data[static_cast<size_t>(r * impl_->shape.cols() + c)] = v;
  }

  [[nodiscard]] bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }
  [[nodiscard]] std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

// Records executed operations; backward() replays them in exact reverse
// execution order, accumulating gradients additively. One tape per
// forward/backward pass.
template <typename T>
class Tape {
 public:
  void record(const char* op, std::function<void()> backward_fn) {
    records_.push_back({op, std::move(backward_fn)});
  }

  // Registers a tensor so zero_grad can reset it.
  void watch(const Tensor<T>& t) { watched_.push_back(t); }

  // Registers an op output. Interior gradients are scratch state of a single
  // backward pass; resetting them here is what makes repeated backward calls
  // accumulate exactly additively into the leaves.
  void watch_output(const Tensor<T>& t) {
    watched_.push_back(t);
    outputs_.push_back(t);
  }

  // Each pass computes the full gradient from zeroed buffers and then folds
  // previously accumulated gradients back in with a single addition, so two
  // passes after zero_grad yield exactly twice the single-pass gradient.
  void backward(Tensor<T> loss) {
    if (loss.shape().rank() != 0) {
      throw DimensionError("backward requires a scalar loss, got " +
                           loss.shape().str());
    }
    std::unordered_set<const TensorImpl<T>*> interior;
    for (auto& t : outputs_) {
      interior.insert(t.impl().get());
      t.zero_grad();
    }
    std::vector<std::pair<Tensor<T>, std::vector<T>>> stashed;
    std::unordered_set<const TensorImpl<T>*> seen;
    for (auto& t : watched_) {
      if (interior.contains(t.impl().get())) continue;
      if (!seen.insert(t.impl().get()).second) continue;
      if (t.has_grad()) {
        auto g = t.grad();
        stashed.emplace_back(t, std::vector<T>(g.begin(), g.end()));
        t.zero_grad();
      }
    }
    loss.ensure_grad();
    loss.grad()[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      it->fn();
    }
    for (auto& [t, saved] : stashed) {
      auto g = t.grad();
      for (size_t i = 0; i < saved.size(); ++i) g[i] += saved[i];
    }
  }

  void zero_grad() {
    for (auto& t : watched_) t.zero_grad();
  }

  [[nodiscard]] size_t size() const { return records_.size(); }
  void clear() {
    records_.clear();
    watched_.clear();
    outputs_.clear();
  }

 private:
  struct Record {
    const char* op;
    std::function<void()> fn;
  };
  std::vector<Record> records_;
  std::vector<Tensor<T>> watched_;
  std::vector<Tensor<T>> outputs_;
};

template <typename T>
inline void check_finite(const char* op, const Tensor<T>& t) {
  for (T v : t.data()) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericalError(std::string(op) + " produced a non-finite value");
    }
  }
}

}  // namespace moebqa
