// 4-D tensors with shared storage and a lazily allocated gradient buffer.
// Gradients accumulate additively; a tensor used by several consumers
// receives the sum of their contributions during tape replay.
#pragma once

#include <memory>
#include <vector>

#include "dmg/common.hpp"
#include "dmg/rng.hpp"

namespace dmg {

template <class T>
using buffer = std::vector<T, default_init_allocator<T>>;

template <class T>
struct TensorData {
  Shape4 shape;
  buffer<T> values;
  buffer<T> grad;  // empty until a backward pass touches it
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), T(0));
  }
  void release() {
    values = {};
    grad = {};
  }
};

template <class T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape4 shape, T fill = T(0), bool requires_grad = false)
      : d_(std::make_shared<TensorData<T>>()) {
    require(shape.b >= 1 && shape.c >= 1 && shape.h >= 1 && shape.w >= 1,
            "tensor shape must be positive in every dim, got " + shape.str());
    d_->shape = shape;
    d_->values.assign(static_cast<size_t>(shape.numel()), fill);
    d_->requires_grad = requires_grad;
  }

  // Allocation without the zero-fill, for outputs every element of which the
  // caller writes before anyone reads.
  static Tensor uninit(Shape4 shape) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    require(shape.b >= 1 && shape.c >= 1 && shape.h >= 1 && shape.w >= 1,
            "tensor shape must be positive in every dim, got " + shape.str());
    t.d_->shape = shape;
    t.d_->values.resize(static_cast<size_t>(shape.numel()));
    return t;
  }

  static Tensor randn(Shape4 shape, Rng& rng, double stddev, bool requires_grad = false) {
    Tensor t(shape, T(0), requires_grad);
    for (auto& v : t.d_->values) v = static_cast<T>(rng.normal() * stddev);
    return t;
  }

  static Tensor from_values(Shape4 shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    require(static_cast<int64_t>(values.size()) == shape.numel(),
            "value count does not match shape " + shape.str());
    t.d_->shape = shape;
    t.d_->values.assign(values.begin(), values.end());
    t.d_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const Shape4& shape() const { return d_->shape; }
  int64_t numel() const { return d_->shape.numel(); }

  T* data() { return d_->values.data(); }
  const T* data() const { return d_->values.data(); }

  T* grad() {
    d_->ensure_grad();
    return d_->grad.data();
  }
  bool has_grad() const { return !d_->grad.empty(); }
  void zero_grad() {
    if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool v) { d_->requires_grad = v; }

  T& at(int64_t b, int64_t c, int64_t h, int64_t w) {
    return d_->values[static_cast<size_t>(d_->shape.index(b, c, h, w))];
  }
  const T& at(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return d_->values[static_cast<size_t>(d_->shape.index(b, c, h, w))];
  }

  T item() const {
    require(numel() == 1, "item() on non-scalar tensor of shape " + d_->shape.str());
    return d_->values[0];
  }

  std::shared_ptr<TensorData<T>> handle() const { return d_; }

private:
  std::shared_ptr<TensorData<T>> d_;
};

}  // namespace dmg
