#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcp {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when operand shapes are inconsistent. The message names the
/// offending op and axes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite value produced by an op (debug builds only).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind {
  kLeaf,
  kConv2d,
  kBatchNorm,
  kRelu,
  kMaxPool,
  kAvgPool,
  kLinear,
  kChannelScale,
  kSoftmaxXent,
  kAdd,
  kFlatten,
  kMul,
  kSum,
  kScale,
};

const char* op_name(OpKind kind);

template <typename T>
struct TensorImpl;

/// One recorded op. `backward` reads the output gradient and accumulates into
/// the inputs' gradient buffers; it owns whatever forward context it needs.
template <typename T>
struct OpNode {
  OpKind kind = OpKind::kLeaf;
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T> grad_out)> backward;
  bool consumed = false;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::shared_ptr<OpNode<T>> grad_fn;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor with shared ownership of its storage. Copies alias;
/// use clone() for a deep copy.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(Shape shape, std::vector<T> values);

  static BasicTensor zeros(Shape shape);
  static BasicTensor full(Shape shape, T value);
  static BasicTensor scalar(T value) { return full({1}, value); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const T> data() const { return impl_->data; }
  // Intended for leaves (parameters, inputs); op outputs are treated as
  // immutable once produced.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  BasicTensor& set_requires_grad(bool on = true);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  std::span<T> mutable_grad() { return impl_->ensure_grad(); }
  void zero_grad() { impl_->grad.clear(); }

  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  OpKind op() const { return impl_->grad_fn ? impl_->grad_fn->kind : OpKind::kLeaf; }

  BasicTensor clone() const;
  /// Same storage, no history.
  BasicTensor detach() const;
  BasicTensor reshape(Shape shape) const;

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  explicit BasicTensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively on
/// every tensor in the graph (including intermediates). A graph can be swept
/// once; a second call raises AutogradError.
template <typename T>
void backward(const BasicTensor<T>& loss);

/// Thread-local switch; while disabled, ops record no graph.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

template <typename T>
bool all_finite(std::span<const T> values);

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

}  // namespace dcp
