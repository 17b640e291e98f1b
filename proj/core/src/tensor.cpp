#include "dcp/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dcp {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kBatchNorm: return "batchnorm";
    case OpKind::kRelu: return "relu";
    case OpKind::kMaxPool: return "maxpool";
    case OpKind::kAvgPool: return "avgpool";
    case OpKind::kLinear: return "linear";
    case OpKind::kChannelScale: return "channel_scale";
    case OpKind::kSoftmaxXent: return "softmax_xent";
    case OpKind::kAdd: return "add";
    case OpKind::kFlatten: return "flatten";
    case OpKind::kMul: return "mul";
    case OpKind::kSum: return "sum";
    case OpKind::kScale: return "scale";
  }
  return "?";
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename T>
bool all_finite(std::span<const T> values) {
  for (T v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> values)
    : impl_(std::make_shared<TensorImpl<T>>()) {
  for (std::size_t d : shape)
    if (d == 0) throw DimensionError("tensor: zero-sized axis in shape " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw DimensionError("tensor: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  impl_->shape = std::move(shape);
  impl_->data = std::move(values);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape) {
  return full(std::move(shape), T(0));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item: tensor has " + std::to_string(numel()) + " elements");
  return impl_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("at: rank mismatch");
  std::size_t offset = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw std::out_of_range("at: index out of range on axis " + std::to_string(axis));
    offset = offset * s[axis] + i;
    ++axis;
  }
  return impl_->data[offset];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
  if (!is_leaf()) throw AutogradError("set_requires_grad: only leaf tensors can change requires_grad");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::clone() const {
  return BasicTensor(impl_->shape, impl_->data);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return BasicTensor(std::move(impl));
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshape(Shape shape) const {
  if (shape_numel(shape) != numel())
    throw DimensionError("reshape: " + shape_str(impl_->shape) + " -> " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = impl_->data;
  return BasicTensor(std::move(impl));
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (!loss.defined()) throw AutogradError("backward: undefined loss");
  if (loss.numel() != 1)
    throw AutogradError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  const auto& root = loss.impl();
  if (!root->requires_grad) throw AutogradError("backward: loss does not require grad");
  if (root->grad_fn && root->grad_fn->consumed)
    throw AutogradError("backward: graph already swept; gradients would double-accumulate");

  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn && next < fn->inputs.size()) {
      TensorImpl<T>* child = fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* node = *it;
    auto& fn = node->grad_fn;
    if (!fn) continue;
    if (fn->consumed) throw AutogradError("backward: graph already swept");
    if (!node->grad.empty()) fn->backward(node->grad);
    fn->consumed = true;
    fn->backward = nullptr;  // drop saved context
  }
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template void backward<float>(const BasicTensor<float>&);
template void backward<double>(const BasicTensor<double>&);
template bool all_finite<float>(std::span<const float>);
template bool all_finite<double>(std::span<const double>);

}  // namespace dcp
