#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcp/engine.hpp"
#include "dcp/model.hpp"
#include "dcp/ops.hpp"
#include "dcp/tensor.hpp"

namespace dcp::zoo {

struct ConvParams {
  Tensor weight;  // [out, in, k, k]
  Tensor gamma;   // [out]
  Tensor beta;    // [out]
  BatchNormStats<float> stats;
};

struct LinearParams {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

/// A trainable tensor plus what the optimizer needs to know about it. For
/// tensors whose leading axis is a prunable layer's output channel
/// (conv weight, batch-norm gamma/beta), `prune_slot` names that layer.
struct Parameter {
  std::string name;
  Tensor tensor;
  std::optional<std::size_t> prune_slot;
};

/// Named float buffer for serialization; views into the network's storage.
struct StateEntry {
  std::string name;
  Shape shape;
  std::span<float> values;
};

/// Weights for a ModelSpec and the forward pass over them.
class Network {
 public:
  /// He-normal conv init, uniform linear init, gamma = 1, beta = 0.
  Network(ModelSpec spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  const ShapeReport& shapes() const { return shapes_; }
  std::size_t prunable_layers() const { return shapes_.prunable_channels.size(); }
  const std::vector<std::size_t>& prunable_channels() const { return shapes_.prunable_channels; }

  /// x [B, C, H, W] -> logits [B, num_classes]. With `masks`, every prunable
  /// conv block's post-ReLU output is gated; `trace` then receives the gated
  /// tensors.
  Tensor forward(const Tensor& x, Mode mode, const std::vector<engine::Mask>* masks = nullptr,
                 engine::GateTrace* trace = nullptr);

  std::vector<ConvParams>& convs() { return convs_; }
  const std::vector<ConvParams>& convs() const { return convs_; }
  std::vector<LinearParams>& linears() { return linears_; }
  const std::vector<LinearParams>& linears() const { return linears_; }

  std::vector<Parameter> parameters();
  std::vector<StateEntry> state_entries();
  void zero_grad();

  std::size_t parameter_count() const;
  std::size_t conv_parameter_count() const;

 private:
  Tensor conv_block(std::size_t conv, const Tensor& x, Mode mode);

  ModelSpec spec_;
  ShapeReport shapes_;
  std::vector<ConvParams> convs_;
  std::vector<LinearParams> linears_;
};

}  // namespace dcp::zoo
