#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace dcp::zoo {

/// conv -> batch-norm [-> ReLU]. Convs carry no bias; batch-norm supplies it.
struct ConvBlock {
  int in = 0;
  int out = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  bool prunable = false;
  bool relu = true;

  bool operator==(const ConvBlock&) const = default;
};

struct MaxPool {
  bool operator==(const MaxPool&) const = default;
};
struct GlobalAvgPool {
  bool operator==(const GlobalAvgPool&) const = default;
};
struct Flatten {
  bool operator==(const Flatten&) const = default;
};

struct Linear {
  int in = 0;
  int out = 0;

  bool operator==(const Linear&) const = default;
};

/// Two-conv basic block: first (conv-bn-relu), second (conv-bn), plus the
/// shortcut (identity or 1x1 projection), summed and passed through ReLU.
/// Only `first` may be prunable: `second` and `projection` feed the sum.
struct Residual {
  ConvBlock first;
  ConvBlock second;
  std::optional<ConvBlock> projection;

  bool operator==(const Residual&) const = default;
};

using Layer = std::variant<ConvBlock, MaxPool, GlobalAvgPool, Flatten, Linear, Residual>;

struct ModelSpec {
  std::string name;
  int in_channels = 3;
  int image_size = 32;
  int num_classes = 10;
  std::vector<Layer> layers;

  bool operator==(const ModelSpec&) const = default;
};

class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

ModelSpec build_vgg16(int num_classes = 10, double width_multiplier = 1.0);
ModelSpec build_resnet32(int num_classes = 10);
ModelSpec build_tinycnn(int num_classes = 10);
/// "vgg16" | "resnet32" | "tinycnn"
ModelSpec build_by_name(const std::string& arch, int num_classes = 10, double width_multiplier = 1.0);

/// A conv in traversal order (blocks, then residual first/second/projection)
/// with its resolved geometry.
struct ConvInfo {
  std::size_t index = 0;              // position among all convs
  std::optional<std::size_t> prune_slot;  // position among prunable convs
  std::optional<std::size_t> input_slot;  // prunable conv that feeds this conv's input, if any
  ConvBlock block;
  int in_h = 0, in_w = 0;
  int out_h = 0, out_w = 0;
};

struct LinearInfo {
  Linear layer;
  int spatial = 1;                        // H*W per channel in the flattened input
  std::optional<std::size_t> input_slot;  // prunable conv whose channels form the input
};

/// Geometry of every conv and the classifier, resolved for the spec's input
/// size. Throws SpecError on any inconsistency (channel mismatch, bad spatial
/// size, prunable conv feeding a shortcut sum).
struct ShapeReport {
  std::vector<ConvInfo> convs;
  std::vector<LinearInfo> linears;
  std::vector<std::size_t> prunable_channels;  // C^l per prunable slot
  int feature_channels = 0;                    // channels entering the classifier
  int feature_spatial = 0;                     // H*W entering the classifier
};

ShapeReport infer_shapes(const ModelSpec& spec);
void validate(const ModelSpec& spec);

std::string to_json(const ModelSpec& spec);
ModelSpec from_json(const std::string& text);

}  // namespace dcp::zoo
