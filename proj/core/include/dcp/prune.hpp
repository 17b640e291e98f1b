#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcp/engine.hpp"
#include "dcp/model.hpp"
#include "dcp/network.hpp"

namespace dcp::prune {

using zoo::ConvBlock;
using zoo::ConvInfo;
using zoo::Linear;
using zoo::ModelSpec;
using zoo::Network;
using zoo::Residual;
using zoo::ShapeReport;
using zoo::infer_shapes;

/// Kept output channels per prunable layer, sorted ascending.
struct PruneSpec {
  std::vector<std::vector<std::size_t>> keep;
  std::vector<std::size_t> channels;  // C^l before pruning

  static PruneSpec keep_all(const std::vector<std::size_t>& channels);
  static PruneSpec from_masks(const std::vector<engine::Mask>& masks);

  std::size_t layers() const { return keep.size(); }
  double layer_rate(std::size_t layer) const;
  std::size_t pruned_total() const;
  /// Throws std::out_of_range for empty or unsorted keep lists or indices
  /// outside [0, C^l).
  void validate() const;

  bool operator==(const PruneSpec&) const = default;
};

/// Same selection rule as training-time gating (engine::select_channels).
PruneSpec select_keep_sets(const engine::LayerValues& utilities, double prune_rate, std::size_t min_keep = 1);

ModelSpec compact_spec(const ModelSpec& spec, const PruneSpec& prune);

/// Copies kept filters, slices the next conv's input axis, batch-norm
/// parameters and running statistics, and the classifier's input columns.
Network export_compact(const Network& model, const PruneSpec& prune);

struct LayerFlops {
  std::string name;
  std::uint64_t raw = 0;
  std::uint64_t pruned = 0;
  double rate_in = 0.0;   // pruning rate of the layer feeding this one
  double rate_out = 0.0;  // this layer's own pruning rate
  std::size_t kept_out = 0;
  std::size_t total_out = 0;

  double reduction() const { return raw == 0 ? 0.0 : 1.0 - static_cast<double>(pruned) / static_cast<double>(raw); }
};

/// Multiply-accumulate counts (one FLOP per MAC). Convs count
/// K^2 * C_in * H_out * W_out * C_out; linear layers count in * out.
/// Pooling, activation and batch-norm are not counted.
struct FlopsReport {
  std::vector<LayerFlops> layers;

  std::uint64_t raw_total() const;
  std::uint64_t pruned_total() const;
  double reduction() const;
  /// key=value lines.
  std::string to_text() const;
  /// layer,raw,pruned,reduction,kept,total rows with a header line.
  std::string to_csv() const;
};

/// 1 - (1 - p_prev)(1 - p_cur)
double reduction_fraction(double rate_prev, double rate_cur);

/// Counts a spec as-is (pruned == raw).
FlopsReport count_flops(const ModelSpec& spec);

/// Predicted counts for `spec` pruned by `prune`: each conv's raw count is
/// scaled by (1 - p_in)(1 - p_out), with p = 0 for non-prunable layers.
FlopsReport count_flops(const ModelSpec& spec, const PruneSpec& prune);

}  // namespace dcp::prune
