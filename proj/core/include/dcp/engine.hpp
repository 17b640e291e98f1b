#pragma once

// Channel utilities, global-threshold forward selection, the first-order
// Taylor channel criterion, and the decayed utility update.

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dcp/tensor.hpp"

namespace dcp::engine {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Per-channel 0/1 gate for one prunable layer. Stored as float so it can be
/// fed straight into channel_scale.
using Mask = std::vector<float>;
using LayerValues = std::vector<std::vector<float>>;

inline constexpr float kNoThreshold = -std::numeric_limits<float>::infinity();

struct UtilityState {
  LayerValues utilities;
  std::vector<Mask> masks;
  float threshold = kNoThreshold;
  float decay = 0.6f;
  bool frozen = false;

  /// Utilities start at `initial` (1.0 by default), masks all-ones.
  static UtilityState init(std::span<const std::size_t> layer_channels, float initial = 1.0f);

  std::size_t layer_count() const { return utilities.size(); }
  std::size_t total_channels() const;
  std::size_t masked_count() const;
};

/// floor(p * N) with p validated to [0, 1).
std::size_t prune_budget(std::size_t total_channels, double prune_rate);

/// The floor(pN)-th smallest utility over all layers, or kNoThreshold when the
/// budget is zero.
float global_threshold(const LayerValues& utilities, double prune_rate);

/// m = 1 iff u > t. With a budget, channels tied at t are masked in
/// (layer, channel) order only until `budget` channels are masked in total.
/// Afterwards every layer with fewer than min_keep active channels re-enables
/// its highest-utility masked channels (lowest index first on ties).
std::vector<Mask> build_masks(const LayerValues& utilities, float threshold,
                              std::optional<std::size_t> budget = std::nullopt, std::size_t min_keep = 1);

struct Selection {
  float threshold = kNoThreshold;
  std::vector<Mask> masks;
};

/// global_threshold + build_masks with the floor(pN) budget. This is the one
/// selection path shared by training-time gating and compact export.
Selection select_channels(const LayerValues& utilities, double prune_rate, std::size_t min_keep = 1);

/// |mean over batch and spatial entries of g * z| per channel. Both tensors are
/// [B,C,...] and read at the gating point.
template <typename T>
std::vector<T> taylor_criterion(std::span<const T> activation, std::span<const T> gradient, const Shape& shape);

template <typename T>
std::vector<T> taylor_criterion(const BasicTensor<T>& activation, const BasicTensor<T>& gradient);

/// Reads the activation and the gradient accumulated on it by backward().
/// A gate that received no gradient yields all zeros.
std::vector<float> taylor_criterion(const Tensor& gated);

/// Divide by the layer maximum; all-zero stays all-zero.
template <typename T>
std::vector<T> max_normalize(std::span<const T> criterion);

/// u <- decay * u + normalized, for every layer. Throws ConfigError when decay
/// is outside (0,1) and std::logic_error when the state is frozen.
void update_utilities(UtilityState& state, const LayerValues& normalized);

struct DecaySchedule {
  enum class Kind { kMutative, kFixed, kDivide10 };
  Kind kind = Kind::kMutative;
  float value = 0.6f;  // only used by kFixed

  /// "mutative" | "fixed:<v>" | "divide10"
  static DecaySchedule parse(std::string_view text);
  std::string str() const;
};

/// Learning-rate milestones at ceil(E/3) and ceil(2E/3).
struct Milestones {
  int first = 0;
  int second = 0;
};
Milestones lr_milestones(int epochs);

struct ScheduleStep {
  float decay = 0.6f;
  bool frozen = false;
};

/// Piecewise-constant decay factor changing at the lr milestones
/// (mutative: 0.6, 0.9, 0.99; divide10: 0.6, 0.06, 0.006; fixed: v), and the
/// frozen flag, set from `freeze_epoch` onward (default: second milestone).
ScheduleStep step_schedule(int epoch, int epochs, const DecaySchedule& schedule,
                           std::optional<int> freeze_epoch = std::nullopt);

/// Post-mask tensors captured during a forward pass, one per prunable layer,
/// so the criterion can read (z, dJ/dz) after backward.
class GateTrace {
 public:
  explicit GateTrace(std::size_t layers = 0) : gated_(layers) {}
  std::size_t size() const { return gated_.size(); }
  const Tensor& at(std::size_t layer) const { return gated_.at(layer); }
  void record(std::size_t layer, Tensor gated);

 private:
  std::vector<Tensor> gated_;
};

/// Multiplies `activation` by `mask` channel-wise and, when a trace is given,
/// records the result as the layer's gating point.
Tensor forward_gate(const Tensor& activation, const Mask& mask, std::size_t layer, GateTrace* trace);

/// Criterion for every traced layer, max-normalized per layer.
LayerValues normalized_criteria(const GateTrace& trace);

}  // namespace dcp::engine
