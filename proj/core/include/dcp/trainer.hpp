#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcp/checkpoint.hpp"
#include "dcp/data.hpp"
#include "dcp/engine.hpp"
#include "dcp/network.hpp"

namespace dcp::train {

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double prune_rate = 0.0;
  engine::DecaySchedule schedule;
  float lr0 = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  int epochs = 20;
  std::size_t batch_size = 128;
  std::uint64_t seed = 1;
  std::size_t min_keep = 1;
  std::optional<int> freeze_epoch;  // default: second lr milestone
  std::string init = "scratch";     // or "from-checkpoint"; informational
  bool gating = true;               // false: plain training, no gate ops at all
  bool exempt_masked = false;       // masked filter rows skip the optimizer step
  bool augment = true;

  /// Throws engine::ConfigError.
  void validate() const;
  int resolved_freeze_epoch() const;
  float lr_at(int epoch) const;

  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
};

struct MetricsRow {
  int epoch = 0;
  std::string split;  // "train" | "eval"
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
  double lambda = 0.0;
  float threshold = engine::kNoThreshold;
  std::size_t churn = 0;

  std::string csv() const;
};

inline constexpr const char* kMetricsHeader = "epoch,split,loss,acc,lr,lambda,threshold,churn";
std::string metrics_csv(std::span<const MetricsRow> rows);

/// v <- momentum * v + (g + wd * w); w <- w - lr * v.
void sgd_step(std::span<float> w, std::span<const float> g, std::span<float> v, float lr, float momentum,
              float weight_decay);

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Eval-mode pass over `dataset`; with `masks` the big model is gated.
EvalResult evaluate(zoo::Network& net, const data::Dataset& dataset, const std::vector<engine::Mask>* masks = nullptr,
                    std::size_t batch_size = 256);

/// Keeps freed activation buffers in the heap instead of returning them to the
/// OS after every step (glibc only; no-op elsewhere). Process-wide.
void retain_freed_memory();

std::size_t mask_churn(const std::vector<engine::Mask>& a, const std::vector<engine::Mask>& b);

class Trainer {
 public:
  /// `train` and `test` must outlive the trainer; `test` may be null (eval
  /// rows are then skipped).
  Trainer(zoo::Network net, TrainConfig config, const data::Dataset& train, const data::Dataset* test);

  /// Rebuilds a trainer mid-run from snapshot(); the datasets are re-supplied.
  static Trainer resume(const io::CheckpointData& snapshot, const data::Dataset& train, const data::Dataset* test);

  void run();
  /// One epoch; returns the rows appended to metrics().
  std::vector<MetricsRow> run_epoch();
  bool done() const { return epoch_ >= config_.epochs; }
  int epoch() const { return epoch_; }

  const TrainConfig& config() const { return config_; }
  zoo::Network& network() { return net_; }
  const engine::UtilityState& utilities() const { return state_; }
  const std::vector<engine::Mask>& masks() const { return state_.masks; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }
  const std::vector<float>& step_losses() const { return step_losses_; }

  /// Model, utilities, optimizer velocity, counters and metrics so far.
  io::CheckpointData snapshot();

  /// Called after every epoch.
  std::function<void(Trainer&)> on_epoch_end;

 private:
  void train_step(const Tensor& x, std::span<const std::int32_t> labels, double& loss_sum, std::size_t& correct,
                  std::uint64_t batch_index);
  void optimizer_step(float lr);
  [[noreturn]] void diverged(const std::string& where, const engine::GateTrace* trace);

  zoo::Network net_;
  TrainConfig config_;
  const data::Dataset* train_;
  const data::Dataset* test_;
  engine::UtilityState state_;
  std::vector<engine::Mask> prev_epoch_masks_;
  std::vector<std::vector<float>> velocity_;
  std::vector<MetricsRow> metrics_;
  std::vector<float> step_losses_;
  int epoch_ = 0;
};

}  // namespace dcp::train
