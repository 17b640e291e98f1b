#include "dcp/engine.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>

#include "dcp/ops.hpp"

namespace dcp::engine {

UtilityState UtilityState::init(std::span<const std::size_t> layer_channels, float initial) {
  UtilityState s;
  for (std::size_t c : layer_channels) {
    s.utilities.emplace_back(c, initial);
    s.masks.emplace_back(c, 1.0f);
  }
  return s;
}

std::size_t UtilityState::total_channels() const {
  std::size_t n = 0;
  for (const auto& u : utilities) n += u.size();
  return n;
}

std::size_t UtilityState::masked_count() const {
  std::size_t n = 0;
  for (const auto& m : masks) n += static_cast<std::size_t>(std::count(m.begin(), m.end(), 0.0f));
  return n;
}

std::size_t prune_budget(std::size_t total_channels, double prune_rate) {
  if (!(prune_rate >= 0.0) || prune_rate >= 1.0) throw ConfigError("prune-rate must be in [0,1)");
  // The epsilon keeps products like 0.29 * 100 from flooring to 28.
  return static_cast<std::size_t>(std::floor(prune_rate * static_cast<double>(total_channels) + 1e-9));
}

namespace {

struct FlatIndex {
  std::size_t layer;
  std::size_t channel;
};

std::vector<FlatIndex> flat_order(const LayerValues& u) {
  std::vector<FlatIndex> idx;
  for (std::size_t l = 0; l < u.size(); ++l)
    for (std::size_t k = 0; k < u[l].size(); ++k) idx.push_back({l, k});
  return idx;
}

// Ascending utility; equal utilities keep (layer, channel) order.
std::vector<FlatIndex> sorted_order(const LayerValues& u) {
  auto idx = flat_order(u);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](const FlatIndex& a, const FlatIndex& b) { return u[a.layer][a.channel] < u[b.layer][b.channel]; });
  return idx;
}

}  // namespace

float global_threshold(const LayerValues& utilities, double prune_rate) {
  std::size_t total = 0;
  for (const auto& u : utilities) total += u.size();
  if (total == 0) throw ConfigError("global_threshold: no prunable channels");
  const std::size_t budget = prune_budget(total, prune_rate);
  if (budget == 0) return kNoThreshold;
  const auto order = sorted_order(utilities);
  const auto& at = order[budget - 1];
  return utilities[at.layer][at.channel];
}

std::vector<Mask> build_masks(const LayerValues& utilities, float threshold, std::optional<std::size_t> budget,
                              std::size_t min_keep) {
  std::vector<Mask> masks;
  masks.reserve(utilities.size());
  for (const auto& u : utilities) masks.emplace_back(u.size(), 1.0f);

  std::size_t masked = 0;
  for (std::size_t l = 0; l < utilities.size(); ++l)
    for (std::size_t k = 0; k < utilities[l].size(); ++k)
      if (utilities[l][k] < threshold || (!budget && utilities[l][k] == threshold)) {
        masks[l][k] = 0.0f;
        ++masked;
      }
  if (budget) {
    for (std::size_t l = 0; l < utilities.size() && masked < *budget; ++l)
      for (std::size_t k = 0; k < utilities[l].size() && masked < *budget; ++k)
        if (utilities[l][k] == threshold) {
          masks[l][k] = 0.0f;
          ++masked;
        }
  }

  for (std::size_t l = 0; l < utilities.size(); ++l) {
    const auto& u = utilities[l];
    auto& m = masks[l];
    const std::size_t want = std::min(min_keep, u.size());
    auto active = static_cast<std::size_t>(std::count(m.begin(), m.end(), 1.0f));
    while (active < want) {
      std::size_t best = u.size();
      for (std::size_t k = 0; k < u.size(); ++k)
        if (m[k] == 0.0f && (best == u.size() || u[k] > u[best])) best = k;
      m[best] = 1.0f;
      ++active;
    }
  }
  return masks;
}

Selection select_channels(const LayerValues& utilities, double prune_rate, std::size_t min_keep) {
  std::size_t total = 0;
  for (const auto& u : utilities) total += u.size();
  Selection s;
  s.threshold = global_threshold(utilities, prune_rate);
  s.masks = build_masks(utilities, s.threshold, prune_budget(total, prune_rate), min_keep);
  return s;
}

template <typename T>
std::vector<T> taylor_criterion(std::span<const T> activation, std::span<const T> gradient, const Shape& shape) {
  if (shape.size() < 2) throw DimensionError("taylor_criterion: need [B,C,...], got " + shape_str(shape));
  if (activation.size() != shape_numel(shape) || gradient.size() != activation.size())
    throw DimensionError("taylor_criterion: activation/gradient size mismatch for shape " + shape_str(shape));
  const std::size_t batch = shape[0], channels = shape[1], plane = shape_numel(shape) / (batch * channels);
  const double entries = static_cast<double>(batch * plane);
  std::vector<T> theta(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t base = (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i)
        acc += static_cast<double>(gradient[base + i]) * static_cast<double>(activation[base + i]);
    }
    theta[c] = static_cast<T>(std::abs(acc / entries));
  }
  return theta;
}

template <typename T>
std::vector<T> taylor_criterion(const BasicTensor<T>& activation, const BasicTensor<T>& gradient) {
  if (activation.shape() != gradient.shape())
    throw DimensionError("taylor_criterion: activation " + shape_str(activation.shape()) + " vs gradient " +
                         shape_str(gradient.shape()));
  return taylor_criterion<T>(activation.data(), gradient.data(), activation.shape());
}

std::vector<float> taylor_criterion(const Tensor& gated) {
  if (!gated.has_grad()) return std::vector<float>(gated.dim(1), 0.0f);
  return taylor_criterion<float>(gated.data(), gated.grad(), gated.shape());
}

template <typename T>
std::vector<T> max_normalize(std::span<const T> criterion) {
  std::vector<T> out(criterion.begin(), criterion.end());
  if (out.empty()) return out;
  const T mx = *std::max_element(out.begin(), out.end());
  if (!(mx > T(0))) {
    std::fill(out.begin(), out.end(), T(0));
    return out;
  }
  for (auto& v : out) v /= mx;
  return out;
}

void update_utilities(UtilityState& state, const LayerValues& normalized) {
  if (!(state.decay > 0.0f && state.decay < 1.0f))
    throw ConfigError("decay factor must be in (0,1), got " + std::to_string(state.decay));
  if (state.frozen) throw std::logic_error("update_utilities: utility state is frozen");
  if (normalized.size() != state.utilities.size())
    throw DimensionError("update_utilities: " + std::to_string(normalized.size()) + " criteria for " +
                         std::to_string(state.utilities.size()) + " layers");
  for (std::size_t l = 0; l < normalized.size(); ++l) {
    auto& u = state.utilities[l];
    if (normalized[l].size() != u.size())
      throw DimensionError("update_utilities: layer " + std::to_string(l) + " length mismatch");
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = state.decay * u[k] + normalized[l][k];
  }
}

DecaySchedule DecaySchedule::parse(std::string_view text) {
  if (text == "mutative") return {Kind::kMutative, 0.6f};
  if (text == "divide10") return {Kind::kDivide10, 0.6f};
  if (text.starts_with("fixed:")) {
    const auto num = text.substr(6);
    float v = 0;
    const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), v);
    if (ec != std::errc() || ptr != num.data() + num.size())
      throw ConfigError("lambda-schedule: cannot parse fixed value '" + std::string(num) + "'");
    if (!(v > 0.0f && v < 1.0f)) throw ConfigError("lambda-schedule: fixed value must be in (0,1)");
    return {Kind::kFixed, v};
  }
  throw ConfigError("lambda-schedule must be mutative, fixed:<v> or divide10, got '" + std::string(text) + "'");
}

std::string DecaySchedule::str() const {
  switch (kind) {
    case Kind::kMutative: return "mutative";
    case Kind::kDivide10: return "divide10";
    case Kind::kFixed: {
      std::ostringstream os;
      os << "fixed:" << value;
      return os.str();
    }
  }
  return "mutative";
}

Milestones lr_milestones(int epochs) {
  return {(epochs + 2) / 3, (2 * epochs + 2) / 3};
}

ScheduleStep step_schedule(int epoch, int epochs, const DecaySchedule& schedule, std::optional<int> freeze_epoch) {
  const Milestones ms = lr_milestones(epochs);
  const int phase = epoch < ms.first ? 0 : (epoch < ms.second ? 1 : 2);
  ScheduleStep step;
  switch (schedule.kind) {
    case DecaySchedule::Kind::kMutative: step.decay = std::array{0.6f, 0.9f, 0.99f}[phase]; break;
    case DecaySchedule::Kind::kDivide10: step.decay = std::array{0.6f, 0.06f, 0.006f}[phase]; break;
    case DecaySchedule::Kind::kFixed: step.decay = schedule.value; break;
  }
  step.frozen = epoch >= freeze_epoch.value_or(ms.second);
  return step;
}

void GateTrace::record(std::size_t layer, Tensor gated) { gated_.at(layer) = std::move(gated); }

Tensor forward_gate(const Tensor& activation, const Mask& mask, std::size_t layer, GateTrace* trace) {
  Tensor gated = channel_scale<float>(activation, mask);
  if (trace) trace->record(layer, gated);
  return gated;
}

LayerValues normalized_criteria(const GateTrace& trace) {
  LayerValues out;
  out.reserve(trace.size());
  for (std::size_t l = 0; l < trace.size(); ++l) {
    const auto theta = taylor_criterion(trace.at(l));
    out.push_back(max_normalize<float>(theta));
  }
  return out;
}

template std::vector<float> taylor_criterion<float>(std::span<const float>, std::span<const float>, const Shape&);
template std::vector<double> taylor_criterion<double>(std::span<const double>, std::span<const double>, const Shape&);
template std::vector<float> taylor_criterion<float>(const BasicTensor<float>&, const BasicTensor<float>&);
template std::vector<double> taylor_criterion<double>(const BasicTensor<double>&, const BasicTensor<double>&);
template std::vector<float> max_normalize<float>(std::span<const float>);
template std::vector<double> max_normalize<double>(std::span<const double>);

}  // namespace dcp::engine
