#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dcp/tensor.hpp"

namespace dcp {

enum class Mode { kTrain, kEval };

/// Running statistics owned by a batch-norm layer; updated in train mode.
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  static BatchNormStats init(std::size_t channels) {
    return {std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1))};
  }
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

// Cross-correlation, x [B,Cin,H,W], w [Cout,Cin,K,K] -> [B,Cout,H',W'].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& w, int stride, int pad);

// Train mode normalizes with batch statistics (biased variance) and folds the
// unbiased variance into the running estimate; eval mode uses the running
// estimate.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                         const BasicTensor<T>& beta, BatchNormStats<T>& stats, Mode mode);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& x);

// 2x2 window, stride 2. Ties resolve to the first element in row-major order.
template <typename T>
BasicTensor<T> maxpool2x2(const BasicTensor<T>& x);

// [B,C,H,W] -> [B,C]
template <typename T>
BasicTensor<T> global_avgpool(const BasicTensor<T>& x);

// [B,...] -> [B, prod(...)]
template <typename T>
BasicTensor<T> flatten(const BasicTensor<T>& x);

// x [B,in], w [out,in], b [out] -> [B,out]
template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& b);

/// output[b,c,...] = x[b,c,...] * mask[c]. The mask is a constant; masked
/// channels pass exactly zero gradient upstream.
template <typename T>
BasicTensor<T> channel_scale(const BasicTensor<T>& x, std::span<const T> mask);

/// Mean softmax cross-entropy over the batch. logits [B,C], labels in [0,C).
template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::int32_t> labels);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor);

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

}  // namespace dcp
