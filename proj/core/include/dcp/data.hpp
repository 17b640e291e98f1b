#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcp/tensor.hpp"

namespace dcp::data {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSize = kImageChannels * kImageSide * kImageSide;
inline constexpr std::size_t kRecordBytes = 1 + kImageSize;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images [N,3,32,32] with values in [0,1] (not yet normalized).
struct Dataset {
  Tensor images;
  std::vector<std::int32_t> labels;
  int num_classes = 10;

  std::size_t size() const { return labels.size(); }
  std::span<const float> image(std::size_t i) const { return images.data().subspan(i * kImageSize, kImageSize); }
  Dataset head(std::size_t count) const;
  std::vector<std::size_t> class_histogram() const;
};

struct CifarSplit {
  Dataset train;
  Dataset test;
};

/// Reads data_batch_1..5.bin and test_batch.bin from `dir`.
CifarSplit load_cifar10(const std::filesystem::path& dir);
/// One binary batch file of `expected_records` records.
Dataset read_cifar_batch(const std::filesystem::path& path, std::size_t expected_records);
/// Writes `dataset` in the same record layout (pixels rounded to bytes).
void write_cifar_batch(const std::filesystem::path& path, const Dataset& dataset);
std::vector<std::uint8_t> encode_record(const Dataset& dataset, std::size_t index);

/// Per-channel mean/std applied as (x - mean) / std.
struct Normalization {
  std::array<float, 3> mean{0.4914f, 0.4822f, 0.4465f};
  std::array<float, 3> stddev{0.2470f, 0.2435f, 0.2616f};

  void apply(std::span<float> chw) const;
  void invert(std::span<float> chw) const;
};

/// Crop offset into the 40x40 zero-padded image (0..8 on each axis; 4 is the
/// identity) and horizontal flip.
struct AugmentParams {
  int dx = 4;
  int dy = 4;
  bool flip = false;
};

/// Parameters for one sample, a pure function of the counters.
AugmentParams augment_params(std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch, std::uint64_t sample);

/// Pad by 4 with zeros, crop 32x32 at (dx, dy), optionally mirror. Operates on
/// normalized images, so padding equals the per-channel mean colour.
void augment_image(std::span<const float> src, std::span<float> dst, const AugmentParams& params);

/// Augments every image of a [B,3,32,32] batch in place.
void augment(Tensor& batch, std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch_index);

/// Gathers `indices` into a normalized batch tensor.
Tensor make_batch(const Dataset& dataset, std::span<const std::size_t> indices, const Normalization& norm);
std::vector<std::int32_t> gather_labels(const Dataset& dataset, std::span<const std::size_t> indices);

/// Class-conditional blob images: each class has a fixed colour and blob
/// radius (independent of `seed`); `seed` drives the per-sample jitter and
/// noise. Labels cycle 0..K-1, so classes are balanced when K divides n.
Dataset synth_dataset(int num_classes, std::size_t n, std::uint64_t seed);

/// Fisher-Yates permutation of [0, n) keyed by (seed, epoch).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

/// Splits an epoch's permutation into consecutive batches; the last one may
/// be short.
class BatchIterator {
 public:
  BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch, bool shuffle = true);

  std::size_t batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  std::span<const std::size_t> batch(std::size_t i) const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
};

}  // namespace dcp::data
