#include "dcp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "dcp/random.hpp"

namespace dcp::data {

Dataset Dataset::head(std::size_t count) const {
  if (count == 0 || count > size())
    throw DataError("subset of " + std::to_string(count) + " records requested from " + std::to_string(size()));
  const auto d = images.data();
  return Dataset{Tensor({count, kImageChannels, kImageSide, kImageSide},
                        std::vector<float>(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(count * kImageSize))),
                 std::vector<std::int32_t>(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(count)),
                 num_classes};
}

std::vector<std::size_t> Dataset::class_histogram() const {
  std::vector<std::size_t> h(static_cast<std::size_t>(num_classes), 0);
  for (auto l : labels) ++h.at(static_cast<std::size_t>(l));
  return h;
}

Dataset read_cifar_batch(const std::filesystem::path& path, std::size_t expected_records) {
  const std::size_t expected = expected_records * kRecordBytes;
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string() + " (expected " + std::to_string(expected) + " bytes)");
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() != expected)
    throw DataError(path.string() + ": size " + std::to_string(bytes.size()) + " bytes, expected " +
                    std::to_string(expected));
  std::vector<float> pixels(expected_records * kImageSize);
  std::vector<std::int32_t> labels(expected_records);
  for (std::size_t r = 0; r < expected_records; ++r) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data()) + r * kRecordBytes;
    labels[r] = rec[0];
    if (labels[r] > 9) throw DataError(path.string() + ": record " + std::to_string(r) + " has label " +
                                       std::to_string(labels[r]));
    for (std::size_t i = 0; i < kImageSize; ++i) pixels[r * kImageSize + i] = static_cast<float>(rec[1 + i]) / 255.0f;
  }
  return Dataset{Tensor({expected_records, kImageChannels, kImageSide, kImageSide}, std::move(pixels)),
                 std::move(labels), 10};
}

namespace {

Dataset concat(const std::vector<Dataset>& parts) {
  std::vector<float> pixels;
  std::vector<std::int32_t> labels;
  for (const auto& p : parts) {
    pixels.insert(pixels.end(), p.images.data().begin(), p.images.data().end());
    labels.insert(labels.end(), p.labels.begin(), p.labels.end());
  }
  const std::size_t n = labels.size();
  return Dataset{Tensor({n, kImageChannels, kImageSide, kImageSide}, std::move(pixels)), std::move(labels), 10};
}

}  // namespace

CifarSplit load_cifar10(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("data directory " + dir.string() + " does not exist");
  std::vector<Dataset> train;
  for (int i = 1; i <= 5; ++i)
    train.push_back(read_cifar_batch(dir / ("data_batch_" + std::to_string(i) + ".bin"), 10000));
  return CifarSplit{concat(train), read_cifar_batch(dir / "test_batch.bin", 10000)};
}

std::vector<std::uint8_t> encode_record(const Dataset& dataset, std::size_t index) {
  std::vector<std::uint8_t> rec(kRecordBytes);
  rec[0] = static_cast<std::uint8_t>(dataset.labels.at(index));
  const auto img = dataset.image(index);
  for (std::size_t i = 0; i < kImageSize; ++i)
    rec[1 + i] = static_cast<std::uint8_t>(std::lround(std::clamp(img[i], 0.0f, 1.0f) * 255.0f));
  return rec;
}

void write_cifar_batch(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto rec = encode_record(dataset, i);
    f.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  if (!f) throw DataError("write failed for " + path.string());
}

void Normalization::apply(std::span<float> chw) const {
  const std::size_t plane = chw.size() / kImageChannels;
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t i = 0; i < plane; ++i) chw[c * plane + i] = (chw[c * plane + i] - mean[c]) / stddev[c];
}

void Normalization::invert(std::span<float> chw) const {
  const std::size_t plane = chw.size() / kImageChannels;
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t i = 0; i < plane; ++i) chw[c * plane + i] = chw[c * plane + i] * stddev[c] + mean[c];
}

AugmentParams augment_params(std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch, std::uint64_t sample) {
  Rng rng(stream_key(seed, {0xa11, epoch, batch, sample}));
  AugmentParams p;
  p.dx = static_cast<int>(rng.below(9));
  p.dy = static_cast<int>(rng.below(9));
  p.flip = rng.uniform() >= 0.5;
  return p;
}

void augment_image(std::span<const float> src, std::span<float> dst, const AugmentParams& params) {
  constexpr int kPad = 4;
  constexpr int side = static_cast<int>(kImageSide);
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        const int sx_out = params.flip ? side - 1 - x : x;
        const int sy = y + params.dy - kPad;
        const int sx = sx_out + params.dx - kPad;
        const bool inside = sy >= 0 && sy < side && sx >= 0 && sx < side;
        dst[(c * kImageSide + static_cast<std::size_t>(y)) * kImageSide + static_cast<std::size_t>(x)] =
            inside ? src[(c * kImageSide + static_cast<std::size_t>(sy)) * kImageSide + static_cast<std::size_t>(sx)]
                   : 0.0f;
      }
}

void augment(Tensor& batch, std::uint64_t seed, std::uint64_t epoch, std::uint64_t batch_index) {
  const std::size_t n = batch.dim(0);
  auto data = batch.mutable_data();
  std::vector<float> scratch(kImageSize);
  for (std::size_t i = 0; i < n; ++i) {
    auto img = data.subspan(i * kImageSize, kImageSize);
    std::copy(img.begin(), img.end(), scratch.begin());
    augment_image(scratch, img, augment_params(seed, epoch, batch_index, i));
  }
}

Tensor make_batch(const Dataset& dataset, std::span<const std::size_t> indices, const Normalization& norm) {
  std::vector<float> out(indices.size() * kImageSize);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto img = dataset.image(indices[i]);
    std::span<float> dst(out.data() + i * kImageSize, kImageSize);
    std::copy(img.begin(), img.end(), dst.begin());
    norm.apply(dst);
  }
  return Tensor({indices.size(), kImageChannels, kImageSide, kImageSide}, std::move(out));
}

std::vector<std::int32_t> gather_labels(const Dataset& dataset, std::span<const std::size_t> indices) {
  std::vector<std::int32_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = dataset.labels.at(indices[i]);
  return out;
}

namespace {
// Tuned so tinycnn reaches ~97% in 5 epochs on 8000 images but not 100%.
constexpr float kSynthContrast = 0.16f;
constexpr float kSynthNoise = 0.22f;
}  // namespace

Dataset synth_dataset(int num_classes, std::size_t n, std::uint64_t seed) {
  if (num_classes < 1) throw DataError("synth_dataset: num_classes must be >= 1");
  if (n < static_cast<std::size_t>(num_classes)) throw DataError("synth_dataset: n must be >= num_classes");

  struct Template {
    std::array<float, 3> colour;
    float sigma;
  };
  std::vector<Template> templates;
  for (int c = 0; c < num_classes; ++c) {
    // Fixed key: templates are shared by every split and seed.
    Rng rng(stream_key(0x5eed, {static_cast<std::uint64_t>(c)}));
    Template t{};
    for (auto& v : t.colour) v = static_cast<float>(2.0 * rng.uniform() - 1.0);
    const float hue = static_cast<float>(2.0 * std::numbers::pi * c / num_classes);
    t.colour[0] = 0.5f * t.colour[0] + std::cos(hue);
    t.colour[1] = 0.5f * t.colour[1] + std::cos(hue + 2.0944f);
    t.colour[2] = 0.5f * t.colour[2] + std::cos(hue + 4.1888f);
    t.sigma = 3.5f + 4.0f * static_cast<float>(c % 3) / 2.0f;
    templates.push_back(t);
  }

  std::vector<float> pixels(n * kImageSize);
  std::vector<std::int32_t> labels(n);
  const float centre = static_cast<float>(kImageSide - 1) / 2.0f;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(num_classes));
    labels[i] = label;
    const Template& t = templates[static_cast<std::size_t>(label)];
    Rng rng(stream_key(seed, {0xda7a, i}));
    const float cx = centre + static_cast<float>(rng.uniform() * 8.0 - 4.0);
    const float cy = centre + static_cast<float>(rng.uniform() * 8.0 - 4.0);
    for (std::size_t c = 0; c < kImageChannels; ++c)
      for (std::size_t y = 0; y < kImageSide; ++y)
        for (std::size_t x = 0; x < kImageSide; ++x) {
          const float dxp = static_cast<float>(x) - cx, dyp = static_cast<float>(y) - cy;
          const float blob = std::exp(-(dxp * dxp + dyp * dyp) / (2.0f * t.sigma * t.sigma));
          const float v = 0.45f + kSynthContrast * t.colour[c] * blob + kSynthNoise * static_cast<float>(rng.normal());
          pixels[i * kImageSize + (c * kImageSide + y) * kImageSide + x] = std::clamp(v, 0.0f, 1.0f);
        }
  }
  return Dataset{Tensor({n, kImageChannels, kImageSide, kImageSide}, std::move(pixels)), std::move(labels),
                 num_classes};
}

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  Rng rng(stream_key(seed, {0x5fff1e, epoch}));
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

BatchIterator::BatchIterator(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                             bool shuffle)
    : batch_size_(batch_size) {
  if (batch_size == 0) throw DataError("batch size must be >= 1");
  if (shuffle) {
    order_ = epoch_permutation(n, seed, epoch);
  } else {
    order_.resize(n);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }
}

std::span<const std::size_t> BatchIterator::batch(std::size_t i) const {
  const std::size_t begin = i * batch_size_;
  if (begin >= order_.size()) throw std::out_of_range("batch index " + std::to_string(i));
  return std::span<const std::size_t>(order_).subspan(begin, std::min(batch_size_, order_.size() - begin));
}

}  // namespace dcp::data
