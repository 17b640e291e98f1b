#pragma once

// Checkpoint container:
//
//   bytes 0..3   magic "DCPK"
//   bytes 4..7   format version, uint32 little-endian
//   bytes 8..15  header length in bytes, uint64 little-endian
//   header       UTF-8 text, one "key=value" per line. Tensor entries are
//                "tensor.<name>=<d0>x<d1>x...;<byte offset>;<element count>"
//                with offsets relative to the start of the data section.
//   data         raw float32 little-endian values, tensors back to back
//
// Scalars that must round-trip exactly are written as C99 hex floats.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dcp/engine.hpp"
#include "dcp/network.hpp"
#include "dcp/tensor.hpp"

namespace dcp::io {

inline constexpr char kMagic[4] = {'D', 'C', 'P', 'K'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class CheckpointErrc {
  kIo,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kMalformedHeader,
  kMissingEntry,
  kShapeMismatch,
};

const char* errc_name(CheckpointErrc code);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  CheckpointErrc code() const { return code_; }

 private:
  CheckpointErrc code_;
};

struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

/// Ordered metadata and tensors; insertion order is the on-disk order.
class CheckpointData {
 public:
  void set(const std::string& key, const std::string& value);
  void set_float(const std::string& key, double value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  double get_float(const std::string& key) const;
  long long get_int(const std::string& key) const;

  void add_tensor(std::string name, Shape shape, std::vector<float> values);
  bool has_tensor(const std::string& name) const;
  const TensorRecord& tensor(const std::string& name) const;

  const std::vector<std::pair<std::string, std::string>>& meta() const { return meta_; }
  const std::vector<TensorRecord>& tensors() const { return tensors_; }

 private:
  std::vector<std::pair<std::string, std::string>> meta_;
  std::vector<TensorRecord> tensors_;
};

std::string encode(const CheckpointData& data);
CheckpointData decode(const std::string& bytes);

void write_file(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_file(const std::filesystem::path& path);

/// Model spec (as JSON) plus every parameter and batch-norm buffer.
void pack_model(CheckpointData& out, zoo::Network& model);
zoo::Network unpack_model(const CheckpointData& in);

void pack_utilities(CheckpointData& out, const engine::UtilityState& state);
bool has_utilities(const CheckpointData& in);
/// Throws CheckpointError(kMissingEntry, "no utility state") when absent.
engine::UtilityState unpack_utilities(const CheckpointData& in);

std::string hex_float(double value);

}  // namespace dcp::io
