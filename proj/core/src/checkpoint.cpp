#include "dcp/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dcp/model.hpp"

namespace dcp::io {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

const char* errc_name(CheckpointErrc code) {
  switch (code) {
    case CheckpointErrc::kIo: return "io error";
    case CheckpointErrc::kBadMagic: return "bad magic";
    case CheckpointErrc::kVersionMismatch: return "version mismatch";
    case CheckpointErrc::kTruncated: return "truncated";
    case CheckpointErrc::kMalformedHeader: return "malformed header";
    case CheckpointErrc::kMissingEntry: return "missing entry";
    case CheckpointErrc::kShapeMismatch: return "shape mismatch";
  }
  return "checkpoint error";
}

std::string hex_float(double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", value);
  return buf;
}

void CheckpointData::set(const std::string& key, const std::string& value) {
  if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos)
    throw std::invalid_argument("checkpoint meta key/value contains a reserved character: " + key);
  for (auto& [k, v] : meta_)
    if (k == key) {
      v = value;
      return;
    }
  meta_.emplace_back(key, value);
}

void CheckpointData::set_float(const std::string& key, double value) { set(key, hex_float(value)); }

bool CheckpointData::has(const std::string& key) const {
  return std::any_of(meta_.begin(), meta_.end(), [&](const auto& kv) { return kv.first == key; });
}

const std::string& CheckpointData::get(const std::string& key) const {
  for (const auto& [k, v] : meta_)
    if (k == key) return v;
  throw CheckpointError(CheckpointErrc::kMissingEntry, "meta key '" + key + "'");
}

double CheckpointData::get_float(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw CheckpointError(CheckpointErrc::kMalformedHeader, "'" + key + "' is not a number");
  return d;
}

long long CheckpointData::get_int(const std::string& key) const {
  const std::string& v = get(key);
  char* end = nullptr;
  const long long n = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw CheckpointError(CheckpointErrc::kMalformedHeader, "'" + key + "' is not an integer");
  return n;
}

void CheckpointData::add_tensor(std::string name, Shape shape, std::vector<float> values) {
  if (shape_numel(shape) != values.size())
    throw CheckpointError(CheckpointErrc::kShapeMismatch, "tensor '" + name + "' shape/value count disagree");
  for (auto& t : tensors_)
    if (t.name == name) {
      t.shape = std::move(shape);
      t.values = std::move(values);
      return;
    }
  tensors_.push_back({std::move(name), std::move(shape), std::move(values)});
}

bool CheckpointData::has_tensor(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(), [&](const auto& t) { return t.name == name; });
}

const TensorRecord& CheckpointData::tensor(const std::string& name) const {
  for (const auto& t : tensors_)
    if (t.name == name) return t;
  throw CheckpointError(CheckpointErrc::kMissingEntry, "tensor '" + name + "'");
}

namespace {

template <typename Int>
void put_le(std::string& out, Int v) {
  for (std::size_t i = 0; i < sizeof(Int); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename Int>
Int get_le(const std::string& in, std::size_t at) {
  Int v = 0;
  for (std::size_t i = 0; i < sizeof(Int); ++i)
    v |= static_cast<Int>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

constexpr std::size_t kPreamble = 4 + 4 + 8;

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

std::size_t parse_size(const std::string& text, const std::string& what) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || end != text.data() + text.size())
    throw CheckpointError(CheckpointErrc::kMalformedHeader, what + ": '" + text + "' is not a count");
  return static_cast<std::size_t>(v);
}

// Element count of a stored shape; zero extents and products beyond `limit`
// are rejected before anything is allocated.
std::size_t checked_numel(const Shape& shape, std::size_t limit, const std::string& name) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    if (d == 0 || n > limit / d)
      throw CheckpointError(CheckpointErrc::kShapeMismatch, "tensor '" + name + "' has an impossible shape");
    n *= d;
  }
  return n;
}

}  // namespace

std::string encode(const CheckpointData& data) {
  std::string header;
  for (const auto& [k, v] : data.meta()) header += k + "=" + v + "\n";
  std::uint64_t offset = 0;
  for (const auto& t : data.tensors()) {
    header += "tensor." + t.name + "=" + shape_token(t.shape) + ";" + std::to_string(offset) + ";" +
              std::to_string(t.values.size()) + "\n";
    offset += t.values.size() * sizeof(float);
  }
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kFormatVersion);
  put_le<std::uint64_t>(out, header.size());
  out += header;
  for (const auto& t : data.tensors()) {
    const auto* bytes = reinterpret_cast<const char*>(t.values.data());
    out.append(bytes, t.values.size() * sizeof(float));
  }
  return out;
}

CheckpointData decode(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError(CheckpointErrc::kBadMagic, "file does not start with DCPK");
  if (bytes.size() < kPreamble) throw CheckpointError(CheckpointErrc::kTruncated, "preamble cut short");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kFormatVersion)
    throw CheckpointError(CheckpointErrc::kVersionMismatch,
                          "format version " + std::to_string(version) + ", expected " + std::to_string(kFormatVersion));
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPreamble)
    throw CheckpointError(CheckpointErrc::kTruncated, "header length exceeds file size");
  const std::string header = bytes.substr(kPreamble, header_len);
  const std::size_t data_start = kPreamble + header_len;
  const std::size_t data_size = bytes.size() - data_start;

  CheckpointData out;
  std::istringstream lines(header);
  std::string line;
  while (std::getline(lines, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0)
      throw CheckpointError(CheckpointErrc::kMalformedHeader, "line without key=value: '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (!key.starts_with("tensor.")) {
      out.set(key, value);
      continue;
    }
    const std::string name = key.substr(7);
    const auto s1 = value.find(';');
    const auto s2 = value.find(';', s1 == std::string::npos ? s1 : s1 + 1);
    if (s1 == std::string::npos || s2 == std::string::npos)
      throw CheckpointError(CheckpointErrc::kMalformedHeader, "tensor entry '" + name + "'");
    Shape shape;
    std::istringstream dims(value.substr(0, s1));
    std::string d;
    while (std::getline(dims, d, 'x')) shape.push_back(parse_size(d, "tensor '" + name + "' dim"));
    const std::size_t offset = parse_size(value.substr(s1 + 1, s2 - s1 - 1), "tensor '" + name + "' offset");
    const std::size_t count = parse_size(value.substr(s2 + 1), "tensor '" + name + "' count");
    if (shape.empty() || checked_numel(shape, data_size / sizeof(float), name) != count)
      throw CheckpointError(CheckpointErrc::kShapeMismatch, "tensor '" + name + "' shape disagrees with count");
    if (offset > data_size || count * sizeof(float) > data_size - offset)
      throw CheckpointError(CheckpointErrc::kTruncated, "tensor '" + name + "' extends past end of file");
    std::vector<float> values(count);
    std::memcpy(values.data(), bytes.data() + data_start + offset, count * sizeof(float));
    out.add_tensor(name, std::move(shape), std::move(values));
  }
  return out;
}

void write_file(const std::filesystem::path& path, const CheckpointData& data) {
  const std::string bytes = encode(data);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError(CheckpointErrc::kIo, "cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError(CheckpointErrc::kIo, "write failed for " + path.string());
}

CheckpointData read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError(CheckpointErrc::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode(ss.str());
}

void pack_model(CheckpointData& out, zoo::Network& model) {
  out.set("model", zoo::to_json(model.spec()));
  for (auto& e : model.state_entries())
    out.add_tensor("param." + e.name, e.shape, std::vector<float>(e.values.begin(), e.values.end()));
}

zoo::Network unpack_model(const CheckpointData& in) {
  zoo::ModelSpec spec;
  try {
    spec = zoo::from_json(in.get("model"));
    zoo::validate(spec);
  } catch (const zoo::SpecError& e) {
    throw CheckpointError(CheckpointErrc::kMalformedHeader, e.what());
  }
  zoo::Network net(spec, 0);
  for (auto& e : net.state_entries()) {
    const auto& rec = in.tensor("param." + e.name);
    if (rec.shape != e.shape)
      throw CheckpointError(CheckpointErrc::kShapeMismatch,
                            "'" + e.name + "' stored as " + shape_str(rec.shape) + ", model expects " + shape_str(e.shape));
    std::copy(rec.values.begin(), rec.values.end(), e.values.begin());
  }
  return net;
}

void pack_utilities(CheckpointData& out, const engine::UtilityState& state) {
  out.set("utility.layers", std::to_string(state.layer_count()));
  out.set_float("utility.threshold", state.threshold);
  out.set_float("utility.decay", state.decay);
  out.set("utility.frozen", state.frozen ? "1" : "0");
  for (std::size_t l = 0; l < state.layer_count(); ++l) {
    out.add_tensor("utility." + std::to_string(l), {state.utilities[l].size()}, state.utilities[l]);
    out.add_tensor("mask." + std::to_string(l), {state.masks[l].size()}, state.masks[l]);
  }
}

bool has_utilities(const CheckpointData& in) { return in.has("utility.layers"); }

engine::UtilityState unpack_utilities(const CheckpointData& in) {
  if (!has_utilities(in)) throw CheckpointError(CheckpointErrc::kMissingEntry, "no utility state");
  engine::UtilityState s;
  const auto layers = static_cast<std::size_t>(in.get_int("utility.layers"));
  s.threshold = static_cast<float>(in.get_float("utility.threshold"));
  s.decay = static_cast<float>(in.get_float("utility.decay"));
  s.frozen = in.get("utility.frozen") == "1";
  for (std::size_t l = 0; l < layers; ++l) {
    const auto& u = in.tensor("utility." + std::to_string(l));
    const auto& m = in.tensor("mask." + std::to_string(l));
    if (u.values.size() != m.values.size())
      throw CheckpointError(CheckpointErrc::kShapeMismatch, "utility/mask length differ for layer " + std::to_string(l));
    s.utilities.push_back(u.values);
    s.masks.push_back(m.values);
  }
  return s;
}

}  // namespace dcp::io
