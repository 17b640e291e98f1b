#include "dcp/prune.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dcp::prune {

PruneSpec PruneSpec::keep_all(const std::vector<std::size_t>& channels) {
  PruneSpec p;
  p.channels = channels;
  for (std::size_t c : channels) {
    std::vector<std::size_t> all(c);
    std::iota(all.begin(), all.end(), std::size_t{0});
    p.keep.push_back(std::move(all));
  }
  return p;
}

PruneSpec PruneSpec::from_masks(const std::vector<engine::Mask>& masks) {
  PruneSpec p;
  for (const auto& m : masks) {
    p.channels.push_back(m.size());
    std::vector<std::size_t> keep;
    for (std::size_t k = 0; k < m.size(); ++k)
      if (m[k] != 0.0f) keep.push_back(k);
    p.keep.push_back(std::move(keep));
  }
  return p;
}

double PruneSpec::layer_rate(std::size_t layer) const {
  return 1.0 - static_cast<double>(keep.at(layer).size()) / static_cast<double>(channels.at(layer));
}

std::size_t PruneSpec::pruned_total() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < keep.size(); ++l) n += channels[l] - keep[l].size();
  return n;
}

void PruneSpec::validate() const {
  if (keep.size() != channels.size()) throw std::out_of_range("prune spec: keep/channel layer count mismatch");
  for (std::size_t l = 0; l < keep.size(); ++l) {
    const auto& k = keep[l];
    if (k.empty()) throw std::out_of_range("prune spec: layer " + std::to_string(l) + " keeps no channels");
    for (std::size_t i = 0; i < k.size(); ++i) {
      if (k[i] >= channels[l])
        throw std::out_of_range("prune spec: layer " + std::to_string(l) + " keeps channel " + std::to_string(k[i]) +
                                " of " + std::to_string(channels[l]));
      if (i > 0 && k[i] <= k[i - 1])
        throw std::out_of_range("prune spec: layer " + std::to_string(l) + " keep list not strictly increasing");
    }
  }
}

PruneSpec select_keep_sets(const engine::LayerValues& utilities, double prune_rate, std::size_t min_keep) {
  return PruneSpec::from_masks(engine::select_channels(utilities, prune_rate, min_keep).masks);
}

namespace {

void check_against(const ShapeReport& shapes, const PruneSpec& prune) {
  prune.validate();
  if (prune.channels != shapes.prunable_channels)
    throw std::out_of_range("prune spec does not match the model's prunable layers");
}

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

ModelSpec compact_spec(const ModelSpec& spec, const PruneSpec& prune) {
  const ShapeReport shapes = infer_shapes(spec);
  check_against(shapes, prune);
  auto resize = [&](ConvBlock b, const ConvInfo& info) {
    if (info.prune_slot) b.out = static_cast<int>(prune.keep[*info.prune_slot].size());
    if (info.input_slot) b.in = static_cast<int>(prune.keep[*info.input_slot].size());
    return b;
  };
  ModelSpec out = spec;
  std::size_t conv = 0;
  std::size_t linear_idx = 0;
  for (auto& layer : out.layers) {
    std::visit(
        [&](auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvBlock>) {
            l = resize(l, shapes.convs[conv++]);
          } else if constexpr (std::is_same_v<L, Residual>) {
            l.first = resize(l.first, shapes.convs[conv++]);
            l.second = resize(l.second, shapes.convs[conv++]);
            if (l.projection) *l.projection = resize(*l.projection, shapes.convs[conv++]);
          } else if constexpr (std::is_same_v<L, Linear>) {
            const auto& info = shapes.linears[linear_idx++];
            if (info.input_slot) l.in = static_cast<int>(prune.keep[*info.input_slot].size()) * info.spatial;
          }
        },
        layer);
  }
  return out;
}

Network export_compact(const Network& model, const PruneSpec& prune) {
  const ShapeReport& shapes = model.shapes();
  Network compact(compact_spec(model.spec(), prune), 0);

  for (std::size_t i = 0; i < shapes.convs.size(); ++i) {
    const auto& info = shapes.convs[i];
    const auto& src = model.convs()[i];
    auto& dst = compact.convs()[i];
    const auto outs = info.prune_slot ? prune.keep[*info.prune_slot] : all_indices(info.block.out);
    const auto ins = info.input_slot ? prune.keep[*info.input_slot] : all_indices(info.block.in);
    const std::size_t kk = static_cast<std::size_t>(info.block.kernel * info.block.kernel);
    const std::size_t src_in = static_cast<std::size_t>(info.block.in);

    auto w = dst.weight.mutable_data();
    const auto sw = src.weight.data();
    for (std::size_t o = 0; o < outs.size(); ++o)
      for (std::size_t c = 0; c < ins.size(); ++c)
        std::copy_n(sw.data() + (outs[o] * src_in + ins[c]) * kk, kk, w.data() + (o * ins.size() + c) * kk);
    for (std::size_t o = 0; o < outs.size(); ++o) {
      dst.gamma.mutable_data()[o] = src.gamma.data()[outs[o]];
      dst.beta.mutable_data()[o] = src.beta.data()[outs[o]];
      dst.stats.running_mean[o] = src.stats.running_mean[outs[o]];
      dst.stats.running_var[o] = src.stats.running_var[outs[o]];
    }
  }

  for (std::size_t i = 0; i < shapes.linears.size(); ++i) {
    const auto& info = shapes.linears[i];
    const auto& src = model.linears()[i];
    auto& dst = compact.linears()[i];
    const auto out_features = static_cast<std::size_t>(info.layer.out);
    const auto src_in = static_cast<std::size_t>(info.layer.in);
    std::vector<std::size_t> cols;
    if (info.input_slot) {
      const auto spatial = static_cast<std::size_t>(info.spatial);
      for (std::size_t c : prune.keep[*info.input_slot])
        for (std::size_t s = 0; s < spatial; ++s) cols.push_back(c * spatial + s);
    } else {
      cols = all_indices(src_in);
    }
    auto w = dst.weight.mutable_data();
    for (std::size_t o = 0; o < out_features; ++o)
      for (std::size_t j = 0; j < cols.size(); ++j) w[o * cols.size() + j] = src.weight.data()[o * src_in + cols[j]];
    std::copy(src.bias.data().begin(), src.bias.data().end(), dst.bias.mutable_data().begin());
  }
  return compact;
}

std::uint64_t FlopsReport::raw_total() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.raw;
  return n;
}

std::uint64_t FlopsReport::pruned_total() const {
  std::uint64_t n = 0;
  for (const auto& l : layers) n += l.pruned;
  return n;
}

double FlopsReport::reduction() const {
  const auto raw = raw_total();
  return raw == 0 ? 0.0 : 1.0 - static_cast<double>(pruned_total()) / static_cast<double>(raw);
}

std::string FlopsReport::to_text() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "flops.unit=multiply-accumulate\n";
  os << "flops.raw_total=" << raw_total() << "\n";
  os << "flops.pruned_total=" << pruned_total() << "\n";
  os << "flops.reduction=" << reduction() << "\n";
  for (const auto& l : layers) {
    os << "layer." << l.name << ".raw=" << l.raw << "\n";
    os << "layer." << l.name << ".pruned=" << l.pruned << "\n";
    os << "layer." << l.name << ".reduction=" << l.reduction() << "\n";
    os << "layer." << l.name << ".kept=" << l.kept_out << "\n";
    os << "layer." << l.name << ".total=" << l.total_out << "\n";
  }
  return os.str();
}

std::string FlopsReport::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed;
  os << "layer,raw,pruned,reduction,kept,total\n";
  for (const auto& l : layers)
    os << l.name << ',' << l.raw << ',' << l.pruned << ',' << l.reduction() << ',' << l.kept_out << ','
       << l.total_out << "\n";
  return os.str();
}

double reduction_fraction(double rate_prev, double rate_cur) { return 1.0 - (1.0 - rate_prev) * (1.0 - rate_cur); }

namespace {

// Kept count implied by a rate; (1 - p) * C is integral for rates derived
// from keep sets, rounding only removes representation error.
std::uint64_t kept_from_rate(double rate, int channels) {
  return static_cast<std::uint64_t>(std::llround((1.0 - rate) * channels));
}

FlopsReport count_impl(const ModelSpec& spec, const PruneSpec* prune) {
  const ShapeReport shapes = infer_shapes(spec);
  if (prune) check_against(shapes, *prune);
  auto rate_of = [&](std::optional<std::size_t> slot) { return (prune && slot) ? prune->layer_rate(*slot) : 0.0; };

  FlopsReport rep;
  for (const auto& info : shapes.convs) {
    const auto& b = info.block;
    LayerFlops lf;
    lf.name = "conv" + std::to_string(info.index);
    const std::uint64_t area = static_cast<std::uint64_t>(info.out_h) * static_cast<std::uint64_t>(info.out_w);
    const std::uint64_t kk = static_cast<std::uint64_t>(b.kernel) * static_cast<std::uint64_t>(b.kernel);
    lf.rate_in = rate_of(info.input_slot);
    lf.rate_out = rate_of(info.prune_slot);
    lf.raw = kk * static_cast<std::uint64_t>(b.in) * area * static_cast<std::uint64_t>(b.out);
    lf.pruned = kk * kept_from_rate(lf.rate_in, b.in) * area * kept_from_rate(lf.rate_out, b.out);
    lf.total_out = static_cast<std::size_t>(b.out);
    lf.kept_out = static_cast<std::size_t>(kept_from_rate(lf.rate_out, b.out));
    rep.layers.push_back(lf);
  }
  for (std::size_t i = 0; i < shapes.linears.size(); ++i) {
    const auto& info = shapes.linears[i];
    LayerFlops lf;
    lf.name = "fc" + std::to_string(i);
    lf.rate_in = rate_of(info.input_slot);
    const auto out = static_cast<std::uint64_t>(info.layer.out);
    lf.raw = static_cast<std::uint64_t>(info.layer.in) * out;
    const auto in_channels = info.layer.in / info.spatial;
    lf.pruned = kept_from_rate(lf.rate_in, in_channels) * static_cast<std::uint64_t>(info.spatial) * out;
    lf.total_out = lf.kept_out = static_cast<std::size_t>(out);
    rep.layers.push_back(lf);
  }
  return rep;
}

}  // namespace

FlopsReport count_flops(const ModelSpec& spec) { return count_impl(spec, nullptr); }

FlopsReport count_flops(const ModelSpec& spec, const PruneSpec& prune) { return count_impl(spec, &prune); }

}  // namespace dcp::prune
