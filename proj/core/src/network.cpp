#include "dcp/network.hpp"

#include <cmath>

#include "dcp/random.hpp"

namespace dcp::zoo {

Network::Network(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)), shapes_(infer_shapes(spec_)) {
  for (const auto& info : shapes_.convs) {
    const auto& b = info.block;
    const Shape wshape{static_cast<std::size_t>(b.out), static_cast<std::size_t>(b.in),
                       static_cast<std::size_t>(b.kernel), static_cast<std::size_t>(b.kernel)};
    Rng rng(stream_key(seed, {1, info.index}));
    const double stddev = std::sqrt(2.0 / static_cast<double>(b.in * b.kernel * b.kernel));
    std::vector<float> w(shape_numel(wshape));
    for (auto& v : w) v = static_cast<float>(rng.normal() * stddev);
    const auto out = static_cast<std::size_t>(b.out);
    ConvParams p{Tensor(wshape, std::move(w)), Tensor::full({out}, 1.0f), Tensor::zeros({out}),
                 BatchNormStats<float>::init(out)};
    p.weight.set_requires_grad();
    p.gamma.set_requires_grad();
    p.beta.set_requires_grad();
    convs_.push_back(std::move(p));
  }
  for (std::size_t i = 0; i < shapes_.linears.size(); ++i) {
    const auto& l = shapes_.linears[i].layer;
    Rng rng(stream_key(seed, {2, i}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    std::vector<float> w(static_cast<std::size_t>(l.out * l.in));
    for (auto& v : w) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
    LinearParams p{Tensor({static_cast<std::size_t>(l.out), static_cast<std::size_t>(l.in)}, std::move(w)),
                   Tensor::zeros({static_cast<std::size_t>(l.out)})};
    p.weight.set_requires_grad();
    p.bias.set_requires_grad();
    linears_.push_back(std::move(p));
  }
}

Tensor Network::conv_block(std::size_t conv, const Tensor& x, Mode mode) {
  const auto& b = shapes_.convs[conv].block;
  auto& p = convs_[conv];
  Tensor y = conv2d<float>(x, p.weight, b.stride, b.pad);
  y = batchnorm<float>(y, p.gamma, p.beta, p.stats, mode);
  if (b.relu) y = relu<float>(y);
  return y;
}

Tensor Network::forward(const Tensor& x, Mode mode, const std::vector<engine::Mask>* masks,
                        engine::GateTrace* trace) {
  if (x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(spec_.in_channels) ||
      x.dim(2) != static_cast<std::size_t>(spec_.image_size) || x.dim(3) != static_cast<std::size_t>(spec_.image_size))
    throw DimensionError("network " + spec_.name + ": input " + shape_str(x.shape()) + " does not match [B," +
                         std::to_string(spec_.in_channels) + "," + std::to_string(spec_.image_size) + "," +
                         std::to_string(spec_.image_size) + "]");
  if (masks && masks->size() != prunable_layers())
    throw DimensionError("network " + spec_.name + ": " + std::to_string(masks->size()) + " masks for " +
                         std::to_string(prunable_layers()) + " prunable layers");

  std::size_t conv = 0;
  std::size_t linear_idx = 0;
  auto gate = [&](const Tensor& y, std::size_t conv_index) {
    const auto& slot = shapes_.convs[conv_index].prune_slot;
    if (!masks || !slot) return y;
    return engine::forward_gate(y, (*masks)[*slot], *slot, trace);
  };

  Tensor h = x;
  for (const auto& layer : spec_.layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvBlock>) {
            h = gate(conv_block(conv, h, mode), conv);
            ++conv;
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            h = maxpool2x2<float>(h);
          } else if constexpr (std::is_same_v<L, GlobalAvgPool>) {
            h = global_avgpool<float>(h);
          } else if constexpr (std::is_same_v<L, Flatten>) {
            h = flatten<float>(h);
          } else if constexpr (std::is_same_v<L, Linear>) {
            auto& p = linears_[linear_idx++];
            h = linear<float>(h, p.weight, p.bias);
          } else if constexpr (std::is_same_v<L, Residual>) {
            Tensor branch = gate(conv_block(conv, h, mode), conv);
            branch = conv_block(conv + 1, branch, mode);
            Tensor shortcut = h;
            if (l.projection) {
              shortcut = conv_block(conv + 2, h, mode);
              conv += 3;
            } else {
              conv += 2;
            }
            h = relu<float>(add<float>(branch, shortcut));
          }
        },
        layer);
  }
  return h;
}

std::vector<Parameter> Network::parameters() {
  std::vector<Parameter> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const auto slot = shapes_.convs[i].prune_slot;
    const std::string prefix = "conv." + std::to_string(i);
    out.push_back({prefix + ".weight", convs_[i].weight, slot});
    out.push_back({prefix + ".bn.gamma", convs_[i].gamma, slot});
    out.push_back({prefix + ".bn.beta", convs_[i].beta, slot});
  }
  for (std::size_t i = 0; i < linears_.size(); ++i) {
    out.push_back({"fc." + std::to_string(i) + ".weight", linears_[i].weight, std::nullopt});
    out.push_back({"fc." + std::to_string(i) + ".bias", linears_[i].bias, std::nullopt});
  }
  return out;
}

std::vector<StateEntry> Network::state_entries() {
  std::vector<StateEntry> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    auto& p = convs_[i];
    const std::string prefix = "conv." + std::to_string(i);
    const Shape ch{p.gamma.numel()};
    out.push_back({prefix + ".weight", p.weight.shape(), p.weight.mutable_data()});
    out.push_back({prefix + ".bn.gamma", ch, p.gamma.mutable_data()});
    out.push_back({prefix + ".bn.beta", ch, p.beta.mutable_data()});
    out.push_back({prefix + ".bn.running_mean", ch, p.stats.running_mean});
    out.push_back({prefix + ".bn.running_var", ch, p.stats.running_var});
  }
  for (std::size_t i = 0; i < linears_.size(); ++i) {
    auto& p = linears_[i];
    out.push_back({"fc." + std::to_string(i) + ".weight", p.weight.shape(), p.weight.mutable_data()});
    out.push_back({"fc." + std::to_string(i) + ".bias", p.bias.shape(), p.bias.mutable_data()});
  }
  return out;
}

void Network::zero_grad() {
  for (auto& p : convs_) {
    p.weight.zero_grad();
    p.gamma.zero_grad();
    p.beta.zero_grad();
  }
  for (auto& p : linears_) {
    p.weight.zero_grad();
    p.bias.zero_grad();
  }
}

std::size_t Network::conv_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : convs_) n += p.weight.numel();
  return n;
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : convs_) n += p.weight.numel() + p.gamma.numel() + p.beta.numel();
  for (const auto& p : linears_) n += p.weight.numel() + p.bias.numel();
  return n;
}

}  // namespace dcp::zoo
