#include "dcp/model.hpp"

#include <array>
#include <cmath>
#include <json.hpp>

namespace dcp::zoo {

namespace {

constexpr std::array<int, 13> kVggWidths = {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
// Max-pool follows these conv positions (0-based).
constexpr std::array<int, 5> kVggPoolAfter = {1, 3, 6, 9, 12};

ConvBlock conv3x3(int in, int out, int stride, bool prunable, bool relu = true) {
  return ConvBlock{in, out, 3, stride, 1, prunable, relu};
}

}  // namespace

ModelSpec build_vgg16(int num_classes, double width_multiplier) {
  if (!(width_multiplier > 0.0 && width_multiplier <= 1.0))
    throw SpecError("vgg16: width multiplier must be in (0,1]");
  ModelSpec spec{"vgg16", 3, 32, num_classes, {}};
  int in = 3;
  std::size_t pool = 0;
  for (int i = 0; i < static_cast<int>(kVggWidths.size()); ++i) {
    const int out = static_cast<int>(std::ceil(width_multiplier * kVggWidths[i] - 1e-9));
    spec.layers.emplace_back(conv3x3(in, out, 1, true));
    if (pool < kVggPoolAfter.size() && kVggPoolAfter[pool] == i) {
      spec.layers.emplace_back(MaxPool{});
      ++pool;
    }
    in = out;
  }
  spec.layers.emplace_back(Flatten{});
  spec.layers.emplace_back(Linear{in, num_classes});
  return spec;
}

ModelSpec build_resnet32(int num_classes) {
  ModelSpec spec{"resnet32", 3, 32, num_classes, {}};
  spec.layers.emplace_back(conv3x3(3, 16, 1, false));
  int in = 16;
  for (int width : {16, 32, 64}) {
    for (int block = 0; block < 5; ++block) {
      const int stride = (block == 0 && width != 16) ? 2 : 1;
      Residual r;
      r.first = conv3x3(in, width, stride, true);
      r.second = conv3x3(width, width, 1, false, false);
      if (stride != 1 || in != width) r.projection = ConvBlock{in, width, 1, stride, 0, false, false};
      spec.layers.emplace_back(r);
      in = width;
    }
  }
  spec.layers.emplace_back(GlobalAvgPool{});
  spec.layers.emplace_back(Linear{64, num_classes});
  return spec;
}

ModelSpec build_tinycnn(int num_classes) {
  ModelSpec spec{"tinycnn", 3, 32, num_classes, {}};
  spec.layers.emplace_back(conv3x3(3, 16, 1, true));
  spec.layers.emplace_back(MaxPool{});
  spec.layers.emplace_back(conv3x3(16, 32, 1, true));
  spec.layers.emplace_back(conv3x3(32, 32, 1, true));
  spec.layers.emplace_back(MaxPool{});
  spec.layers.emplace_back(conv3x3(32, 64, 1, true));
  spec.layers.emplace_back(GlobalAvgPool{});
  spec.layers.emplace_back(Linear{64, num_classes});
  return spec;
}

ModelSpec build_by_name(const std::string& arch, int num_classes, double width_multiplier) {
  if (arch == "vgg16") return build_vgg16(num_classes, width_multiplier);
  if (arch == "resnet32") return build_resnet32(num_classes);
  if (arch == "tinycnn") return build_tinycnn(num_classes);
  throw SpecError("unknown arch '" + arch + "' (expected vgg16, resnet32 or tinycnn)");
}

namespace {

struct Cursor {
  int c = 0, h = 0, w = 0;
  std::optional<std::size_t> slot;  // prunable conv whose output is the current tensor
  bool flattened = false;
  int spatial = 0;
};

void place_conv(ShapeReport& rep, Cursor& cur, const ConvBlock& b, std::optional<std::size_t> input_slot,
                const char* where) {
  if (b.in != cur.c)
    throw SpecError(std::string(where) + ": conv expects " + std::to_string(b.in) + " input channels, got " +
                    std::to_string(cur.c));
  if (b.in <= 0 || b.out <= 0 || b.kernel <= 0 || b.stride <= 0 || b.pad < 0)
    throw SpecError(std::string(where) + ": conv has non-positive geometry");
  const int sh = cur.h + 2 * b.pad - b.kernel;
  const int sw = cur.w + 2 * b.pad - b.kernel;
  if (sh < 0 || sw < 0) throw SpecError(std::string(where) + ": kernel larger than padded input");
  ConvInfo info;
  info.index = rep.convs.size();
  info.block = b;
  info.input_slot = input_slot;
  info.in_h = cur.h;
  info.in_w = cur.w;
  info.out_h = sh / b.stride + 1;
  info.out_w = sw / b.stride + 1;
  if (b.prunable) {
    info.prune_slot = rep.prunable_channels.size();
    rep.prunable_channels.push_back(static_cast<std::size_t>(b.out));
  }
  rep.convs.push_back(info);
  cur.c = b.out;
  cur.h = info.out_h;
  cur.w = info.out_w;
  cur.slot = info.prune_slot;
}

}  // namespace

ShapeReport infer_shapes(const ModelSpec& spec) {
  ShapeReport rep;
  Cursor cur{spec.in_channels, spec.image_size, spec.image_size, std::nullopt, false, 0};
  if (spec.num_classes < 1) throw SpecError("num_classes must be >= 1");
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const std::string where = spec.name + " layer " + std::to_string(i);
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if (cur.flattened && !std::is_same_v<L, Linear>)
            throw SpecError(where + ": only linear layers may follow flatten/global pooling");
          if constexpr (std::is_same_v<L, ConvBlock>) {
            place_conv(rep, cur, layer, cur.slot, where.c_str());
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            if (cur.h < 2 || cur.w < 2) throw SpecError(where + ": max-pool on spatial size < 2");
            cur.h /= 2;
            cur.w /= 2;
          } else if constexpr (std::is_same_v<L, GlobalAvgPool>) {
            cur.spatial = 1;
            cur.h = cur.w = 1;
            cur.flattened = true;
            rep.feature_channels = cur.c;
            rep.feature_spatial = 1;
          } else if constexpr (std::is_same_v<L, Flatten>) {
            cur.spatial = cur.h * cur.w;
            cur.flattened = true;
            rep.feature_channels = cur.c;
            rep.feature_spatial = cur.spatial;
          } else if constexpr (std::is_same_v<L, Linear>) {
            if (!cur.flattened) throw SpecError(where + ": linear needs flatten or global pooling first");
            const int features = rep.linears.empty() ? cur.c * cur.spatial : cur.c;
            if (layer.in != features)
              throw SpecError(where + ": linear expects " + std::to_string(layer.in) + " features, got " +
                              std::to_string(features));
            LinearInfo info{layer, rep.linears.empty() ? cur.spatial : 1, rep.linears.empty() ? cur.slot : std::nullopt};
            rep.linears.push_back(info);
            cur.c = layer.out;
            cur.spatial = 1;
            cur.slot.reset();
          } else if constexpr (std::is_same_v<L, Residual>) {
            if (cur.slot)
              throw SpecError(where + ": a prunable conv feeds this block's shortcut sum");
            if (layer.second.prunable || (layer.projection && layer.projection->prunable))
              throw SpecError(where + ": convs feeding the shortcut sum must be non-prunable");
            if (layer.second.relu || (layer.projection && layer.projection->relu))
              throw SpecError(where + ": second conv and projection apply ReLU only after the sum");
            const Cursor entry = cur;
            place_conv(rep, cur, layer.first, std::nullopt, where.c_str());
            place_conv(rep, cur, layer.second, cur.slot, where.c_str());
            Cursor shortcut = entry;
            if (layer.projection) {
              place_conv(rep, shortcut, *layer.projection, std::nullopt, where.c_str());
            }
            if (shortcut.c != cur.c || shortcut.h != cur.h || shortcut.w != cur.w)
              throw SpecError(where + ": shortcut shape does not match block output");
            cur.slot.reset();
          }
        },
        spec.layers[i]);
  }
  if (rep.linears.empty() || cur.c != spec.num_classes)
    throw SpecError(spec.name + ": network must end in a linear layer with num_classes outputs");
  return rep;
}

void validate(const ModelSpec& spec) { (void)infer_shapes(spec); }

namespace {

using nlohmann::json;

json conv_json(const ConvBlock& b) {
  return json{{"in", b.in},       {"out", b.out},           {"kernel", b.kernel}, {"stride", b.stride},
              {"pad", b.pad},     {"prunable", b.prunable}, {"relu", b.relu}};
}

ConvBlock conv_from(const json& j) {
  return ConvBlock{j.at("in").get<int>(),   j.at("out").get<int>(),       j.at("kernel").get<int>(),
                   j.at("stride").get<int>(), j.at("pad").get<int>(),     j.at("prunable").get<bool>(),
                   j.at("relu").get<bool>()};
}

}  // namespace

std::string to_json(const ModelSpec& spec) {
  json layers = json::array();
  for (const auto& layer : spec.layers) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, ConvBlock>) {
            json j = conv_json(l);
            j["type"] = "conv";
            layers.push_back(j);
          } else if constexpr (std::is_same_v<L, MaxPool>) {
            layers.push_back(json{{"type", "maxpool"}});
          } else if constexpr (std::is_same_v<L, GlobalAvgPool>) {
            layers.push_back(json{{"type", "gap"}});
          } else if constexpr (std::is_same_v<L, Flatten>) {
            layers.push_back(json{{"type", "flatten"}});
          } else if constexpr (std::is_same_v<L, Linear>) {
            layers.push_back(json{{"type", "linear"}, {"in", l.in}, {"out", l.out}});
          } else if constexpr (std::is_same_v<L, Residual>) {
            json j{{"type", "residual"}, {"first", conv_json(l.first)}, {"second", conv_json(l.second)}};
            if (l.projection) j["projection"] = conv_json(*l.projection);
            layers.push_back(j);
          }
        },
        layer);
  }
  json j{{"name", spec.name},
         {"in_channels", spec.in_channels},
         {"image_size", spec.image_size},
         {"num_classes", spec.num_classes},
         {"layers", layers}};
  return j.dump();
}

ModelSpec from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModelSpec spec;
    spec.name = j.at("name").get<std::string>();
    spec.in_channels = j.at("in_channels").get<int>();
    spec.image_size = j.at("image_size").get<int>();
    spec.num_classes = j.at("num_classes").get<int>();
    for (const auto& l : j.at("layers")) {
      const auto type = l.at("type").get<std::string>();
      if (type == "conv") {
        spec.layers.emplace_back(conv_from(l));
      } else if (type == "maxpool") {
        spec.layers.emplace_back(MaxPool{});
      } else if (type == "gap") {
        spec.layers.emplace_back(GlobalAvgPool{});
      } else if (type == "flatten") {
        spec.layers.emplace_back(Flatten{});
      } else if (type == "linear") {
        spec.layers.emplace_back(Linear{l.at("in").get<int>(), l.at("out").get<int>()});
      } else if (type == "residual") {
        Residual r{conv_from(l.at("first")), conv_from(l.at("second")), std::nullopt};
        if (l.contains("projection")) r.projection = conv_from(l.at("projection"));
        spec.layers.emplace_back(r);
      } else {
        throw SpecError("model json: unknown layer type '" + type + "'");
      }
    }
    return spec;
  } catch (const json::exception& e) {
    throw SpecError(std::string("model json: ") + e.what());
  }
}

}  // namespace dcp::zoo
