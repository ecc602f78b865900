#include "uaom/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include "json.hpp"

namespace uaom {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'U', 'A', 'O', 'M'};
constexpr std::uint32_t kVersion = 1;

// The container is little-endian; payloads are copied without swapping.
static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

[[noreturn]] void fail(ModelErrorCode code, const std::string& msg) { throw ModelFormatError(code, msg); }

template <typename T>
T read_le(const std::vector<char>& bytes, std::size_t offset) {
  T v{};
  std::memcpy(&v, bytes.data() + offset, sizeof(T));
  return v;
}

template <typename T>
void write_le(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

std::size_t align4(std::size_t n) { return (n + 3) & ~static_cast<std::size_t>(3); }

std::vector<float> read_floats(const std::vector<char>& bytes, std::size_t offset, std::size_t count) {
  std::vector<float> out(count);
  std::memcpy(out.data(), bytes.data() + offset, count * sizeof(float));
  return out;
}

Tensor tensor_from_json(const json& j, const std::string& what) {
  try {
    const auto shape = j.at("shape").get<std::vector<int>>();
    if (shape.size() != 3) fail(ModelErrorCode::kBadHeader, what + ": reference tensors must be rank 3 (h, w, c)");
    auto data = j.at("data").get<std::vector<float>>();
    if (data.size() != static_cast<std::size_t>(shape[0]) * shape[1] * shape[2]) {
      fail(ModelErrorCode::kShapeMismatch, what + ": reference data length does not match its shape");
    }
    return Tensor(shape[0], shape[1], shape[2], std::move(data));
  } catch (const json::exception& e) {
    fail(ModelErrorCode::kBadHeader, what + ": " + e.what());
  }
}

json tensor_to_json(const Tensor& t) {
  return json{{"shape", {t.height(), t.width(), t.channels()}}, {"data", t.values()}};
}

std::vector<Tensor> run_with_taps(const NetworkModel& model, const Tensor& prepared) {
  std::vector<Tensor> taps(model.tap_layer.size());
  Tensor cur = prepared;
  std::size_t next_tap = 0;
  for (std::size_t li = 0; li < model.layers.size() && next_tap < taps.size(); ++li) {
    const Layer& layer = model.layers[li];
    cur = layer.kind == LayerKind::kConv ? conv2d(cur, layer.conv) : max_pool2(cur);
    while (next_tap < taps.size() && model.tap_layer[next_tap] == li) taps[next_tap++] = cur;
  }
  return taps;
}

double max_rel_deviation(const Tensor& got, const Tensor& expected) {
  if (!got.same_shape(expected)) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double e = expected.data()[i];
    worst = std::max(worst, std::abs(static_cast<double>(got.data()[i]) - e) / std::max(1.0, std::abs(e)));
  }
  return worst;
}

}  // namespace

const char* to_string(ModelErrorCode code) {
  switch (code) {
    case ModelErrorCode::kIo: return "io";
    case ModelErrorCode::kBadMagic: return "bad-magic";
    case ModelErrorCode::kUnsupportedVersion: return "unsupported-version";
    case ModelErrorCode::kBadHeader: return "bad-header";
    case ModelErrorCode::kShapeMismatch: return "shape-mismatch";
    case ModelErrorCode::kMissingTap: return "missing-tap";
    case ModelErrorCode::kUnknownDtype: return "unknown-dtype";
    case ModelErrorCode::kReferenceMismatch: return "reference-mismatch";
    case ModelErrorCode::kContract: return "contract";
  }
  return "unknown";
}

void NetworkModel::validate() const {
  if (layers.empty()) fail(ModelErrorCode::kBadHeader, "model has no layers");
  if (input_spec.channels < 1) fail(ModelErrorCode::kBadHeader, "input_spec.channels must be >= 1");
  if (!input_spec.mean.empty() && input_spec.mean.size() != static_cast<std::size_t>(input_spec.channels))
    fail(ModelErrorCode::kShapeMismatch, "input_spec.mean length differs from channel count");
  if (!input_spec.std.empty() && input_spec.std.size() != static_cast<std::size_t>(input_spec.channels))
    fail(ModelErrorCode::kShapeMismatch, "input_spec.std length differs from channel count");
  for (float s : input_spec.std)
    if (!(s > 0.0f)) fail(ModelErrorCode::kBadHeader, "input_spec.std entries must be positive");

  int channels = input_spec.channels;
  for (const Layer& l : layers) {
    if (l.kind == LayerKind::kMaxPool) continue;
    try {
      l.conv.validate();
    } catch (const std::invalid_argument& e) {
      fail(ModelErrorCode::kShapeMismatch, "layer '" + l.name + "': " + e.what());
    }
    if (l.conv.in_channels != channels) {
      fail(ModelErrorCode::kShapeMismatch, "layer '" + l.name + "' expects " + std::to_string(l.conv.in_channels) +
                                               " input channels, previous layer produces " + std::to_string(channels));
    }
    channels = l.conv.out_channels;
  }

  if (tap_layer.size() != tap_names.size()) fail(ModelErrorCode::kMissingTap, "unresolved tap labels");
  for (std::size_t t = 0; t < tap_layer.size(); ++t) {
    if (tap_layer[t] >= layers.size() || layers[tap_layer[t]].name != tap_names[t])
      fail(ModelErrorCode::kMissingTap, "tap '" + tap_names[t] + "' does not resolve to a layer");
    if (t > 0 && tap_layer[t] <= tap_layer[t - 1])
      fail(ModelErrorCode::kMissingTap, "taps must resolve to unique layers in increasing depth order");
  }
}

int NetworkModel::output_channels() const {
  int channels = input_spec.channels;
  for (const Layer& l : layers)
    if (l.kind == LayerKind::kConv) channels = l.conv.out_channels;
  return channels;
}

Tensor NetworkModel::prepare_input(const Tensor& image) const {
  const int C = input_spec.channels;
  Tensor out;
  if (image.channels() == C) {
    out = image;
  } else if (image.channels() == 1) {
    out = Tensor(image.height(), image.width(), C);
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x)
        for (int c = 0; c < C; ++c) out.at(y, x, c) = image.at(y, x, 0);
  } else {
    throw std::invalid_argument("image has " + std::to_string(image.channels()) + " channels, model expects " +
                                std::to_string(C));
  }
  if (input_spec.mean.empty() && input_spec.std.empty()) return out;
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      auto px = out.pixel(y, x);
      for (int c = 0; c < C; ++c) {
        const float m = input_spec.mean.empty() ? 0.0f : input_spec.mean[c];
        const float s = input_spec.std.empty() ? 1.0f : input_spec.std[c];
        px[c] = (px[c] - m) / s;
      }
    }
  return out;
}

Tensor NetworkModel::run_layers(const Tensor& input, std::size_t first, std::size_t last) const {
  Tensor cur = input;
  for (std::size_t li = first; li < last; ++li) {
    const Layer& layer = layers[li];
    cur = layer.kind == LayerKind::kConv ? conv2d(cur, layer.conv) : max_pool2(cur);
  }
  return cur;
}

Tensor NetworkModel::forward(const Tensor& image) const {
  Tensor out = run_layers(prepare_input(image), 0, layers.size());
  return l2_normalize_output ? normalize_positionwise(out) : out;
}

LoadedModel load_model_with_references(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ModelErrorCode::kIo, "cannot open weight container " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 16) fail(ModelErrorCode::kShapeMismatch, path.string() + ": file shorter than the fixed preamble");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(ModelErrorCode::kBadMagic, path.string() + ": bad magic bytes");
  const auto version = read_le<std::uint32_t>(bytes, 4);
  if (version != kVersion)
    fail(ModelErrorCode::kUnsupportedVersion, path.string() + ": unsupported version " + std::to_string(version));
  const auto header_len = read_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) fail(ModelErrorCode::kShapeMismatch, path.string() + ": header truncated");

  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    fail(ModelErrorCode::kBadHeader, path.string() + ": header is not valid JSON: " + e.what());
  }

  LoadedModel result;
  NetworkModel& model = result.model;
  std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> tensors;

  try {
    model.kind = header.value("kind", std::string("backbone"));
    model.l2_normalize_output = header.value("l2_normalize", false);
    model.seed = header.value("seed", std::uint64_t{0});
    const json& is = header.at("input_spec");
    model.input_spec.channels = is.at("channels").get<int>();
    model.input_spec.height = is.value("height", 0);
    model.input_spec.width = is.value("width", 0);
    model.input_spec.mean = is.value("mean", std::vector<float>{});
    model.input_spec.std = is.value("std", std::vector<float>{});

    std::size_t offset = align4(16 + header_len);
    for (const json& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto dtype = t.at("dtype").get<std::string>();
      if (dtype != "f32") fail(ModelErrorCode::kUnknownDtype, "tensor '" + name + "' has unknown dtype '" + dtype + "'");
      const auto shape = t.at("shape").get<std::vector<int>>();
      std::size_t count = 1;
      for (int d : shape) {
        if (d < 0) fail(ModelErrorCode::kShapeMismatch, "tensor '" + name + "' has a negative dimension");
        count *= static_cast<std::size_t>(d);
      }
      const std::size_t nbytes = count * sizeof(float);
      if (offset + nbytes > bytes.size()) {
        fail(ModelErrorCode::kShapeMismatch, "tensor '" + name + "' needs " + std::to_string(nbytes) +
                                                 " payload bytes but the file ends early");
      }
      tensors[name] = {shape, read_floats(bytes, offset, count)};
      offset = align4(offset + nbytes);
    }

    for (const json& lj : header.at("layers")) {
      Layer layer;
      const auto type = lj.at("type").get<std::string>();
      layer.name = lj.value("name", std::string{});
      if (type == "maxpool") {
        layer.kind = LayerKind::kMaxPool;
      } else if (type == "conv") {
        layer.kind = LayerKind::kConv;
        const auto shape = lj.at("shape").get<std::vector<int>>();
        if (shape.size() != 4) fail(ModelErrorCode::kShapeMismatch, "conv '" + layer.name + "' shape must be rank 4");
        ConvLayerSpec& c = layer.conv;
        c.out_channels = shape[0];
        c.in_channels = shape[1];
        c.kernel_h = shape[2];
        c.kernel_w = shape[3];
        c.stride = lj.value("stride", 1);
        c.padding = lj.value("padding", 0);
        c.has_relu = lj.value("has_relu", false);
        const auto wname = lj.at("weight").get<std::string>();
        const auto bname = lj.at("bias").get<std::string>();
        const auto wit = tensors.find(wname);
        const auto bit = tensors.find(bname);
        if (wit == tensors.end() || bit == tensors.end())
          fail(ModelErrorCode::kBadHeader, "conv '" + layer.name + "' references a tensor missing from the manifest");
        if (wit->second.first != shape)
          fail(ModelErrorCode::kShapeMismatch, "conv '" + layer.name + "' weight shape differs from layer shape");
        c.weights = wit->second.second;
        c.bias = bit->second.second;
        if (c.bias.size() != static_cast<std::size_t>(c.out_channels))
          fail(ModelErrorCode::kShapeMismatch, "conv '" + layer.name + "' bias length differs from out_channels");
      } else {
        fail(ModelErrorCode::kBadHeader, "unknown layer type '" + type + "'");
      }
      model.layers.push_back(std::move(layer));
    }

    model.tap_names = header.at("taps").get<std::vector<std::string>>();
    for (const auto& tap : model.tap_names) {
      const auto it = std::find_if(model.layers.begin(), model.layers.end(),
                                   [&](const Layer& l) { return l.name == tap; });
      if (it == model.layers.end()) fail(ModelErrorCode::kMissingTap, "tap '" + tap + "' names no layer");
      model.tap_layer.push_back(static_cast<std::size_t>(it - model.layers.begin()));
    }

    // Optional trailing reference block.
    if (offset < bytes.size()) {
      if (bytes.size() - offset < 8) fail(ModelErrorCode::kShapeMismatch, "stray bytes after tensor payloads");
      const auto ref_len = read_le<std::uint64_t>(bytes, offset);
      if (ref_len != bytes.size() - offset - 8)
        fail(ModelErrorCode::kShapeMismatch, "reference block length does not match file size");
      const json refs = json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(offset + 8), bytes.end());
      for (const json& rc : refs.at("reference_activations")) {
        ReferenceCase ref;
        ref.image = tensor_from_json(rc.at("image"), "reference image");
        if (rc.contains("taps"))
          for (const auto& [name, tj] : rc.at("taps").items()) ref.taps.emplace_back(name, tensor_from_json(tj, name));
        if (rc.contains("output")) ref.output = tensor_from_json(rc.at("output"), "reference output");
        result.references.push_back(std::move(ref));
      }
    }
  } catch (const json::exception& e) {
    fail(ModelErrorCode::kBadHeader, path.string() + ": malformed header: " + e.what());
  }

  model.validate();

  if (options.verify_references) {
    for (std::size_t i = 0; i < result.references.size(); ++i) {
      const double dev = reference_deviation(model, result.references[i]);
      if (!(dev <= options.reference_tolerance)) {
        fail(ModelErrorCode::kReferenceMismatch, path.string() + ": reference case " + std::to_string(i) +
                                                     " deviates by " + std::to_string(dev));
      }
    }
  }
  return result;
}

NetworkModel load_model(const std::filesystem::path& path, const LoadOptions& options) {
  return load_model_with_references(path, options).model;
}

double reference_deviation(const NetworkModel& model, const ReferenceCase& ref) {
  const Tensor prepared = model.prepare_input(ref.image);
  const auto taps = run_with_taps(model, prepared);
  double worst = 0.0;
  for (const auto& [name, expected] : ref.taps) {
    const auto it = std::find(model.tap_names.begin(), model.tap_names.end(), name);
    if (it == model.tap_names.end()) return INFINITY;
    worst = std::max(worst, max_rel_deviation(taps[static_cast<std::size_t>(it - model.tap_names.begin())], expected));
  }
  if (ref.output) worst = std::max(worst, max_rel_deviation(model.forward(ref.image), *ref.output));
  return worst;
}

void write_model(const std::filesystem::path& path, const NetworkModel& model,
                 const std::vector<ReferenceCase>& references) {
  model.validate();
  json header;
  header["kind"] = model.kind;
  header["l2_normalize"] = model.l2_normalize_output;
  header["seed"] = model.seed;
  json is{{"channels", model.input_spec.channels}, {"height", model.input_spec.height},
          {"width", model.input_spec.width}};
  if (!model.input_spec.mean.empty()) is["mean"] = model.input_spec.mean;
  if (!model.input_spec.std.empty()) is["std"] = model.input_spec.std;
  header["input_spec"] = is;

  json layers = json::array();
  json manifest = json::array();
  std::vector<const std::vector<float>*> payloads;
  for (const Layer& l : model.layers) {
    if (l.kind == LayerKind::kMaxPool) {
      layers.push_back({{"type", "maxpool"}, {"name", l.name}});
      continue;
    }
    const ConvLayerSpec& c = l.conv;
    const std::vector<int> shape{c.out_channels, c.in_channels, c.kernel_h, c.kernel_w};
    layers.push_back({{"type", "conv"},
                      {"name", l.name},
                      {"shape", shape},
                      {"stride", c.stride},
                      {"padding", c.padding},
                      {"has_relu", c.has_relu},
                      {"weight", l.name + ".weight"},
                      {"bias", l.name + ".bias"}});
    manifest.push_back({{"name", l.name + ".weight"}, {"dtype", "f32"}, {"shape", shape}});
    manifest.push_back({{"name", l.name + ".bias"}, {"dtype", "f32"}, {"shape", {c.out_channels}}});
    payloads.push_back(&c.weights);
    payloads.push_back(&c.bias);
  }
  header["layers"] = layers;
  header["taps"] = model.tap_names;
  header["tensors"] = manifest;

  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ModelFormatError(ModelErrorCode::kIo, "cannot write " + path.string());
  out.write(kMagic, 4);
  write_le<std::uint32_t>(out, kVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::size_t pad = align4(16 + text.size()) - (16 + text.size());
  for (std::size_t i = 0; i < pad; ++i) out.put('\0');
  for (const auto* p : payloads)
    for (float f : *p) write_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));

  if (!references.empty()) {
    json refs = json::array();
    for (const ReferenceCase& r : references) {
      json rc{{"image", tensor_to_json(r.image)}};
      json taps = json::object();
      for (const auto& [name, t] : r.taps) taps[name] = tensor_to_json(t);
      rc["taps"] = taps;
      if (r.output) rc["output"] = tensor_to_json(*r.output);
      refs.push_back(rc);
    }
    const std::string rtext = json{{"reference_activations", refs}}.dump();
    write_le<std::uint64_t>(out, rtext.size());
    out.write(rtext.data(), static_cast<std::streamsize>(rtext.size()));
  }
  if (!out) throw ModelFormatError(ModelErrorCode::kIo, "write failed for " + path.string());
}

FeaturePyramid extract_pyramid(const NetworkModel& model, const Tensor& image) {
  if (model.tap_layer.size() != kPyramidLevels) {
    throw ModelFormatError(ModelErrorCode::kContract, "pyramid extraction needs exactly five taps, model has " +
                                                          std::to_string(model.tap_layer.size()));
  }
  if (image.height() < kMinPyramidSide || image.width() < kMinPyramidSide) {
    throw std::invalid_argument("extract_pyramid: image " + image.shape_string() + " is smaller than " +
                                std::to_string(kMinPyramidSide) + " px on a side");
  }
  const auto taps = run_with_taps(model, model.prepare_input(image));
  FeaturePyramid pyr;
  pyr.source_height = image.height();
  pyr.source_width = image.width();
  for (int l = 0; l < kPyramidLevels; ++l) pyr.levels[static_cast<std::size_t>(l)] = taps[static_cast<std::size_t>(l)];
  for (int l = 1; l < kPyramidLevels; ++l) {
    const Tensor& lo = pyr.levels[static_cast<std::size_t>(l - 1)];
    const Tensor& hi = pyr.levels[static_cast<std::size_t>(l)];
    if (hi.height() != lo.height() / 2 || hi.width() != lo.width() / 2) {
      throw ModelFormatError(ModelErrorCode::kContract,
                             "model taps are not separated by exactly one 2x pool (level " + std::to_string(l) + " " +
                                 lo.shape_string() + " -> " + hi.shape_string() + ")");
    }
  }
  return pyr;
}

std::pair<std::size_t, std::size_t> segment_range(const NetworkModel& model, int from_level, int to_level) {
  if (to_level != from_level + 1 || from_level < 1 || to_level > static_cast<int>(model.tap_layer.size())) {
    throw std::invalid_argument("forward_segment: need to_level == from_level + 1 within the tap range");
  }
  return {model.tap_layer[static_cast<std::size_t>(from_level - 1)] + 1,
          model.tap_layer[static_cast<std::size_t>(to_level - 1)] + 1};
}

Tensor forward_segment(const NetworkModel& model, const Tensor& input, int from_level, int to_level) {
  const auto [first, last] = segment_range(model, from_level, to_level);
  int expected_channels = model.input_spec.channels;
  for (std::size_t li = 0; li < first; ++li)
    if (model.layers[li].kind == LayerKind::kConv) expected_channels = model.layers[li].conv.out_channels;
  if (input.channels() != expected_channels) {
    throw std::invalid_argument("forward_segment: input has " + std::to_string(input.channels()) +
                                " channels, level " + std::to_string(from_level) + " has " +
                                std::to_string(expected_channels));
  }
  if (input.height() < 2 || input.width() < 2) {
    throw std::invalid_argument("forward_segment: input " + input.shape_string() + " too small for the segment");
  }
  return model.run_layers(input, first, last);
}

}  // namespace uaom
