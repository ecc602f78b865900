#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uaom/tensor.hpp"

namespace uaom {

/// Failure modes of the weight container reader.
enum class ModelErrorCode {
  kIo,
  kBadMagic,
  kUnsupportedVersion,
  kBadHeader,
  kShapeMismatch,
  kMissingTap,
  kUnknownDtype,
  kReferenceMismatch,
  kContract,
};

class ModelFormatError : public std::runtime_error {
 public:
  ModelFormatError(ModelErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ModelErrorCode code() const { return code_; }

 private:
  ModelErrorCode code_;
};

const char* to_string(ModelErrorCode code);

enum class LayerKind { kConv, kMaxPool };

struct Layer {
  LayerKind kind = LayerKind::kConv;
  std::string name;
  ConvLayerSpec conv;  // unused for pools
};

struct InputSpec {
  int channels = 3;
  /// Fixed spatial size, or 0 when the network is fully convolutional.
  int height = 0;
  int width = 0;
  std::vector<float> mean;
  std::vector<float> std;
};

/// A linear chain of convolutions and 2x2 max pools with named taps.
struct NetworkModel {
  std::string kind;  // "backbone" or "descriptor"
  InputSpec input_spec;
  std::vector<Layer> layers;
  std::vector<std::string> tap_names;
  std::vector<std::size_t> tap_layer;  // index into layers, one per tap
  bool l2_normalize_output = false;
  std::uint64_t seed = 0;

  /// Checks tap resolution and channel continuity; throws ModelFormatError.
  void validate() const;

  /// Grayscale replication to input_spec.channels followed by per-channel
  /// (v - mean) / std.
  Tensor prepare_input(const Tensor& image) const;

  /// Runs layers[first, last) on an already prepared tensor.
  Tensor run_layers(const Tensor& input, std::size_t first, std::size_t last) const;

  /// Prepared input through every layer (plus final L2 normalization when
  /// the container asks for it).
  Tensor forward(const Tensor& image) const;

  int output_channels() const;
};

/// One recorded input and the activations expected for it.
struct ReferenceCase {
  Tensor image;
  std::vector<std::pair<std::string, Tensor>> taps;
  std::optional<Tensor> output;
};

struct LoadedModel {
  NetworkModel model;
  std::vector<ReferenceCase> references;
};

struct LoadOptions {
  bool verify_references = true;
  double reference_tolerance = 1e-4;
};

/// Reads a UAOM weight container. Layout, all integers little-endian:
///   "UAOM" | u32 version (1) | u64 header length N | N bytes JSON header |
///   zero padding to a 4-byte boundary | f32 payloads in manifest order |
///   optional: u64 length M | M bytes JSON {"reference_activations": [...]}
LoadedModel load_model_with_references(const std::filesystem::path& path, const LoadOptions& options = {});
NetworkModel load_model(const std::filesystem::path& path, const LoadOptions& options = {});

/// Writes a container in the same format. Used by tests and tooling.
void write_model(const std::filesystem::path& path, const NetworkModel& model,
                 const std::vector<ReferenceCase>& references = {});

/// Largest relative deviation between the model's activations and a
/// recorded case: |a - b| / max(1, |b|).
double reference_deviation(const NetworkModel& model, const ReferenceCase& ref);

inline constexpr int kPyramidLevels = 5;

/// Five tapped activations, level 1 (shallow, full resolution) to level 5.
struct FeaturePyramid {
  std::array<Tensor, kPyramidLevels> levels;
  int source_height = 0;
  int source_width = 0;

  /// Level is 1-based.
  const Tensor& level(int l) const { return levels.at(static_cast<std::size_t>(l - 1)); }
};

inline constexpr int kMinPyramidSide = 32;

FeaturePyramid extract_pyramid(const NetworkModel& model, const Tensor& image);

/// Applies the layers after tap(from_level) up to and including
/// tap(to_level); to_level must equal from_level + 1.
Tensor forward_segment(const NetworkModel& model, const Tensor& input, int from_level, int to_level);

/// Layer index range [first, last) that forward_segment executes.
std::pair<std::size_t, std::size_t> segment_range(const NetworkModel& model, int from_level, int to_level);

}  // namespace uaom
