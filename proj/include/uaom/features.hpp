#pragma once

#include <array>
#include <optional>
#include <vector>

#include "uaom/model_io.hpp"
#include "uaom/tensor.hpp"

namespace uaom {

struct Keypoint {
  float x = 0.0f;
  float y = 0.0f;
  /// Blob radius, sqrt(2) times the detection sigma.
  float scale = 1.0f;
  float orientation = 0.0f;  // radians
  /// Optional unit-determinant shape matrix, row-major [a b; c d].
  std::optional<std::array<float, 4>> affine;
  float response = 0.0f;
};

struct DetectorConfig {
  int max_keypoints = 4000;
  float threshold = 1e-4f;
  float sigma0 = 1.6f;
  int levels_per_octave = 3;
  /// Largest detection sigma as a fraction of the short image side.
  float max_sigma_fraction = 0.125f;
  /// Keypoints closer than this to the border are dropped.
  int border = 2;
};

/// Interest-point detector interface, so a learned affine-shape detector can
/// stand in for the classical one.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::vector<Keypoint> detect(const Tensor& gray) const = 0;
};

/// Multi-scale determinant-of-Hessian blobs with 3x3x3 non-maximum
/// suppression, sub-pixel refinement and a dominant-gradient orientation.
class HessianDetector : public Detector {
 public:
  explicit HessianDetector(DetectorConfig cfg = {}) : cfg_(cfg) {}
  std::vector<Keypoint> detect(const Tensor& gray) const override;

 private:
  DetectorConfig cfg_;
};

std::vector<Keypoint> detect(const Tensor& gray, int max_kp = 4000, float threshold = 1e-4f);

/// Separable Gaussian blur with mirrored borders.
Tensor gaussian_blur(const Tensor& input, double sigma);

inline constexpr int kPatchSize = 32;
inline constexpr float kPatchMagnification = 6.0f;

/// Side of the square image region a keypoint's patch covers.
inline float patch_support(const Keypoint& kp) { return kPatchMagnification * kp.scale; }

/// Raw (unnormalised) patch: the oriented, affine-shaped support region
/// bilinearly resampled to out_size x out_size. Throws std::domain_error when
/// the support lies entirely outside the image.
Tensor sample_patch(const Tensor& gray, const Keypoint& kp, int out_size = kPatchSize);

/// In-place mean 0 / std 1 normalisation; returns false for a constant patch.
bool normalize_patch(Tensor& patch);

/// sample_patch followed by normalize_patch; std::nullopt for constant patches.
std::optional<Tensor> extract_patch(const Tensor& gray, const Keypoint& kp, int out_size = kPatchSize);

struct PatchSet {
  std::vector<Tensor> patches;        // 32x32x1, normalised
  std::vector<std::size_t> source;    // keypoint index of each patch
  std::vector<std::size_t> rejected;  // constant or out-of-image keypoints
};

PatchSet extract_patches(const Tensor& gray, const std::vector<Keypoint>& keypoints);

struct DescriptorSet {
  int dim = 128;
  std::vector<float> values;  // rows of `dim` floats
  std::size_t rows() const { return dim > 0 ? values.size() / static_cast<std::size_t>(dim) : 0; }
  std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, static_cast<std::size_t>(dim)}; }
};

/// Checks that a container declares 32x32x1 input, a 1x1x128 output and a
/// final unit normalisation. Throws ModelFormatError(kContract).
void check_descriptor_contract(const NetworkModel& model);

DescriptorSet describe(const PatchSet& patches, const NetworkModel& desc_model);

/// Row-major n x m matrix of sqrt(max(0, 2 - 2 <a_i, p_j>)).
struct DistanceMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> values;
  float at(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
  DistanceMatrix transposed() const;
};

DistanceMatrix distance_matrix(const DescriptorSet& a, const DescriptorSet& p);

namespace serial {
DistanceMatrix distance_matrix(const DescriptorSet& a, const DescriptorSet& p);
DescriptorSet describe(const PatchSet& patches, const NetworkModel& desc_model);
}  // namespace serial

}  // namespace uaom
