#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "uaom/tensor.hpp"

namespace uaom {

struct Coord {
  float x = 0.0f;
  float y = 0.0f;
  bool operator==(const Coord&) const = default;
};

/// Nearest-neighbour field from a source grid into a target grid.
struct NNField {
  int src_h = 0;
  int src_w = 0;
  int dst_h = 0;
  int dst_w = 0;
  int patch_radius = 1;
  std::vector<Coord> mapping;  // src_h * src_w, row-major
  std::vector<float> cost;     // same length; meaningless while cost_stale
  bool cost_stale = true;

  NNField() = default;
  NNField(int src_h, int src_w, int dst_h, int dst_w, int radius);

  Coord& at(int y, int x) { return mapping[static_cast<std::size_t>(y) * src_w + x]; }
  const Coord& at(int y, int x) const { return mapping[static_cast<std::size_t>(y) * src_w + x]; }
  float& cost_at(int y, int x) { return cost[static_cast<std::size_t>(y) * src_w + x]; }
  float cost_at(int y, int x) const { return cost[static_cast<std::size_t>(y) * src_w + x]; }

  bool in_bounds() const;
  double total_cost() const;

  bool operator==(const NNField&) const = default;
};

/// The four position-normalised maps of one level. For the forward field
/// (A -> B) this is (A, B', A', B); the reverse field uses (B, A', B', A).
struct FeatureQuad {
  Tensor fa;
  Tensor fb_prime;
  Tensor fa_prime;
  Tensor fb;

  /// Throws std::invalid_argument on inconsistent dimensions.
  void validate() const;
  int src_h() const { return fa.height(); }
  int src_w() const { return fa.width(); }
  int dst_h() const { return fb.height(); }
  int dst_w() const { return fb.width(); }
};

/// Builds the quad from raw (unnormalised) features.
FeatureQuad make_quad(const Tensor& fa, const Tensor& fb_prime, const Tensor& fa_prime, const Tensor& fb);

/// Bidirectional patch distance between source pixel p and target pixel q:
/// sum over offsets d, |d|_inf <= radius, of |FA(p+d) - FB'(q+d)|^2 +
/// |FA'(p+d) - FB(q+d)|^2. An offset is dropped from both terms when it
/// leaves either grid.
double patch_cost(const FeatureQuad& quad, int px, int py, int qx, int qy, int radius);

inline constexpr std::uint64_t kBruteForceLimit = std::uint64_t{1} << 22;

/// Exhaustive argmin of patch_cost for every source pixel; ties go to the
/// smallest (q_y, q_x). Parallel over source pixels.
NNField brute_force_nnf(const FeatureQuad& quad, int radius);

struct PatchMatchOptions {
  int iterations = 10;
  int radius = 1;
  std::uint64_t seed = 0;
  /// Restrict targets to positions whose whole patch lies inside the target
  /// grid (when it is large enough). Every candidate of a source pixel then
  /// sums the same number of terms, so border targets are not favoured.
  bool interior_targets = false;
  /// Starting random-search radius; 0 starts from max(dst_h, dst_w).
  int max_search_radius = 0;
};

/// Called after every iteration with the iteration index and the field.
using PatchMatchHook = std::function<void(int, const NNField&)>;

/// Uniformly random in-bounds field, deterministic for the seed.
NNField random_nnf(int src_h, int src_w, int dst_h, int dst_w, int radius, std::uint64_t seed);

/// Fills in per-pixel costs of a field against a quad.
void evaluate_costs(const FeatureQuad& quad, NNField& field);

/// Randomised PatchMatch. Scan order alternates forward/backward per
/// iteration; a candidate replaces the incumbent only when strictly cheaper.
/// Without `init` the field starts from random_nnf(seed).
NNField patchmatch(const FeatureQuad& quad, const std::optional<NNField>& init, const PatchMatchOptions& options,
                   const PatchMatchHook& hook = {});

/// Coarse-to-fine upsampling: a child pixel inherits its parent's target,
/// scaled by the target-grid ratio, plus the child's offset inside the
/// parent, clamped in-bounds. Costs are marked stale.
NNField upsample_nnf(const NNField& field, int new_src_h, int new_src_w, int new_dst_h, int new_dst_w);

/// output(p) = bilinear sample of source at mapping(p).
Tensor warp(const Tensor& source, const NNField& field);

/// Flat binary dump: five little-endian i32 (src_h, src_w, dst_h, dst_w,
/// patch_radius) followed by src_h*src_w (x, y) f32 pairs.
void write_nnf_binary(const std::filesystem::path& path, const NNField& field);
NNField read_nnf_binary(const std::filesystem::path& path);

/// Displacement (q - p) rendered on an HSV colour wheel as an RGB tensor in
/// [0, 1]; hue is direction, saturation is magnitude.
Tensor nnf_flow_image(const NNField& field);

namespace serial {
NNField brute_force_nnf(const FeatureQuad& quad, int radius);
}

}  // namespace uaom
