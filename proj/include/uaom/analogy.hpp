#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "uaom/model_io.hpp"
#include "uaom/nnf.hpp"
#include "uaom/tensor.hpp"

namespace uaom {

struct AnalogyConfig {
  int levels = kPyramidLevels;
  /// Content weight for levels 1..4 (index 0 is level 1). Level 5 has none:
  /// its latents equal the content features.
  std::array<double, 4> alpha = {0.1, 0.6, 0.7, 0.8};
  double weight_kappa = 300.0;
  double weight_tau = 0.05;
  /// Patch radius per level, index 0 is level 1.
  std::array<int, kPyramidLevels> patch_radius = {1, 1, 1, 1, 1};
  int pm_iterations = 10;
  /// Random-search radius below the coarsest level, in grid pixels of the
  /// level; 0 searches the whole target grid.
  int search_radius = 4;
  int deconv_iterations = 400;
  double deconv_step = 0.05;
  std::uint64_t rng_seed = 0;

  void validate() const;
  double alpha_at(int level) const { return alpha.at(static_cast<std::size_t>(level - 1)); }
  int radius_at(int level) const { return patch_radius.at(static_cast<std::size_t>(level - 1)); }
};

struct AnalogyState {
  int level = kPyramidLevels;
  FeaturePyramid pyr_a;
  FeaturePyramid pyr_b;
  Tensor fa_prime;
  Tensor fb_prime;
  NNField phi_ab;
  NNField phi_ba;

  const Tensor& fa() const { return pyr_a.level(level); }
  const Tensor& fb() const { return pyr_b.level(level); }
};

/// Level-5 start: latents are copies of the content features and both
/// fields are random (seeded from cfg.rng_seed).
AnalogyState init_coarsest(const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b, const AnalogyConfig& cfg);

/// Seeds used for the PatchMatch runs of one level and direction.
std::uint64_t level_seed(std::uint64_t base, int level, int direction);

struct DeconvResult {
  Tensor features;
  /// Objective after initialisation and after every accepted step.
  std::vector<double> trace;
  int accepted_steps = 0;
};

/// |forward_segment(R, level-1, level) - target|^2, accumulated in double.
double deconv_objective(const NetworkModel& model, const Tensor& r, int level, const Tensor& target);

/// Gradient of deconv_objective with respect to r.
Tensor deconv_gradient(const NetworkModel& model, const Tensor& r, int level, const Tensor& target);

/// Initial guess for inverting one segment: the target bilinearly upsampled
/// to (out_h, out_w), projected back through the segment's convolutions
/// (kernel-summed, transposed), clamped at zero.
Tensor deconv_initial_guess(const NetworkModel& model, const Tensor& target, int level, int out_h, int out_w);

/// Recovers level-(L-1) features whose forward pass through the segment
/// approximates `target` (level L). Projected gradient descent: a step is
/// accepted only if it lowers the objective; otherwise the step halves.
DeconvResult deconvolve(const NetworkModel& model, const Tensor& target, int level, int out_h, int out_w,
                        const AnalogyConfig& cfg, const std::optional<Tensor>& init = std::nullopt);

/// Single-channel map W(p) = alpha * sigmoid(kappa * (m(p) - tau)), with
/// m the squared channel norm of `content` divided by its maximum.
Tensor weight_map(const Tensor& content, double alpha, const AnalogyConfig& cfg);

/// content * W + warped_style * (1 - W), W broadcast over channels.
Tensor blend(const Tensor& content, const Tensor& warped_style, const Tensor& w);

/// Patch-voting reconstruction: every source pixel s votes the 3x3 patch of
/// `style` around phi(s) onto the 3x3 patch around s; each output pixel is
/// the mean of the votes it receives.
Tensor vote_reconstruct(const Tensor& style, const NNField& field);

struct LatentPair {
  Tensor latent_a;
  Tensor latent_b;
};

/// latent A is imgB's content voted onto A's grid via phi_ab; latent B is
/// the symmetric construction.
LatentPair reconstruct_latent(const Tensor& img_a, const Tensor& img_b, const NNField& phi_ab,
                              const NNField& phi_ba);

struct LevelReport {
  int level = 0;
  double cost_ab = 0.0;
  double cost_ba = 0.0;
  std::vector<double> deconv_trace_a;  // R_A, feeds B'
  std::vector<double> deconv_trace_b;  // R_B, feeds A'
  double mean_weight_a = 0.0;
  double mean_weight_b = 0.0;
  double seconds = 0.0;
};

struct AnalogyResult {
  Tensor latent_a;
  Tensor latent_b;
  NNField phi_ab;
  NNField phi_ba;
  std::vector<LevelReport> levels;  // level 5 first
  double pyramid_seconds = 0.0;
  double reconstruct_seconds = 0.0;
};

/// The full coarse-to-fine loop: pyramids, then for L = 5..2 PatchMatch in
/// both directions, warp, deconvolve, blend and upsample the fields; a last
/// PatchMatch at level 1 and latent reconstruction.
AnalogyResult run_analogy(const Tensor& img_a, const Tensor& img_b, const NetworkModel& model,
                          const AnalogyConfig& cfg);

}  // namespace uaom
