#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

#include "uaom/analogy.hpp"
#include "uaom/evalkit.hpp"
#include "uaom/features.hpp"
#include "uaom/matching.hpp"
#include "uaom/model_io.hpp"

namespace uaom {

struct PipelineConfig {
  AnalogyConfig analogy;
  DetectorConfig detector;
  double ratio = 0.8;
  double ransac_thresh_px = 3.0;
  int ransac_max_iters = 2000;
  double dedup_radius = 2.0;
  int max_side = 448;
  std::uint64_t seed = 0;
  /// Report every timing as 0 so outputs are byte-reproducible.
  bool fixed_clock = false;

  void validate() const;
};

/// Error raised by a pipeline stage; the stage name is kept for reporting.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct TransferResult {
  /// Inputs after the max_side limit, gray.
  Tensor img_a;
  Tensor img_b;
  /// Latent images on the same grids: A' carries B's appearance on A's
  /// layout, B' the reverse.
  Tensor a_prime;
  Tensor b_prime;
  double scale_a = 1.0;  // resized -> original
  double scale_b = 1.0;
  AnalogyResult analogy;
  double seconds = 0.0;
};

/// Resizes both gray images and runs the analogy on them.
TransferResult transfer(const Tensor& img_a, const Tensor& img_b, const NetworkModel& backbone,
                        const PipelineConfig& cfg);

/// Ratio test in both directions plus cross-check on one image pair.
struct DirectionalMatches {
  MatchSet matches;
  std::size_t ratio_survivors = 0;  // both directions, before cross-check
  std::size_t keypoints_a = 0;
  std::size_t keypoints_b = 0;
};

DirectionalMatches match_images(const Tensor& gray_a, const Tensor& gray_b, const NetworkModel& desc_model,
                                const PipelineConfig& cfg, const std::string& tag);

struct PairResult {
  EvalRecord record;
  MatchSet fused;
  TransferResult transfer;
  std::map<std::string, double> stage_seconds;
};

/// The full pipeline: transfer, matching of A with B' and A' with B,
/// fusion onto the original images and a final RANSAC.
PairResult evaluate_pair(const Tensor& img_a, const Tensor& img_b, const NetworkModel& backbone,
                         const NetworkModel& desc_model, const PipelineConfig& cfg);

/// Baseline without transfer: A matched directly with B, same protocol.
PairResult evaluate_raw_pair(const Tensor& img_a, const Tensor& img_b, const NetworkModel& desc_model,
                             const PipelineConfig& cfg);

}  // namespace uaom
