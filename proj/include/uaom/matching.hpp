#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uaom/features.hpp"

namespace uaom {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct Match {
  std::size_t idx_a = 0;
  std::size_t idx_b = 0;
  Point2 pt_a;
  Point2 pt_b;
  float dist = 0.0f;
  float ratio = 0.0f;
  /// Which match set the entry came from after fusion (0 = A/B', 1 = A'/B).
  int source = 0;
};

/// Row-major 3x3 matrix mapping homogeneous A points to B points.
using Mat3 = std::array<double, 9>;

enum class GeometricModel { kHomography, kAffine };

struct MatchSet {
  std::vector<Match> matches;
  std::string src_tag;
  std::optional<Mat3> model;
  std::vector<bool> inlier_flags;

  std::size_t inlier_count() const;
};

/// Lowe ratio test on every row of d. Ties for the minimum give ratio 1 and
/// are rejected. Points are left at zero; see attach_points.
std::vector<Match> ratio_match(const DistanceMatrix& d, double ratio_threshold = 0.8);

/// Fills pt_a / pt_b from keypoint lists indexed by idx_a / idx_b.
void attach_points(std::vector<Match>& matches, const std::vector<Keypoint>& kps_a,
                   const std::vector<Keypoint>& kps_b);

/// Keeps (i, j) from m_ab iff m_ba (computed on the transposed matrix, so
/// its idx_a are B indices) maps j back to i.
std::vector<Match> cross_check(const std::vector<Match>& m_ab, const std::vector<Match>& m_ba);

class RansacError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RansacOptions {
  double thresh_px = 3.0;
  int max_iters = 2000;
  double confidence = 0.999;
  std::uint64_t seed = 0;
  GeometricModel model = GeometricModel::kHomography;
};

struct RansacResult {
  Mat3 model{};
  std::vector<bool> inliers;
  std::size_t inlier_count = 0;
  int iterations = 0;
};

Point2 apply(const Mat3& h, Point2 p);
std::optional<Mat3> invert(const Mat3& h);

/// max(|H a - b|, |H^-1 b - a|); infinity when H is singular.
double symmetric_error(const Mat3& h, const Point2& a, const Point2& b);

/// Normalised DLT (homography) or least-squares affine fit; std::nullopt for
/// degenerate input. The result has h[8] == 1.
std::optional<Mat3> fit_model(const std::vector<Point2>& a, const std::vector<Point2>& b,
                              GeometricModel kind = GeometricModel::kHomography);

/// Seeded RANSAC. Throws std::invalid_argument for fewer than 4 matches and
/// RansacError when no hypothesis collects 4 inliers.
RansacResult ransac(const std::vector<Match>& matches, const RansacOptions& opts = {});

/// Union of the two style-direction sets, coordinates multiplied by the
/// per-image factors that map matched resolution to original resolution
/// (pixel-centre aligned, as in resize_bilinear),
/// greedy de-duplication by ascending distance, then a final RANSAC pass.
/// If RANSAC fails the set keeps its matches with no model and no inliers.
MatchSet fuse_and_project(const MatchSet& m_opt, const MatchSet& m_ac, double scale_a, double scale_b,
                          double dedup_radius = 2.0, const RansacOptions& opts = {});

/// One JSON object per line: idx_a, idx_b, pt_a, pt_b, dist, ratio, inlier.
std::string matches_to_json_lines(const MatchSet& set);

}  // namespace uaom
