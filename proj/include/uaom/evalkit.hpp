#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "uaom/matching.hpp"
#include "uaom/tensor.hpp"

namespace uaom {

struct EvalRecord {
  std::string pair_id;
  std::string method;
  /// Counts are doubles so averaged records keep fractional means.
  double gm = 0.0;
  double inl = 0.0;
  double ma = 0.0;
  double rt_seconds = 0.0;
  double transfer_seconds = 0.0;
  /// gm == 0: ma is defined as 0.
  bool degenerate = false;
  /// Ratio-test survivors of both directions before cross-check.
  double gm_pre_cross_check = 0.0;
  int runs = 1;
};

/// Fills ma and degenerate from gm and inl.
void finalize_record(EvalRecord& r);

/// Means of gm, inl, rt and transfer time; ma = mean(inl) / mean(gm).
EvalRecord average_runs(const std::vector<EvalRecord>& records);

/// Half-up rounding to `digits` decimals, for display.
double round_half_up(double v, int digits = 2);

struct TableTriple {
  double gm = 0.0;
  double inl = 0.0;
  double ma = 0.0;
};

struct ConsistencyRow {
  TableTriple triple;
  double quotient = 0.0;
  double residual = 0.0;
  bool pass = false;
};

struct ConsistencyReport {
  std::vector<ConsistencyRow> rows;
  std::size_t violations = 0;
  bool all_pass() const { return violations == 0; }
};

ConsistencyReport check_table_consistency(const std::vector<TableTriple>& table, double tolerance = 0.01);

struct Rgb {
  float r, g, b;
};
inline constexpr Rgb kInlierColor{0.0f, 1.0f, 0.0f};
inline constexpr Rgb kOutlierColor{1.0f, 0.0f, 0.0f};
inline constexpr Rgb kKeypointColor{1.0f, 1.0f, 0.0f};

/// Side-by-side RGB canvas of two gray images (B to the right of A). Every
/// match gets circles at both endpoints and a line, green for inliers, red
/// otherwise. Lines are drawn after all circles.
Tensor render_matches_canvas(const Tensor& img_a, const Tensor& img_b, const MatchSet& matches);
void render_matches(const Tensor& img_a, const Tensor& img_b, const MatchSet& matches,
                    const std::filesystem::path& out_path);

struct ModalityGap {
  double gamma = 1.0;
  double contrast = 1.0;
  double speckle_sigma = 0.0;
  double blur_sigma = 0.0;
};

/// Default degradation for the synthetic sonar-like side.
ModalityGap acoustic_gap();

struct SyntheticPair {
  Tensor img_a;
  Tensor img_b;
  Mat3 ground_truth{};  // maps A pixel coordinates to B
};

/// imgA is the degraded base; imgB is the clean base warped by `transform`
/// (pixels whose preimage falls outside the base are 0). Throws
/// std::invalid_argument for a non-invertible transform.
SyntheticPair make_synthetic_pair(const Tensor& base, const Mat3& transform, const ModalityGap& gap,
                                  std::uint64_t seed);

/// out(y) = in(H^-1 y), bilinear, 0 outside.
Tensor warp_homography(const Tensor& image, const Mat3& h, int out_h, int out_w);

/// Procedural gray test scene with blobs, bars and shading.
Tensor make_base_scene(int height, int width, std::uint64_t seed);

/// A moderate random perspective warp around the image centre.
Mat3 random_homography(int height, int width, std::uint64_t seed);

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ManifestEntry {
  std::string pair_id;
  std::filesystem::path path_a;
  std::filesystem::path path_b;
  std::optional<Mat3> expected_transform;
  int runs = 10;
  /// Set when the entry cannot be evaluated (missing file, bad transform).
  std::string error;
};

struct PairManifest {
  std::vector<ManifestEntry> entries;
};

/// JSON {"pairs": [{pair_id, path_a, path_b, expected_transform?, runs?}]}.
/// Relative paths resolve against the manifest's directory. Malformed JSON
/// throws ManifestError; per-entry problems are recorded in `error`.
PairManifest load_manifest(const std::filesystem::path& path);

struct FailedEntry {
  std::string pair_id;
  std::string error;
};

/// Columns pair_id, method, gm, inl, ma, rt_s, transfer_s.
std::string records_to_csv(const std::vector<EvalRecord>& records);

}  // namespace uaom
