#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "support.hpp"
#include "uaom/evalkit.hpp"
#include "uaom/features.hpp"

using namespace uaom;

namespace {

const NetworkModel& descriptor_model() {
  static const NetworkModel m = load_model(testing::fixture("descriptor.uaom"));
  return m;
}

Tensor blob_image(int side, double cx, double cy, double sigma) {
  Tensor t(side, side, 1);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x)
      t.at(y, x, 0) = static_cast<float>(std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2 * sigma * sigma)));
  return t;
}

DescriptorSet random_unit_rows(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d;
  DescriptorSet s;
  s.values.resize(n * 128);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    for (int k = 0; k < 128; ++k) {
      const float v = d(rng);
      s.values[i * 128 + k] = v;
      norm += double(v) * v;
    }
    for (int k = 0; k < 128; ++k) s.values[i * 128 + k] = static_cast<float>(s.values[i * 128 + k] / std::sqrt(norm));
  }
  return s;
}

PatchSet random_patches(std::size_t n, std::uint64_t seed) {
  PatchSet ps;
  for (std::size_t i = 0; i < n; ++i) {
    ps.patches.push_back(testing::random_tensor(32, 32, 1, seed + i));
    ps.source.push_back(i);
  }
  return ps;
}

}  // namespace

TEST_CASE("a constant image has no keypoints") {
  CHECK(detect(Tensor(64, 80, 1, 0.4f)).empty());
}

TEST_CASE("a Gaussian blob is found at its centre and size") {
  const double sigma = 4.0;
  const auto kps = detect(blob_image(128, 40.0, 40.0, sigma));
  REQUIRE_FALSE(kps.empty());
  const Keypoint& k = kps.front();
  CHECK(std::hypot(k.x - 40.0, k.y - 40.0) <= 1.5);
  const double want = sigma * std::numbers::sqrt2;
  CHECK(k.scale <= want * 1.5);
  CHECK(k.scale >= want / 1.5);
}

TEST_CASE("keypoints follow a 90 degree rotation of the image") {
  const Tensor img = make_base_scene(96, 128, 4);
  const int H = img.height(), W = img.width();
  Tensor rot(W, H, 1);  // rot(r, c) = img(H - 1 - c, r): (x, y) -> (H - 1 - y, x)
  for (int r = 0; r < W; ++r)
    for (int c = 0; c < H; ++c) rot.at(r, c, 0) = img.at(H - 1 - c, r, 0);
  const auto a = detect(img);
  const auto b = detect(rot);
  REQUIRE(a.size() >= 20);
  for (std::size_t i = 0; i < 20; ++i) {
    const double ex = H - 1 - a[i].y, ey = a[i].x;
    double best = 1e9;
    for (const Keypoint& k : b) best = std::min(best, std::hypot(k.x - ex, k.y - ey));
    CHECK(best <= 1.5);
  }
}

TEST_CASE("detection is deterministic, sorted and capped") {
  const Tensor img = make_base_scene(80, 80, 2);
  const auto a = detect(img);
  const auto b = detect(img);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].x == b[i].x);
    CHECK(a[i].y == b[i].y);
    CHECK(a[i].scale == b[i].scale);
    CHECK(a[i].orientation == b[i].orientation);
    if (i) CHECK(a[i].response <= a[i - 1].response);
  }
  REQUIRE(a.size() > 5);
  CHECK(detect(img, 5).size() == 5);
}

TEST_CASE("Gaussian blur keeps constants and has the requested spread") {
  const Tensor c(20, 20, 2, 0.3f);
  for (float v : gaussian_blur(c, 2.0).data()) CHECK(v == doctest::Approx(0.3f).epsilon(1e-6));

  Tensor impulse(41, 41, 1);
  impulse.at(20, 20, 0) = 1.0f;
  const Tensor g = gaussian_blur(impulse, 2.5);
  double mass = 0.0, var = 0.0;
  for (int y = 0; y < 41; ++y)
    for (int x = 0; x < 41; ++x) {
      mass += g.at(y, x, 0);
      var += g.at(y, x, 0) * (x - 20.0) * (x - 20.0);
    }
  CHECK(mass == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(std::sqrt(var / mass) == doctest::Approx(2.5).epsilon(0.02));
}

TEST_CASE("patch on a ramp equals the analytic resampling") {
  Tensor ramp(64, 64, 1);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) ramp.at(y, x, 0) = 0.1f + 0.01f * x + 0.02f * y;
  Keypoint kp;
  kp.x = 30.0f;
  kp.y = 25.0f;
  kp.scale = 2.0f;
  const Tensor p = sample_patch(ramp, kp);
  const double side = 12.0;
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) {
      const double u = ((c + 0.5) / 32 - 0.5) * side, v = ((r + 0.5) / 32 - 0.5) * side;
      CHECK(p.at(r, c, 0) == doctest::Approx(0.1 + 0.01 * (30 + u) + 0.02 * (25 + v)).epsilon(1e-5));
    }
}

TEST_CASE("orientation pi gives the 180 degree flipped patch") {
  const Tensor img = gaussian_blur(testing::random_tensor(64, 64, 1, 3, 0.0f, 1.0f), 2.0);
  Keypoint k0;
  k0.x = 31.0f;
  k0.y = 33.0f;
  k0.scale = 3.0f;
  Keypoint kpi = k0;
  kpi.orientation = std::numbers::pi_v<float>;
  const Tensor a = sample_patch(img, k0), b = sample_patch(img, kpi);
  for (int r = 0; r < 32; ++r)
    for (int c = 0; c < 32; ++c) CHECK(b.at(r, c, 0) == doctest::Approx(a.at(31 - r, 31 - c, 0)).epsilon(1e-5));
}

TEST_CASE("affine shape stretches the sampled support") {
  Tensor ramp(64, 64, 1);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) ramp.at(y, x, 0) = 0.01f * x;
  Keypoint kp;
  kp.x = kp.y = 32.0f;
  kp.scale = 2.0f;
  kp.affine = std::array<float, 4>{2.0f, 0.0f, 0.0f, 0.5f};
  const Tensor p = sample_patch(ramp, kp);
  // Horizontal span doubles: first to last column covers 2 * 12 * 31/32 px.
  CHECK(p.at(0, 31, 0) - p.at(0, 0, 0) == doctest::Approx(0.01 * 24 * 31 / 32).epsilon(1e-4));
}

TEST_CASE("constant and off-image patches are rejected") {
  Keypoint kp;
  kp.x = kp.y = 20.0f;
  kp.scale = 2.0f;
  CHECK_FALSE(extract_patch(Tensor(40, 40, 1, 0.5f), kp).has_value());
  Keypoint far = kp;
  far.x = 500.0f;
  CHECK_THROWS_AS(sample_patch(Tensor(40, 40, 1, 0.5f), far), std::domain_error);

  const Tensor img = make_base_scene(64, 64, 1);
  Keypoint good = kp;
  const PatchSet ps = extract_patches(img, {good, far, good});
  CHECK(ps.patches.size() == 2);
  CHECK(ps.source == std::vector<std::size_t>{0, 2});
  CHECK(ps.rejected == std::vector<std::size_t>{1});
  double mean = 0.0, sq = 0.0;
  for (float v : ps.patches[0].data()) mean += v;
  mean /= 1024;
  for (float v : ps.patches[0].data()) sq += (v - mean) * (v - mean);
  CHECK(mean == doctest::Approx(0.0).scale(1.0).epsilon(1e-5));
  CHECK(std::sqrt(sq / 1024) == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("descriptors are unit norm, repeatable and match the recorded outputs") {
  const PatchSet ps = random_patches(6, 10);
  PatchSet dup = ps;
  dup.patches.push_back(ps.patches[2]);
  dup.source.push_back(6);
  const DescriptorSet d = describe(dup, descriptor_model());
  REQUIRE(d.rows() == 7);
  for (std::size_t i = 0; i < d.rows(); ++i) {
    double n = 0.0;
    for (float v : d.row(i)) n += double(v) * v;
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-4));
  }
  for (int k = 0; k < 128; ++k) CHECK(d.row(2)[static_cast<std::size_t>(k)] == d.row(6)[static_cast<std::size_t>(k)]);
  CHECK(d.values == serial::describe(dup, descriptor_model()).values);

  const LoadedModel ref = load_model_with_references(testing::fixture("descriptor.uaom"));
  PatchSet rp;
  for (std::size_t i = 0; i < ref.references.size(); ++i) {
    rp.patches.push_back(ref.references[i].image);
    rp.source.push_back(i);
  }
  const DescriptorSet rd = describe(rp, ref.model);
  for (std::size_t i = 0; i < ref.references.size(); ++i) {
    REQUIRE(ref.references[i].output.has_value());
    const Tensor& want = *ref.references[i].output;
    for (int k = 0; k < 128; ++k)
      CHECK(rd.row(i)[static_cast<std::size_t>(k)] == doctest::Approx(want.data()[static_cast<std::size_t>(k)]).epsilon(1e-4).scale(1.0));
  }
}

TEST_CASE("descriptor contract is enforced") {
  CHECK_NOTHROW(check_descriptor_contract(descriptor_model()));
  const NetworkModel bb = load_model(testing::fixture("backbone.uaom"));
  try {
    check_descriptor_contract(bb);
    FAIL("backbone accepted as a descriptor");
  } catch (const ModelFormatError& e) {
    CHECK(e.code() == ModelErrorCode::kContract);
  }
  CHECK_THROWS_AS(describe(random_patches(1, 1), bb), ModelFormatError);
}

TEST_CASE("distance matrix closed-form cases") {
  DescriptorSet a, p;
  a.values.assign(128 * 3, 0.0f);
  a.values[0] = 1.0f;          // e0
  a.values[128 + 1] = 1.0f;    // e1
  a.values[256 + 0] = -1.0f;   // -e0
  p.values.assign(128, 0.0f);
  p.values[0] = 1.0f;
  const DistanceMatrix d = distance_matrix(a, p);
  CHECK(d.at(0, 0) == 0.0f);
  CHECK(d.at(1, 0) == doctest::Approx(std::numbers::sqrt2));
  CHECK(d.at(2, 0) == doctest::Approx(2.0));

  DescriptorSet over = p;
  over.values[0] = 1.0000001f;  // dot product rounds above 1
  CHECK(distance_matrix(over, over).at(0, 0) == 0.0f);

  DescriptorSet bad;
  bad.dim = 64;
  bad.values.assign(64, 0.0f);
  CHECK_THROWS_AS(distance_matrix(a, bad), std::invalid_argument);
}

TEST_CASE("distance equals the Euclidean norm for unit vectors") {
  const DescriptorSet a = random_unit_rows(1000, 1), p = random_unit_rows(1000, 2);
  const DistanceMatrix d = distance_matrix(a, p);
  for (std::size_t i = 0; i < 1000; ++i) {
    double e = 0.0;
    for (int k = 0; k < 128; ++k) {
      const double diff = double(a.row(i)[static_cast<std::size_t>(k)]) - p.row(i)[static_cast<std::size_t>(k)];
      e += diff * diff;
    }
    CHECK(d.at(i, i) == doctest::Approx(std::sqrt(e)).epsilon(1e-5));
  }
  const DistanceMatrix s = serial::distance_matrix(a, p);
  CHECK(s.values == d.values);
  const DistanceMatrix r = distance_matrix(p, a);
  const DistanceMatrix t = d.transposed();
  CHECK(r.values == t.values);
}
