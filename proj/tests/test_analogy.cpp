#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "support.hpp"
#include "uaom/analogy.hpp"
#include "uaom/evalkit.hpp"
#include "uaom/image_io.hpp"

using namespace uaom;

namespace {

const NetworkModel& backbone() {
  static const NetworkModel m = load_model(testing::fixture("backbone.uaom"));
  return m;
}

// Vote average built per output pixel from the neighbours that cover it.
Tensor vote_oracle(const Tensor& style, const NNField& f) {
  Tensor out(f.src_h, f.src_w, style.channels());
  std::vector<float> s(static_cast<std::size_t>(style.channels()));
  for (int py = 0; py < f.src_h; ++py)
    for (int px = 0; px < f.src_w; ++px) {
      std::vector<double> sum(static_cast<std::size_t>(style.channels()), 0.0);
      int n = 0;
      for (int sy = py - 1; sy <= py + 1; ++sy)
        for (int sx = px - 1; sx <= px + 1; ++sx) {
          if (sy < 0 || sx < 0 || sy >= f.src_h || sx >= f.src_w) continue;
          const Coord q = f.at(sy, sx);
          const float ux = q.x + static_cast<float>(px - sx), uy = q.y + static_cast<float>(py - sy);
          if (ux < 0 || uy < 0 || ux > f.dst_w - 1 || uy > f.dst_h - 1) continue;
          sample_bilinear(style, ux, uy, s);
          for (std::size_t c = 0; c < s.size(); ++c) sum[c] += s[c];
          ++n;
        }
      for (int c = 0; c < style.channels(); ++c)
        out.at(py, px, c) = n ? static_cast<float>(sum[static_cast<std::size_t>(c)] / n) : 0.0f;
    }
  return out;
}

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a.data()[i]) - b.data()[i]);
  return s / static_cast<double>(a.size());
}

Tensor small_scene(int side, std::uint64_t seed) { return make_base_scene(side, side, seed); }

}  // namespace

TEST_CASE("coarsest latents copy the content features exactly") {
  const FeaturePyramid pa = extract_pyramid(backbone(), testing::random_tensor(48, 64, 3, 1, 0.0f, 1.0f));
  const FeaturePyramid pb = extract_pyramid(backbone(), testing::random_tensor(64, 48, 3, 2, 0.0f, 1.0f));
  AnalogyConfig cfg;
  cfg.rng_seed = 5;
  const AnalogyState s = init_coarsest(pa, pb, cfg);
  CHECK(s.fa_prime == pa.level(5));
  CHECK(s.fb_prime == pb.level(5));
  CHECK(s.phi_ab.in_bounds());
  CHECK(s.phi_ba.in_bounds());
  CHECK(s.phi_ab.dst_h == pb.level(5).height());
  const AnalogyState again = init_coarsest(pa, pb, cfg);
  CHECK(again.phi_ab == s.phi_ab);
  CHECK(again.phi_ba == s.phi_ba);
}

TEST_CASE("identical images reach near-zero cost at the coarsest level") {
  const FeaturePyramid p = extract_pyramid(backbone(), replicate_channels(small_scene(96, 3), 3));
  const AnalogyState s = init_coarsest(p, p, AnalogyConfig{});
  const NNField f = patchmatch(make_quad(p.level(5), s.fb_prime, s.fa_prime, p.level(5)), s.phi_ab, {10, 1, 1});
  CHECK(f.total_cost() <= 1e-6 * f.mapping.size());
}

TEST_CASE("level seeds differ across levels and directions") {
  std::set<std::uint64_t> seen;
  for (int l = 1; l <= 5; ++l)
    for (int d = 0; d < 4; ++d) seen.insert(level_seed(9, l, d));
  CHECK(seen.size() == 20);
}

TEST_CASE("analytic deconvolution gradient agrees with central differences") {
  const NetworkModel& m = backbone();
  for (int level : {2, 3}) {
    const FeaturePyramid p = extract_pyramid(m, testing::random_tensor(32, 32, 3, 40 + level, 0.0f, 1.0f));
    const Tensor& lo = p.level(level - 1);
    Tensor r = testing::random_tensor(lo.height(), lo.width(), lo.channels(), 50 + level, 0.0f, 1.0f);
    const Tensor target = p.level(level);
    const Tensor g = deconv_gradient(m, r, level, target);
    std::mt19937_64 rng(level);
    std::uniform_int_distribution<std::size_t> pick(0, r.size() - 1);
    const double h = 1e-3;
    std::vector<double> rd(r.data().begin(), r.data().end());
    CHECK(testing::segment_objective(m, rd, r, level, target) ==
          doctest::Approx(deconv_objective(m, r, level, target)).epsilon(1e-5));
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = pick(rng);
      const double keep = rd[i];
      rd[i] = keep + h;
      const double fp = testing::segment_objective(m, rd, r, level, target);
      rd[i] = keep - h;
      const double fm = testing::segment_objective(m, rd, r, level, target);
      rd[i] = keep;
      const double fd = (fp - fm) / (2 * h);
      const double an = g.data()[i];
      const double scale = std::max({std::abs(fd), std::abs(an), 1e-2});
      CHECK(std::abs(fd - an) / scale <= 1e-3);
    }
  }
}

TEST_CASE("deconvolution from the optimum stays there") {
  const NetworkModel& m = backbone();
  const FeaturePyramid p = extract_pyramid(m, testing::random_tensor(32, 32, 3, 60, 0.0f, 1.0f));
  const DeconvResult d = deconvolve(m, p.level(3), 3, 16, 16, AnalogyConfig{}, p.level(2));
  CHECK(d.trace.front() == 0.0);
  CHECK(d.features == p.level(2));
}

TEST_CASE("deconvolution halves the objective and never increases it") {
  const NetworkModel& m = backbone();
  const AnalogyConfig cfg;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const int level = 2 + static_cast<int>(seed % 4);
    const int side = 32 >> (level - 2);
    // Targets are features of random images, so they lie in the segment's range.
    const FeaturePyramid p = extract_pyramid(m, testing::random_tensor(32, 32, 3, 70 + seed, 0.0f, 1.0f));
    const Tensor& target = p.level(level);
    const DeconvResult d = deconvolve(m, target, level, side, side, cfg);
    REQUIRE(d.trace.size() >= 2);
    for (std::size_t i = 1; i < d.trace.size(); ++i) CHECK(d.trace[i] <= d.trace[i - 1]);
    CHECK(d.trace.back() <= 0.5 * d.trace.front());
    for (float v : d.features.data()) CHECK(v >= 0.0f);
    CHECK(d.features.height() == side);
  }
}

TEST_CASE("deconvolution rejects bad levels, shapes and non-finite targets") {
  const NetworkModel& m = backbone();
  const AnalogyConfig cfg;
  CHECK_THROWS_AS(deconvolve(m, Tensor(4, 4, 8), 1, 8, 8, cfg), std::invalid_argument);
  CHECK_THROWS_AS(deconvolve(m, Tensor(4, 4, 7), 3, 8, 8, cfg), std::invalid_argument);
  const FeaturePyramid p = extract_pyramid(m, testing::random_tensor(32, 32, 3, 90, 0.0f, 1.0f));
  Tensor bad = p.level(3);
  bad.data()[0] = std::nanf("");
  CHECK_THROWS_AS(deconvolve(m, bad, 3, 16, 16, cfg), std::runtime_error);
}

TEST_CASE("weight map follows its closed form") {
  AnalogyConfig cfg;
  const Tensor zero(4, 5, 3);
  const Tensor w0 = weight_map(zero, 0.7, cfg);
  for (float v : w0.data()) CHECK(v == doctest::Approx(0.7 / (1 + std::exp(300.0 * 0.05))));

  Tensor hot(5, 5, 2);
  hot.at(2, 3, 1) = 4.0f;
  const Tensor wh = weight_map(hot, 0.8, cfg);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x)
      CHECK(wh.at(y, x, 0) == doctest::Approx(y == 2 && x == 3 ? 0.8 : 0.0).epsilon(1e-5).scale(1.0));

  const Tensor wz = weight_map(testing::random_tensor(6, 6, 3, 1), 0.0, cfg);
  for (float v : wz.data()) CHECK(v == 0.0f);

  const Tensor c = testing::random_tensor(7, 6, 3, 2);
  const Tensor w = weight_map(c, 0.6, cfg);
  double mx = 0.0;
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 6; ++x) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += double(c.at(y, x, k)) * c.at(y, x, k);
      mx = std::max(mx, s);
    }
  for (int y = 0; y < 7; ++y)
    for (int x = 0; x < 6; ++x) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += double(c.at(y, x, k)) * c.at(y, x, k);
      const double want = 0.6 / (1 + std::exp(-300.0 * (s / mx - 0.05)));
      CHECK(w.at(y, x, 0) == doctest::Approx(want).epsilon(1e-6));
    }
}

TEST_CASE("blend identities and interval containment") {
  const Tensor c = testing::random_tensor(6, 7, 4, 11);
  const Tensor s = testing::random_tensor(6, 7, 4, 12);
  CHECK(blend(c, s, Tensor(6, 7, 1, 1.0f)) == c);
  CHECK(blend(c, s, Tensor(6, 7, 1, 0.0f)) == s);
  const Tensor mid = blend(Tensor(1, 1, 1, 2.0f), Tensor(1, 1, 1, 4.0f), Tensor(1, 1, 1, 0.5f));
  CHECK(mid.at(0, 0, 0) == 3.0f);

  const Tensor w = testing::random_tensor(6, 7, 1, 13, 0.0f, 1.0f);
  const Tensor b = blend(c, s, w);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 7; ++x)
      for (int k = 0; k < 4; ++k) {
        const float lo = std::min(c.at(y, x, k), s.at(y, x, k)), hi = std::max(c.at(y, x, k), s.at(y, x, k));
        CHECK(b.at(y, x, k) >= lo);
        CHECK(b.at(y, x, k) <= hi);
      }
  CHECK_THROWS_AS(blend(c, testing::random_tensor(6, 6, 4, 1), w), std::invalid_argument);
  CHECK_THROWS_AS(blend(c, s, Tensor(6, 7, 2)), std::invalid_argument);
}

TEST_CASE("vote reconstruction: identity, constant and random fields") {
  const Tensor img = testing::random_tensor(9, 8, 3, 20, 0.0f, 1.0f);
  NNField id(9, 8, 9, 8, 1);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 8; ++x) id.at(y, x) = {static_cast<float>(x), static_cast<float>(y)};
  const Tensor same = vote_reconstruct(img, id);
  for (std::size_t i = 0; i < img.size(); ++i) CHECK(same.data()[i] == doctest::Approx(img.data()[i]).epsilon(1e-6));

  NNField k(5, 6, 9, 8, 1);
  for (Coord& c : k.mapping) c = {4.0f, 4.0f};
  const Tensor flat = vote_reconstruct(Tensor(9, 8, 1, 0.25f), k);
  for (float v : flat.data()) CHECK(v == doctest::Approx(0.25f));

  std::mt19937 rng(4);
  std::uniform_real_distribution<float> ux(0.0f, 7.0f), uy(0.0f, 8.0f);
  NNField r(7, 10, 9, 8, 1);
  for (Coord& c : r.mapping) c = {ux(rng), uy(rng)};
  const Tensor got = vote_reconstruct(img, r);
  const Tensor want = vote_oracle(img, r);
  for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-5));

  CHECK_THROWS_AS(vote_reconstruct(Tensor(8, 8, 3), r), std::invalid_argument);
}

TEST_CASE("self-analogy reproduces the input and is deterministic") {
  const Tensor img = replicate_channels(small_scene(64, 8), 3);
  AnalogyConfig cfg;
  cfg.deconv_iterations = 100;
  cfg.rng_seed = 3;
  const AnalogyResult r = run_analogy(img, img, backbone(), cfg);
  CHECK(mean_abs_diff(r.latent_a, img) <= 0.05);
  CHECK(mean_abs_diff(r.latent_b, img) <= 0.05);
  REQUIRE(r.levels.size() == 5);
  CHECK(r.levels.front().level == 5);
  // levels[0] reports the weights built for level 4, levels[3] those for level 1.
  CHECK(r.levels[0].mean_weight_a > r.levels[3].mean_weight_a);
  CHECK(r.levels[0].mean_weight_b > r.levels[3].mean_weight_b);
  for (const LevelReport& l : r.levels) {
    for (std::size_t i = 1; i < l.deconv_trace_a.size(); ++i) CHECK(l.deconv_trace_a[i] <= l.deconv_trace_a[i - 1]);
    for (std::size_t i = 1; i < l.deconv_trace_b.size(); ++i) CHECK(l.deconv_trace_b[i] <= l.deconv_trace_b[i - 1]);
  }

  const AnalogyResult again = run_analogy(img, img, backbone(), cfg);
  CHECK(again.latent_a == r.latent_a);
  CHECK(again.latent_b == r.latent_b);
  CHECK(again.phi_ab == r.phi_ab);
}

TEST_CASE("latents keep their own image's dimensions") {
  const Tensor a = replicate_channels(make_base_scene(48, 64, 1), 3);
  const Tensor b = replicate_channels(make_base_scene(64, 40, 2), 3);
  AnalogyConfig cfg;
  cfg.deconv_iterations = 20;
  const AnalogyResult r = run_analogy(a, b, backbone(), cfg);
  CHECK(r.latent_a.same_shape(a));
  CHECK(r.latent_b.same_shape(b));
  CHECK(r.phi_ab.in_bounds());
  CHECK(r.phi_ba.in_bounds());
}

TEST_CASE("config validation") {
  AnalogyConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.alpha[2] = 1.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.pm_iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.search_radius = -1;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}
