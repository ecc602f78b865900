#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>
#include <string>
#include <unistd.h>

#include "uaom/matching.hpp"
#include "uaom/model_io.hpp"
#include "uaom/tensor.hpp"

namespace testing {

inline std::filesystem::path fixture(const std::string& name) {
  return std::filesystem::path(UAOM_FIXTURE_DIR) / name;
}

inline uaom::Tensor random_tensor(int h, int w, int c, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  uaom::Tensor t(h, w, c);
  for (float& v : t.data()) v = d(rng);
  return t;
}

inline uaom::ConvLayerSpec random_conv(int in, int out, int k, int stride, int pad, bool relu, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> d(0.0f, 0.5f);
  uaom::ConvLayerSpec c;
  c.in_channels = in;
  c.out_channels = out;
  c.kernel_h = c.kernel_w = k;
  c.stride = stride;
  c.padding = pad;
  c.has_relu = relu;
  c.weights.resize(static_cast<std::size_t>(out * in * k * k));
  c.bias.resize(static_cast<std::size_t>(out));
  for (float& v : c.weights) v = d(rng);
  for (float& v : c.bias) v = d(rng);
  return c;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("uaom_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// 100 exact correspondences under a random homography of a 640x480 frame
/// followed by 100 uniformly random pairs.
struct HomographySet {
  uaom::Mat3 truth{};
  std::vector<uaom::Match> matches;  // first `inliers` entries are exact
  std::size_t inliers = 0;
};

inline uaom::Point2 project(const uaom::Mat3& h, uaom::Point2 p) {
  const double w = h[6] * p.x + h[7] * p.y + h[8];
  return {(h[0] * p.x + h[1] * p.y + h[2]) / w, (h[3] * p.x + h[4] * p.y + h[5]) / w};
}

inline HomographySet homography_set(std::uint64_t seed, std::size_t n_in = 100, std::size_t n_out = 100) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), px(0.0, 640.0), py(0.0, 480.0);
  const double a = 0.3 * u(rng), s = 1.0 + 0.2 * u(rng);
  HomographySet set;
  set.truth = {s * std::cos(a), -s * std::sin(a), 40.0 * u(rng), s * std::sin(a), s * std::cos(a), 30.0 * u(rng),
               2e-4 * u(rng), 2e-4 * u(rng), 1.0};
  for (std::size_t i = 0; i < n_in + n_out; ++i) {
    uaom::Match m;
    m.idx_a = m.idx_b = i;
    m.pt_a = {px(rng), py(rng)};
    m.pt_b = i < n_in ? project(set.truth, m.pt_a) : uaom::Point2{px(rng), py(rng)};
    m.dist = static_cast<float>(i) * 1e-3f;
    set.matches.push_back(m);
  }
  set.inliers = n_in;
  return set;
}

/// Largest displacement between two models over the frame corners.
inline double corner_error(const uaom::Mat3& a, const uaom::Mat3& b, double w = 640.0, double h = 480.0) {
  double worst = 0.0;
  for (uaom::Point2 c : {uaom::Point2{0, 0}, uaom::Point2{w, 0}, uaom::Point2{0, h}, uaom::Point2{w, h}}) {
    const uaom::Point2 p = project(a, c), q = project(b, c);
    worst = std::max(worst, std::hypot(p.x - q.x, p.y - q.y));
  }
  return worst;
}

/// Double-precision plane stack (channel-major) for oracles that must not round to float between layers.
struct Planes {
  int h = 0, w = 0, c = 0;
  std::vector<double> v;
  double& at(int y, int x, int k) { return v[(static_cast<std::size_t>(k) * h + y) * w + x]; }
  double at(int y, int x, int k) const { return v[(static_cast<std::size_t>(k) * h + y) * w + x]; }
};

inline Planes planes_conv(const Planes& x, const uaom::ConvLayerSpec& c) {
  Planes y{(x.h + 2 * c.padding - c.kernel_h) / c.stride + 1, (x.w + 2 * c.padding - c.kernel_w) / c.stride + 1,
           c.out_channels, {}};
  y.v.assign(static_cast<std::size_t>(y.h) * y.w * y.c, 0.0);
  for (int o = 0; o < y.c; ++o)
    for (int oy = 0; oy < y.h; ++oy)
      for (int ox = 0; ox < y.w; ++ox) {
        double s = c.bias[static_cast<std::size_t>(o)];
        for (int i = 0; i < c.in_channels; ++i)
          for (int ky = 0; ky < c.kernel_h; ++ky)
            for (int kx = 0; kx < c.kernel_w; ++kx) {
              const int iy = oy * c.stride + ky - c.padding, ix = ox * c.stride + kx - c.padding;
              if (iy < 0 || ix < 0 || iy >= x.h || ix >= x.w) continue;
              s += x.at(iy, ix, i) * c.weights[((static_cast<std::size_t>(o) * c.in_channels + i) * c.kernel_h + ky) *
                                                    c.kernel_w + kx];
            }
        y.at(oy, ox, o) = c.has_relu && s < 0 ? 0.0 : s;
      }
  return y;
}

inline Planes planes_pool(const Planes& x) {
  Planes y{x.h / 2, x.w / 2, x.c, {}};
  y.v.resize(static_cast<std::size_t>(y.h) * y.w * y.c);
  for (int k = 0; k < y.c; ++k)
    for (int py = 0; py < y.h; ++py)
      for (int px = 0; px < y.w; ++px)
        y.at(py, px, k) = std::max(std::max(x.at(2 * py, 2 * px, k), x.at(2 * py, 2 * px + 1, k)),
                                   std::max(x.at(2 * py + 1, 2 * px, k), x.at(2 * py + 1, 2 * px + 1, k)));
  return y;
}

/// Sum of squared residuals of the segment from level - 1 to level, with r given in double.
inline double segment_objective(const uaom::NetworkModel& m, const std::vector<double>& r, const uaom::Tensor& shape,
                                int level, const uaom::Tensor& target) {
  Planes x{shape.height(), shape.width(), shape.channels(), {}};
  x.v.resize(r.size());
  for (int y = 0; y < x.h; ++y)
    for (int xx = 0; xx < x.w; ++xx)
      for (int k = 0; k < x.c; ++k) x.at(y, xx, k) = r[(static_cast<std::size_t>(y) * x.w + xx) * x.c + k];
  const auto [first, last] = uaom::segment_range(m, level - 1, level);
  for (std::size_t li = first; li < last; ++li)
    x = m.layers[li].kind == uaom::LayerKind::kConv ? planes_conv(x, m.layers[li].conv) : planes_pool(x);
  double f = 0.0;
  for (int y = 0; y < x.h; ++y)
    for (int xx = 0; xx < x.w; ++xx)
      for (int k = 0; k < x.c; ++k) {
        const double d = x.at(y, xx, k) - target.at(y, xx, k);
        f += d * d;
      }
  return f;
}

}  // namespace testing
