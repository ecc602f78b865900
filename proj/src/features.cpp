#include "uaom/features.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace uaom {

namespace {

int mirror(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

struct ScaleLevel {
  double sigma;
  Tensor blurred;
  Tensor response;
};

Tensor hessian_response(const Tensor& L, double sigma) {
  const int H = L.height(), W = L.width();
  Tensor r(H, W, 1);
  const double norm = sigma * sigma * sigma * sigma;
  for (int y = 0; y < H; ++y) {
    const int ym = mirror(y - 1, H), yp = mirror(y + 1, H);
    for (int x = 0; x < W; ++x) {
      const int xm = mirror(x - 1, W), xp = mirror(x + 1, W);
      const double c = L.at(y, x, 0);
      const double lxx = static_cast<double>(L.at(y, xp, 0)) + L.at(y, xm, 0) - 2.0 * c;
      const double lyy = static_cast<double>(L.at(yp, x, 0)) + L.at(ym, x, 0) - 2.0 * c;
      const double lxy = 0.25 * (static_cast<double>(L.at(yp, xp, 0)) - L.at(ym, xp, 0) - L.at(yp, xm, 0) +
                                 L.at(ym, xm, 0));
      r.at(y, x, 0) = static_cast<float>(norm * (lxx * lyy - lxy * lxy));
    }
  }
  return r;
}

// Offset of the vertex of the parabola through (-1, a), (0, b), (1, c).
double parabola_offset(double a, double b, double c) {
  const double denom = a - 2.0 * b + c;
  if (denom == 0.0) return 0.0;
  return std::clamp(0.5 * (a - c) / denom, -0.5, 0.5);
}

float dominant_orientation(const Tensor& L, double x, double y, double sigma) {
  constexpr int kBins = 36;
  std::array<double, kBins> hist{};
  const double sw = 1.5 * sigma;
  const int radius = std::max(1, static_cast<int>(std::lround(3.0 * sw)));
  const int cx = static_cast<int>(std::lround(x)), cy = static_cast<int>(std::lround(y));
  const int H = L.height(), W = L.width();
  for (int dy = -radius; dy <= radius; ++dy) {
    const int py = cy + dy;
    if (py < 1 || py >= H - 1) continue;
    for (int dx = -radius; dx <= radius; ++dx) {
      const int px = cx + dx;
      if (px < 1 || px >= W - 1 || dx * dx + dy * dy > radius * radius) continue;
      const double gx = 0.5 * (static_cast<double>(L.at(py, px + 1, 0)) - L.at(py, px - 1, 0));
      const double gy = 0.5 * (static_cast<double>(L.at(py + 1, px, 0)) - L.at(py - 1, px, 0));
      const double mag = std::hypot(gx, gy);
      if (mag == 0.0) continue;
      double ang = std::atan2(gy, gx);
      if (ang < 0.0) ang += 2.0 * std::numbers::pi;
      const int bin = static_cast<int>(ang / (2.0 * std::numbers::pi) * kBins) % kBins;
      hist[static_cast<std::size_t>(bin)] += mag * std::exp(-0.5 * (dx * dx + dy * dy) / (sw * sw));
    }
  }
  std::array<double, kBins> smooth{};
  for (int b = 0; b < kBins; ++b)
    smooth[static_cast<std::size_t>(b)] = 0.25 * hist[static_cast<std::size_t>((b + kBins - 1) % kBins)] +
                                          0.5 * hist[static_cast<std::size_t>(b)] +
                                          0.25 * hist[static_cast<std::size_t>((b + 1) % kBins)];
  const auto best = static_cast<int>(std::max_element(smooth.begin(), smooth.end()) - smooth.begin());
  if (smooth[static_cast<std::size_t>(best)] == 0.0) return 0.0f;
  const double off = parabola_offset(smooth[static_cast<std::size_t>((best + kBins - 1) % kBins)],
                                     smooth[static_cast<std::size_t>(best)],
                                     smooth[static_cast<std::size_t>((best + 1) % kBins)]);
  double ang = (best + 0.5 + off) * 2.0 * std::numbers::pi / kBins;
  if (ang > std::numbers::pi) ang -= 2.0 * std::numbers::pi;
  return static_cast<float>(ang);
}

void require_gray(const Tensor& img, const char* what) {
  if (img.channels() != 1) throw std::invalid_argument(std::string(what) + ": expected a single-channel image");
}

}  // namespace

Tensor gaussian_blur(const Tensor& input, double sigma) {
  if (sigma <= 0.0) return input;
  const auto k = gaussian_kernel(sigma);
  const int radius = static_cast<int>(k.size() / 2);
  const int H = input.height(), W = input.width(), C = input.channels();
  Tensor tmp(H, W, C), out(H, W, C);
#pragma omp parallel for schedule(static) if (input.size() > 50000)
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[static_cast<std::size_t>(i + radius)] * input.at(y, mirror(x + i, W), c);
        tmp.at(y, x, c) = static_cast<float>(s);
      }
#pragma omp parallel for schedule(static) if (input.size() > 50000)
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int i = -radius; i <= radius; ++i) s += k[static_cast<std::size_t>(i + radius)] * tmp.at(mirror(y + i, H), x, c);
        out.at(y, x, c) = static_cast<float>(s);
      }
  return out;
}

std::vector<Keypoint> HessianDetector::detect(const Tensor& gray) const {
  require_gray(gray, "detect");
  const int H = gray.height(), W = gray.width();
  if (H < 3 || W < 3) return {};
  const double max_sigma = std::max<double>(cfg_.sigma0, cfg_.max_sigma_fraction * std::min(H, W));

  std::vector<ScaleLevel> levels;
  for (int i = 0;; ++i) {
    const double sigma = cfg_.sigma0 * std::pow(2.0, static_cast<double>(i) / cfg_.levels_per_octave);
    if (sigma > max_sigma && levels.size() >= 3) break;
    ScaleLevel lv{sigma, gaussian_blur(gray, sigma), {}};
    lv.response = hessian_response(lv.blurred, sigma);
    levels.push_back(std::move(lv));
  }

  std::vector<Keypoint> kps;
  const int b = std::max(1, cfg_.border);
  for (std::size_t s = 1; s + 1 < levels.size(); ++s) {
    const Tensor& r = levels[s].response;
    for (int y = b; y < H - b; ++y)
      for (int x = b; x < W - b; ++x) {
        const float v = r.at(y, x, 0);
        if (!(v > cfg_.threshold)) continue;
        bool is_max = true;
        for (int ds = -1; ds <= 1 && is_max; ++ds) {
          const Tensor& rr = levels[s + static_cast<std::size_t>(ds)].response;
          for (int dy = -1; dy <= 1 && is_max; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              if (ds == 0 && dy == 0 && dx == 0) continue;
              if (rr.at(y + dy, x + dx, 0) >= v) {
                is_max = false;
                break;
              }
            }
        }
        if (!is_max) continue;
        const double ox = parabola_offset(r.at(y, x - 1, 0), v, r.at(y, x + 1, 0));
        const double oy = parabola_offset(r.at(y - 1, x, 0), v, r.at(y + 1, x, 0));
        const double os = parabola_offset(levels[s - 1].response.at(y, x, 0), v, levels[s + 1].response.at(y, x, 0));
        const double sigma = cfg_.sigma0 * std::pow(2.0, (static_cast<double>(s) + os) / cfg_.levels_per_octave);
        Keypoint kp;
        kp.x = static_cast<float>(x + ox);
        kp.y = static_cast<float>(y + oy);
        kp.scale = static_cast<float>(sigma * std::numbers::sqrt2);
        kp.response = v;
        kp.orientation = dominant_orientation(levels[s].blurred, kp.x, kp.y, sigma);
        kps.push_back(kp);
      }
  }
  std::sort(kps.begin(), kps.end(), [](const Keypoint& a, const Keypoint& b2) {
    if (a.response != b2.response) return a.response > b2.response;
    if (a.y != b2.y) return a.y < b2.y;
    if (a.x != b2.x) return a.x < b2.x;
    return a.scale < b2.scale;
  });
  if (kps.size() > static_cast<std::size_t>(std::max(0, cfg_.max_keypoints)))
    kps.resize(static_cast<std::size_t>(std::max(0, cfg_.max_keypoints)));
  return kps;
}

std::vector<Keypoint> detect(const Tensor& gray, int max_kp, float threshold) {
  DetectorConfig cfg;
  cfg.max_keypoints = max_kp;
  cfg.threshold = threshold;
  return HessianDetector(cfg).detect(gray);
}

Tensor sample_patch(const Tensor& gray, const Keypoint& kp, int out_size) {
  require_gray(gray, "sample_patch");
  const double side = patch_support(kp);
  const double c = std::cos(kp.orientation), s = std::sin(kp.orientation);
  const std::array<float, 4> A = kp.affine.value_or(std::array<float, 4>{1.0f, 0.0f, 0.0f, 1.0f});

  auto to_image = [&](double u, double v, double& ix, double& iy) {
    const double ax = A[0] * u + A[1] * v;
    const double ay = A[2] * u + A[3] * v;
    ix = kp.x + c * ax - s * ay;
    iy = kp.y + s * ax + c * ay;
  };

  double min_x = INFINITY, max_x = -INFINITY, min_y = INFINITY, max_y = -INFINITY;
  for (double u : {-0.5 * side, 0.5 * side})
    for (double v : {-0.5 * side, 0.5 * side}) {
      double ix, iy;
      to_image(u, v, ix, iy);
      min_x = std::min(min_x, ix);
      max_x = std::max(max_x, ix);
      min_y = std::min(min_y, iy);
      max_y = std::max(max_y, iy);
    }
  if (max_x < 0.0 || max_y < 0.0 || min_x > gray.width() - 1 || min_y > gray.height() - 1) {
    throw std::domain_error("sample_patch: keypoint support lies outside the image");
  }

  Tensor patch(out_size, out_size, 1);
  float v = 0.0f;
  for (int row = 0; row < out_size; ++row) {
    const double t = ((row + 0.5) / out_size - 0.5) * side;
    for (int col = 0; col < out_size; ++col) {
      const double u = ((col + 0.5) / out_size - 0.5) * side;
      double ix, iy;
      to_image(u, t, ix, iy);
      sample_bilinear(gray, static_cast<float>(ix), static_cast<float>(iy), std::span<float>(&v, 1));
      patch.at(row, col, 0) = v;
    }
  }
  return patch;
}

bool normalize_patch(Tensor& patch) {
  double sum = 0.0;
  for (float v : patch.data()) sum += v;
  const double mean = sum / static_cast<double>(patch.size());
  double sq = 0.0;
  for (float v : patch.data()) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(patch.size()));
  if (!(sd > 1e-6)) return false;
  for (float& v : patch.data()) v = static_cast<float>((v - mean) / sd);
  return true;
}

std::optional<Tensor> extract_patch(const Tensor& gray, const Keypoint& kp, int out_size) {
  Tensor p = sample_patch(gray, kp, out_size);
  if (!normalize_patch(p)) return std::nullopt;
  return p;
}

PatchSet extract_patches(const Tensor& gray, const std::vector<Keypoint>& keypoints) {
  std::vector<std::optional<Tensor>> tmp(keypoints.size());
#pragma omp parallel for schedule(static) if (keypoints.size() > 64)
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    try {
      tmp[i] = extract_patch(gray, keypoints[i]);
    } catch (const std::domain_error&) {
      tmp[i].reset();
    }
  }
  PatchSet ps;
  for (std::size_t i = 0; i < tmp.size(); ++i) {
    if (tmp[i]) {
      ps.patches.push_back(std::move(*tmp[i]));
      ps.source.push_back(i);
    } else {
      ps.rejected.push_back(i);
    }
  }
  return ps;
}

void check_descriptor_contract(const NetworkModel& model) {
  const InputSpec& in = model.input_spec;
  if (in.channels != 1 || (in.height != 0 && in.height != kPatchSize) || (in.width != 0 && in.width != kPatchSize)) {
    throw ModelFormatError(ModelErrorCode::kContract, "descriptor container must take 32x32x1 patches");
  }
  int h = kPatchSize, w = kPatchSize, c = 1;
  for (const Layer& l : model.layers) {
    if (l.kind == LayerKind::kMaxPool) {
      h /= 2;
      w /= 2;
    } else {
      h = l.conv.output_height(h);
      w = l.conv.output_width(w);
      c = l.conv.out_channels;
    }
    if (h < 1 || w < 1) throw ModelFormatError(ModelErrorCode::kContract, "descriptor network collapses the patch");
  }
  if (h != 1 || w != 1 || c != 128) {
    throw ModelFormatError(ModelErrorCode::kContract, "descriptor network must end in a 1x1x128 output, got " +
                                                          std::to_string(h) + "x" + std::to_string(w) + "x" +
                                                          std::to_string(c));
  }
  if (!model.l2_normalize_output) {
    throw ModelFormatError(ModelErrorCode::kContract, "descriptor container lacks the final unit normalisation");
  }
}

namespace {

void describe_one(const PatchSet& patches, const NetworkModel& model, DescriptorSet& out, std::size_t i) {
  const Tensor& p = patches.patches[i];
  if (p.height() != kPatchSize || p.width() != kPatchSize || p.channels() != 1)
    throw std::invalid_argument("describe: patches must be 32x32x1");
  const Tensor d = model.forward(p);
  std::copy(d.data().begin(), d.data().end(), out.values.begin() + static_cast<std::ptrdiff_t>(i * 128));
}

DistanceMatrix distance_setup(const DescriptorSet& a, const DescriptorSet& p) {
  if (a.dim != p.dim) throw std::invalid_argument("distance_matrix: descriptor dimensions differ");
  DistanceMatrix d;
  d.rows = a.rows();
  d.cols = p.rows();
  d.values.resize(d.rows * d.cols);
  return d;
}

void distance_row(const DescriptorSet& a, const DescriptorSet& p, DistanceMatrix& d, std::size_t i) {
  const auto ai = a.row(i);
  for (std::size_t j = 0; j < d.cols; ++j) {
    const auto pj = p.row(j);
    double dot = 0.0;
    for (int k = 0; k < a.dim; ++k) dot += static_cast<double>(ai[static_cast<std::size_t>(k)]) * pj[static_cast<std::size_t>(k)];
    d.values[i * d.cols + j] = static_cast<float>(std::sqrt(std::max(0.0, 2.0 - 2.0 * dot)));
  }
}

}  // namespace

DescriptorSet describe(const PatchSet& patches, const NetworkModel& desc_model) {
  check_descriptor_contract(desc_model);
  DescriptorSet out;
  out.values.resize(patches.patches.size() * 128);
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < patches.patches.size(); ++i) describe_one(patches, desc_model, out, i);
  return out;
}

DistanceMatrix DistanceMatrix::transposed() const {
  DistanceMatrix t;
  t.rows = cols;
  t.cols = rows;
  t.values.resize(values.size());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t.values[j * rows + i] = values[i * cols + j];
  return t;
}

DistanceMatrix distance_matrix(const DescriptorSet& a, const DescriptorSet& p) {
  DistanceMatrix d = distance_setup(a, p);
#pragma omp parallel for schedule(static) if (d.rows * d.cols > 10000)
  for (std::size_t i = 0; i < d.rows; ++i) distance_row(a, p, d, i);
  return d;
}

namespace serial {

DistanceMatrix distance_matrix(const DescriptorSet& a, const DescriptorSet& p) {
  DistanceMatrix d = distance_setup(a, p);
  for (std::size_t i = 0; i < d.rows; ++i) distance_row(a, p, d, i);
  return d;
}

DescriptorSet describe(const PatchSet& patches, const NetworkModel& desc_model) {
  check_descriptor_contract(desc_model);
  DescriptorSet out;
  out.values.resize(patches.patches.size() * 128);
  for (std::size_t i = 0; i < patches.patches.size(); ++i) describe_one(patches, desc_model, out, i);
  return out;
}

}  // namespace serial

}  // namespace uaom
