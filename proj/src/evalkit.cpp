#include "uaom/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "uaom/features.hpp"
#include "uaom/image_io.hpp"

namespace uaom {

void finalize_record(EvalRecord& r) {
  r.degenerate = r.gm <= 0.0;
  r.ma = r.degenerate ? 0.0 : r.inl / r.gm;
}

EvalRecord average_runs(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw std::invalid_argument("average_runs: no records");
  EvalRecord out;
  out.pair_id = records.front().pair_id;
  out.method = records.front().method;
  for (const EvalRecord& r : records) {
    if (r.pair_id != out.pair_id || r.method != out.method)
      throw std::invalid_argument("average_runs: records mix pairs or methods");
    out.gm += r.gm;
    out.inl += r.inl;
    out.rt_seconds += r.rt_seconds;
    out.transfer_seconds += r.transfer_seconds;
    out.gm_pre_cross_check += r.gm_pre_cross_check;
  }
  const double n = static_cast<double>(records.size());
  out.gm /= n;
  out.inl /= n;
  out.rt_seconds /= n;
  out.transfer_seconds /= n;
  out.gm_pre_cross_check /= n;
  out.runs = static_cast<int>(records.size());
  finalize_record(out);
  return out;
}

double round_half_up(double v, int digits) {
  const double scale = std::pow(10.0, digits);
  // The nudge keeps values such as 0.545 (stored as 0.54499...) rounding up.
  return std::floor(v * scale + 0.5 + 1e-9) / scale;
}

ConsistencyReport check_table_consistency(const std::vector<TableTriple>& table, double tolerance) {
  ConsistencyReport rep;
  for (const TableTriple& t : table) {
    ConsistencyRow row;
    row.triple = t;
    row.quotient = t.gm > 0.0 ? t.inl / t.gm : 0.0;
    row.residual = std::abs(t.ma - row.quotient);
    row.pass = row.residual <= tolerance + 1e-12;
    if (!row.pass) ++rep.violations;
    rep.rows.push_back(row);
  }
  return rep;
}

namespace {

void put(Tensor& canvas, int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= canvas.width() || y >= canvas.height()) return;
  canvas.at(y, x, 0) = c.r;
  canvas.at(y, x, 1) = c.g;
  canvas.at(y, x, 2) = c.b;
}

void draw_line(Tensor& canvas, int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    put(canvas, x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

void draw_circle(Tensor& canvas, int cx, int cy, int r, Rgb c) {
  for (int dy = -r - 1; dy <= r + 1; ++dy)
    for (int dx = -r - 1; dx <= r + 1; ++dx)
      if (std::abs(std::hypot(dx, dy) - r) < 0.5) put(canvas, cx + dx, cy + dy, c);
}

int px(double v) { return static_cast<int>(std::lround(v)); }

}  // namespace

Tensor render_matches_canvas(const Tensor& img_a, const Tensor& img_b, const MatchSet& matches) {
  const Tensor ga = to_gray(img_a), gb = to_gray(img_b);
  const int h = std::max(ga.height(), gb.height());
  const int w = ga.width() + gb.width();
  Tensor canvas(h, w, 3);
  for (int y = 0; y < ga.height(); ++y)
    for (int x = 0; x < ga.width(); ++x)
      for (int c = 0; c < 3; ++c) canvas.at(y, x, c) = ga.at(y, x, 0);
  for (int y = 0; y < gb.height(); ++y)
    for (int x = 0; x < gb.width(); ++x)
      for (int c = 0; c < 3; ++c) canvas.at(y, x + ga.width(), c) = gb.at(y, x, 0);

  const int off = ga.width();
  for (const Match& m : matches.matches) {
    draw_circle(canvas, px(m.pt_a.x), px(m.pt_a.y), 3, kKeypointColor);
    draw_circle(canvas, px(m.pt_b.x) + off, px(m.pt_b.y), 3, kKeypointColor);
  }
  for (std::size_t i = 0; i < matches.matches.size(); ++i) {
    const Match& m = matches.matches[i];
    const bool inlier = i < matches.inlier_flags.size() && matches.inlier_flags[i];
    draw_line(canvas, px(m.pt_a.x), px(m.pt_a.y), px(m.pt_b.x) + off, px(m.pt_b.y),
              inlier ? kInlierColor : kOutlierColor);
  }
  return canvas;
}

void render_matches(const Tensor& img_a, const Tensor& img_b, const MatchSet& matches,
                    const std::filesystem::path& out_path) {
  write_png(out_path, render_matches_canvas(img_a, img_b, matches));
}

ModalityGap acoustic_gap() { return {1.8, 0.6, 0.35, 1.2}; }

Tensor warp_homography(const Tensor& image, const Mat3& h, int out_h, int out_w) {
  const auto inv = invert(h);
  if (!inv) throw std::invalid_argument("warp_homography: transform is not invertible");
  Tensor out(out_h, out_w, image.channels());
  const double max_x = image.width() - 1, max_y = image.height() - 1;
  constexpr double kEdge = 1e-9;
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      const Point2 src = apply(*inv, {static_cast<double>(x), static_cast<double>(y)});
      if (!(src.x >= -kEdge && src.y >= -kEdge && src.x <= max_x + kEdge && src.y <= max_y + kEdge)) continue;
      sample_bilinear(image, static_cast<float>(src.x), static_cast<float>(src.y), out.pixel(y, x));
    }
  return out;
}

SyntheticPair make_synthetic_pair(const Tensor& base, const Mat3& transform, const ModalityGap& gap,
                                  std::uint64_t seed) {
  if (!invert(transform)) throw std::invalid_argument("make_synthetic_pair: transform is not invertible");
  SyntheticPair p;
  p.ground_truth = transform;
  p.img_b = warp_homography(base, transform, base.height(), base.width());

  Tensor a = base;
  auto data = a.data();
  if (gap.gamma != 1.0)
    for (float& v : data) v = static_cast<float>(std::pow(std::max(0.0f, v), gap.gamma));
  if (gap.contrast != 1.0)
    for (float& v : data) v = static_cast<float>(0.5 + gap.contrast * (v - 0.5));
  if (gap.speckle_sigma > 0.0) {
    // Box-Muller on a fixed engine keeps the noise field identical across
    // standard library implementations.
    std::mt19937_64 rng(seed);
    auto uniform = [&rng] { return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53; };
    for (std::size_t i = 0; i < data.size(); i += 2) {
      const double r = std::sqrt(-2.0 * std::log(uniform()));
      const double t = 2.0 * std::numbers::pi * uniform();
      data[i] = static_cast<float>(data[i] * (1.0 + gap.speckle_sigma * r * std::cos(t)));
      if (i + 1 < data.size())
        data[i + 1] = static_cast<float>(data[i + 1] * (1.0 + gap.speckle_sigma * r * std::sin(t)));
    }
  }
  if (gap.blur_sigma > 0.0) a = gaussian_blur(a, gap.blur_sigma);
  if (gap.gamma != 1.0 || gap.contrast != 1.0 || gap.speckle_sigma > 0.0 || gap.blur_sigma > 0.0)
    for (float& v : a.data()) v = std::clamp(v, 0.0f, 1.0f);
  p.img_a = std::move(a);
  return p;
}

Tensor make_base_scene(int height, int width, std::uint64_t seed) {
  if (height < 8 || width < 8) throw std::invalid_argument("make_base_scene: image too small");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double unit = std::min(height, width) / 192.0;

  Tensor img(height, width, 1);
  const double fx = 1.0 + 2.0 * u01(rng), fy = 1.0 + 2.0 * u01(rng), ph = 2.0 * std::numbers::pi * u01(rng);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      img.at(y, x, 0) = static_cast<float>(0.45 + 0.15 * std::sin(fx * x / width * std::numbers::pi + ph) *
                                                      std::cos(fy * y / height * std::numbers::pi));

  struct Shape {
    bool ellipse;
    double cx, cy, a, b, angle, value;
  };
  std::vector<Shape> shapes;
  const int count = static_cast<int>(std::lround(70 * unit * unit)) + 20;
  for (int i = 0; i < count; ++i) {
    Shape s;
    s.ellipse = u01(rng) < 0.6;
    s.cx = u01(rng) * width;
    s.cy = u01(rng) * height;
    s.a = (2.5 + 14.0 * u01(rng) * u01(rng)) * unit;
    s.b = s.a * (0.35 + 0.65 * u01(rng));
    s.angle = std::numbers::pi * u01(rng);
    s.value = u01(rng);
    shapes.push_back(s);
  }
  for (const Shape& s : shapes) {
    const double c = std::cos(s.angle), sn = std::sin(s.angle);
    const double reach = std::max(s.a, s.b) * 1.5 + 1.0;
    const int y0 = std::max(0, static_cast<int>(s.cy - reach)), y1 = std::min(height - 1, static_cast<int>(s.cy + reach));
    const int x0 = std::max(0, static_cast<int>(s.cx - reach)), x1 = std::min(width - 1, static_cast<int>(s.cx + reach));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - s.cx, dy = y - s.cy;
        const double u = (c * dx + sn * dy) / s.a, v = (-sn * dx + c * dy) / s.b;
        const bool inside = s.ellipse ? u * u + v * v <= 1.0 : std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
        if (inside) img.at(y, x, 0) = static_cast<float>(s.value);
      }
  }
  Tensor out = gaussian_blur(img, 0.8);
  for (float& v : out.data()) v = std::clamp(v, 0.0f, 1.0f);
  return out;
}

Mat3 random_homography(int height, int width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
  const double angle = 0.15 * u(rng), scale = 1.0 + 0.08 * u(rng);
  const double tx = 0.04 * width * u(rng), ty = 0.04 * height * u(rng);
  const double c = std::cos(angle) * scale, s = std::sin(angle) * scale;
  std::vector<Point2> src, dst;
  for (double yy : {0.0, static_cast<double>(height - 1)})
    for (double xx : {0.0, static_cast<double>(width - 1)}) {
      const double dx = xx - cx, dy = yy - cy;
      src.push_back({xx, yy});
      dst.push_back({cx + c * dx - s * dy + tx + 0.03 * width * u(rng), cy + s * dx + c * dy + ty + 0.03 * height * u(rng)});
    }
  return *fit_model(src, dst);
}

PairManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ManifestError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object() || !j.contains("pairs") || !j["pairs"].is_array())
    throw ManifestError("manifest " + path.string() + " needs a \"pairs\" array");

  const std::filesystem::path root = path.parent_path();
  PairManifest m;
  std::size_t n = 0;
  for (const auto& e : j["pairs"]) {
    ++n;
    if (!e.is_object()) throw ManifestError("manifest entry " + std::to_string(n) + " is not an object");
    ManifestEntry entry;
    try {
      entry.pair_id = e.value("pair_id", "pair" + std::to_string(n));
      entry.path_a = root / e.at("path_a").get<std::string>();
      entry.path_b = root / e.at("path_b").get<std::string>();
      entry.runs = e.value("runs", 10);
      if (e.contains("expected_transform")) {
        const auto v = e["expected_transform"].get<std::vector<double>>();
        if (v.size() != 9) throw ManifestError("expected_transform needs 9 values");
        Mat3 h;
        std::copy(v.begin(), v.end(), h.begin());
        entry.expected_transform = h;
      }
    } catch (const nlohmann::json::exception& ex) {
      throw ManifestError("manifest entry " + std::to_string(n) + ": " + ex.what());
    }
    if (entry.runs < 1) throw ManifestError("manifest entry " + entry.pair_id + ": runs must be >= 1");
    if (!std::filesystem::is_regular_file(entry.path_a))
      entry.error = "missing image " + entry.path_a.string();
    else if (!std::filesystem::is_regular_file(entry.path_b))
      entry.error = "missing image " + entry.path_b.string();
    else if (entry.expected_transform && !invert(*entry.expected_transform))
      entry.error = "expected_transform is not invertible";
    m.entries.push_back(std::move(entry));
  }
  return m;
}

namespace {

std::string fmt(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

std::string count_str(double v) {
  return v == std::floor(v) ? fmt(v, 0) : fmt(round_half_up(v, 2), 2);
}

}  // namespace

std::string records_to_csv(const std::vector<EvalRecord>& records) {
  std::string out = "pair_id,method,gm,inl,ma,rt_s,transfer_s\n";
  for (const EvalRecord& r : records) {
    out += r.pair_id + "," + r.method + "," + count_str(r.gm) + "," + count_str(r.inl) + "," +
           fmt(round_half_up(r.ma, 2), 2) + "," + fmt(r.rt_seconds, 3) + "," + fmt(r.transfer_seconds, 3) + "\n";
  }
  return out;
}

}  // namespace uaom
