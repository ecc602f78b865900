#include "uaom/nnf.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace uaom {

NNField::NNField(int src_h_, int src_w_, int dst_h_, int dst_w_, int radius)
    : src_h(src_h_), src_w(src_w_), dst_h(dst_h_), dst_w(dst_w_), patch_radius(radius) {
  if (src_h < 1 || src_w < 1 || dst_h < 1 || dst_w < 1) throw std::invalid_argument("NNField: empty grid");
  mapping.resize(static_cast<std::size_t>(src_h) * src_w);
  cost.assign(mapping.size(), 0.0f);
}

bool NNField::in_bounds() const {
  return std::all_of(mapping.begin(), mapping.end(), [&](const Coord& c) {
    return c.x >= 0.0f && c.y >= 0.0f && c.x <= static_cast<float>(dst_w - 1) && c.y <= static_cast<float>(dst_h - 1);
  });
}

double NNField::total_cost() const {
  double s = 0.0;
  for (float c : cost) s += c;
  return s;
}

void FeatureQuad::validate() const {
  if (!fa.same_shape(fa_prime)) throw std::invalid_argument("FeatureQuad: fa and fa_prime differ in shape");
  if (!fb.same_shape(fb_prime)) throw std::invalid_argument("FeatureQuad: fb and fb_prime differ in shape");
  if (fa.channels() != fb.channels()) throw std::invalid_argument("FeatureQuad: channel counts differ");
  if (fa.empty() || fb.empty()) throw std::invalid_argument("FeatureQuad: empty feature map");
}

FeatureQuad make_quad(const Tensor& fa, const Tensor& fb_prime, const Tensor& fa_prime, const Tensor& fb) {
  FeatureQuad q{normalize_positionwise(fa), normalize_positionwise(fb_prime), normalize_positionwise(fa_prime),
                normalize_positionwise(fb)};
  q.validate();
  return q;
}

namespace {

inline double sqdist(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    const double d = static_cast<double>(a[c]) - b[c];
    s += d * d;
  }
  return s;
}

// Patch cost that gives up once the partial sum reaches `bound`. When it
// runs to completion it sums in exactly the order patch_cost does.
double bounded_cost(const FeatureQuad& q, int px, int py, int qx, int qy, int r, double bound) {
  double s = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    const int sy = py + dy, ty = qy + dy;
    if (sy < 0 || sy >= q.src_h() || ty < 0 || ty >= q.dst_h()) continue;
    for (int dx = -r; dx <= r; ++dx) {
      const int sx = px + dx, tx = qx + dx;
      if (sx < 0 || sx >= q.src_w() || tx < 0 || tx >= q.dst_w()) continue;
      s += sqdist(q.fa.pixel(sy, sx), q.fb_prime.pixel(ty, tx));
      s += sqdist(q.fa_prime.pixel(sy, sx), q.fb.pixel(ty, tx));
    }
    if (s >= bound) return s;
  }
  return s;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  // Integer in [lo, hi].
  int uniform(int lo, int hi) {
    return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

 private:
  std::mt19937_64 gen_;
};

void check_field_against_quad(const FeatureQuad& quad, const NNField& f) {
  if (f.src_h != quad.src_h() || f.src_w != quad.src_w() || f.dst_h != quad.dst_h() || f.dst_w != quad.dst_w()) {
    throw std::invalid_argument("NNField dimensions do not match the feature quad");
  }
}

void brute_force_row(const FeatureQuad& quad, int radius, NNField& out, int py) {
  for (int px = 0; px < quad.src_w(); ++px) {
    double best = std::numeric_limits<double>::infinity();
    int bx = 0, by = 0;
    for (int qy = 0; qy < quad.dst_h(); ++qy)
      for (int qx = 0; qx < quad.dst_w(); ++qx) {
        const double c = bounded_cost(quad, px, py, qx, qy, radius, best);
        if (c < best) {
          best = c;
          bx = qx;
          by = qy;
        }
      }
    out.at(py, px) = {static_cast<float>(bx), static_cast<float>(by)};
    out.cost_at(py, px) = static_cast<float>(best);
  }
}

NNField brute_force_setup(const FeatureQuad& quad, int radius) {
  quad.validate();
  const auto evaluations = static_cast<std::uint64_t>(quad.src_h()) * quad.src_w() * quad.dst_h() * quad.dst_w();
  if (evaluations > kBruteForceLimit) {
    throw std::invalid_argument("brute_force_nnf: " + std::to_string(evaluations) +
                                " patch evaluations exceed the enumeration guard");
  }
  NNField f(quad.src_h(), quad.src_w(), quad.dst_h(), quad.dst_w(), radius);
  f.cost_stale = false;
  return f;
}

}  // namespace

double patch_cost(const FeatureQuad& quad, int px, int py, int qx, int qy, int radius) {
  if (px < 0 || py < 0 || px >= quad.src_w() || py >= quad.src_h() || qx < 0 || qy < 0 || qx >= quad.dst_w() ||
      qy >= quad.dst_h()) {
    throw std::out_of_range("patch_cost: coordinate outside its grid");
  }
  return bounded_cost(quad, px, py, qx, qy, radius, std::numeric_limits<double>::infinity());
}

NNField brute_force_nnf(const FeatureQuad& quad, int radius) {
  NNField f = brute_force_setup(quad, radius);
#pragma omp parallel for schedule(dynamic, 1)
  for (int py = 0; py < quad.src_h(); ++py) brute_force_row(quad, radius, f, py);
  return f;
}

namespace serial {
NNField brute_force_nnf(const FeatureQuad& quad, int radius) {
  NNField f = brute_force_setup(quad, radius);
  for (int py = 0; py < quad.src_h(); ++py) brute_force_row(quad, radius, f, py);
  return f;
}
}  // namespace serial

NNField random_nnf(int src_h, int src_w, int dst_h, int dst_w, int radius, std::uint64_t seed) {
  NNField f(src_h, src_w, dst_h, dst_w, radius);
  Rng rng(seed);
  for (Coord& c : f.mapping) {
    c.x = static_cast<float>(rng.uniform(0, dst_w - 1));
    c.y = static_cast<float>(rng.uniform(0, dst_h - 1));
  }
  f.cost_stale = true;
  return f;
}

void evaluate_costs(const FeatureQuad& quad, NNField& field) {
  check_field_against_quad(quad, field);
  field.cost.resize(field.mapping.size());
#pragma omp parallel for schedule(static) if (field.mapping.size() > 4096)
  for (int y = 0; y < field.src_h; ++y)
    for (int x = 0; x < field.src_w; ++x) {
      const Coord c = field.at(y, x);
      field.cost_at(y, x) = static_cast<float>(
          patch_cost(quad, x, y, static_cast<int>(std::lround(c.x)), static_cast<int>(std::lround(c.y)),
                     field.patch_radius));
    }
  field.cost_stale = false;
}

NNField patchmatch(const FeatureQuad& quad, const std::optional<NNField>& init, const PatchMatchOptions& options,
                   const PatchMatchHook& hook) {
  quad.validate();
  if (options.iterations < 1) throw std::invalid_argument("patchmatch: iterations must be >= 1");
  if (options.radius < 0) throw std::invalid_argument("patchmatch: negative patch radius");

  NNField f = init ? *init
                   : random_nnf(quad.src_h(), quad.src_w(), quad.dst_h(), quad.dst_w(), options.radius, options.seed);
  check_field_against_quad(quad, f);
  const int W = f.src_w, H = f.src_h, DW = f.dst_w, DH = f.dst_h, r = options.radius;
  const bool inset_x = options.interior_targets && DW > 2 * r, inset_y = options.interior_targets && DH > 2 * r;
  const int lo_x = inset_x ? r : 0, hi_x = inset_x ? DW - 1 - r : DW - 1;
  const int lo_y = inset_y ? r : 0, hi_y = inset_y ? DH - 1 - r : DH - 1;

  // Work on integer targets.
  std::vector<int> mx(f.mapping.size()), my(f.mapping.size());
  bool moved = false;
  for (std::size_t i = 0; i < f.mapping.size(); ++i) {
    mx[i] = std::clamp(static_cast<int>(std::lround(f.mapping[i].x)), lo_x, hi_x);
    my[i] = std::clamp(static_cast<int>(std::lround(f.mapping[i].y)), lo_y, hi_y);
    moved = moved || mx[i] != f.mapping[i].x || my[i] != f.mapping[i].y;
  }
  std::vector<double> cost(f.mapping.size());
  const bool reuse = !f.cost_stale && f.patch_radius == r && !moved;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      cost[i] = reuse ? static_cast<double>(f.cost[i]) : patch_cost(quad, x, y, mx[i], my[i], r);
    }
  f.patch_radius = r;

  Rng rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  const double max_radius =
      options.max_search_radius > 0 ? std::min(options.max_search_radius, std::max(DW, DH)) : std::max(DW, DH);

  auto publish = [&] {
    for (std::size_t i = 0; i < f.mapping.size(); ++i) {
      f.mapping[i] = {static_cast<float>(mx[i]), static_cast<float>(my[i])};
      f.cost[i] = static_cast<float>(cost[i]);
    }
    f.cost_stale = false;
  };

  for (int it = 0; it < options.iterations; ++it) {
    const bool forward = (it % 2) == 0;
    const int step = forward ? 1 : -1;
    for (int yy = 0; yy < H; ++yy) {
      const int y = forward ? yy : H - 1 - yy;
      for (int xx = 0; xx < W; ++xx) {
        const int x = forward ? xx : W - 1 - xx;
        const std::size_t i = static_cast<std::size_t>(y) * W + x;
        double best = cost[i];
        int bx = mx[i], by = my[i];

        auto consider = [&](int cx, int cy) {
          if (cx < lo_x || cy < lo_y || cx > hi_x || cy > hi_y || (cx == bx && cy == by)) return;
          const double c = bounded_cost(quad, x, y, cx, cy, r, best);
          if (c < best) {
            best = c;
            bx = cx;
            by = cy;
          }
        };

        // Propagation from the already-visited neighbours.
        const int nx = x - step;
        if (nx >= 0 && nx < W) {
          const std::size_t n = static_cast<std::size_t>(y) * W + nx;
          consider(mx[n] + step, my[n]);
        }
        const int ny = y - step;
        if (ny >= 0 && ny < H) {
          const std::size_t n = static_cast<std::size_t>(ny) * W + x;
          consider(mx[n], my[n] + step);
        }

        // Random search around the current best with a halving window.
        for (double rad = max_radius; rad >= 1.0; rad *= 0.5) {
          const int ri = static_cast<int>(rad);
          const int cx = std::clamp(bx + rng.uniform(-ri, ri), lo_x, hi_x);
          const int cy = std::clamp(by + rng.uniform(-ri, ri), lo_y, hi_y);
          consider(cx, cy);
        }

        mx[i] = bx;
        my[i] = by;
        cost[i] = best;
      }
    }
    if (hook) {
      publish();
      hook(it, f);
    }
  }
  publish();
  return f;
}

NNField upsample_nnf(const NNField& field, int new_src_h, int new_src_w, int new_dst_h, int new_dst_w) {
  if (new_src_h < field.src_h || new_src_w < field.src_w || new_dst_h < field.dst_h || new_dst_w < field.dst_w) {
    throw std::invalid_argument("upsample_nnf: new dimensions must not shrink");
  }
  NNField out(new_src_h, new_src_w, new_dst_h, new_dst_w, field.patch_radius);
  const double rsx = static_cast<double>(new_src_w) / field.src_w;
  const double rsy = static_cast<double>(new_src_h) / field.src_h;
  const double rdx = static_cast<double>(new_dst_w) / field.dst_w;
  const double rdy = static_cast<double>(new_dst_h) / field.dst_h;
  for (int y = 0; y < new_src_h; ++y) {
    const int py = std::min(field.src_h - 1, static_cast<int>(y / rsy));
    for (int x = 0; x < new_src_w; ++x) {
      const int px = std::min(field.src_w - 1, static_cast<int>(x / rsx));
      const Coord& q = field.at(py, px);
      const double ox = x - std::floor(px * rsx);
      const double oy = y - std::floor(py * rsy);
      const double tx = std::clamp(std::round(q.x * rdx + ox), 0.0, static_cast<double>(new_dst_w - 1));
      const double ty = std::clamp(std::round(q.y * rdy + oy), 0.0, static_cast<double>(new_dst_h - 1));
      out.at(y, x) = {static_cast<float>(tx), static_cast<float>(ty)};
    }
  }
  out.cost_stale = true;
  return out;
}

Tensor warp(const Tensor& source, const NNField& field) {
  if (source.height() != field.dst_h || source.width() != field.dst_w) {
    throw std::invalid_argument("warp: source " + source.shape_string() + " does not match the field target grid");
  }
  Tensor out(field.src_h, field.src_w, source.channels());
#pragma omp parallel for schedule(static) if (out.size() > 100000)
  for (int y = 0; y < field.src_h; ++y)
    for (int x = 0; x < field.src_w; ++x) {
      const Coord& c = field.at(y, x);
      sample_bilinear(source, c.x, c.y, out.pixel(y, x));
    }
  return out;
}

void write_nnf_binary(const std::filesystem::path& path, const NNField& field) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::int32_t header[5] = {field.src_h, field.src_w, field.dst_h, field.dst_w, field.patch_radius};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  for (const Coord& c : field.mapping) {
    const float xy[2] = {c.x, c.y};
    out.write(reinterpret_cast<const char*>(xy), sizeof(xy));
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

NNField read_nnf_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::int32_t header[5];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header))) throw std::runtime_error("truncated NNF header");
  NNField f(header[0], header[1], header[2], header[3], header[4]);
  for (Coord& c : f.mapping) {
    float xy[2];
    if (!in.read(reinterpret_cast<char*>(xy), sizeof(xy))) throw std::runtime_error("truncated NNF payload");
    c = {xy[0], xy[1]};
  }
  f.cost_stale = true;
  return f;
}

Tensor nnf_flow_image(const NNField& field) {
  Tensor img(field.src_h, field.src_w, 3);
  double max_mag = 0.0;
  for (int y = 0; y < field.src_h; ++y)
    for (int x = 0; x < field.src_w; ++x) {
      const Coord& c = field.at(y, x);
      max_mag = std::max(max_mag, std::hypot(double(c.x - x), double(c.y - y)));
    }
  for (int y = 0; y < field.src_h; ++y)
    for (int x = 0; x < field.src_w; ++x) {
      const Coord& c = field.at(y, x);
      const double dx = c.x - x, dy = c.y - y;
      const double sat = max_mag > 0.0 ? std::hypot(dx, dy) / max_mag : 0.0;
      double hue = (std::atan2(dy, dx) + std::numbers::pi) / (2.0 * std::numbers::pi) * 6.0;
      if (hue >= 6.0) hue -= 6.0;
      const int sector = static_cast<int>(hue);
      const double f = hue - sector;
      const double p = 1.0 - sat, q = 1.0 - sat * f, t = 1.0 - sat * (1.0 - f);
      double rgb[3];
      switch (sector) {
        case 0: rgb[0] = 1; rgb[1] = t; rgb[2] = p; break;
        case 1: rgb[0] = q; rgb[1] = 1; rgb[2] = p; break;
        case 2: rgb[0] = p; rgb[1] = 1; rgb[2] = t; break;
        case 3: rgb[0] = p; rgb[1] = q; rgb[2] = 1; break;
        case 4: rgb[0] = t; rgb[1] = p; rgb[2] = 1; break;
        default: rgb[0] = 1; rgb[1] = p; rgb[2] = q; break;
      }
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = static_cast<float>(rgb[ch]);
    }
  return img;
}

}  // namespace uaom
