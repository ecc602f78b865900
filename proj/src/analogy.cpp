#include "uaom/analogy.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace uaom {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Forward through one segment keeping every intermediate activation
// (acts[0] is the input, acts.back() the segment output).
std::vector<Tensor> segment_activations(const NetworkModel& model, const Tensor& r, int level) {
  const auto [first, last] = segment_range(model, level - 1, level);
  std::vector<Tensor> acts;
  acts.reserve(last - first + 1);
  acts.push_back(r);
  for (std::size_t li = first; li < last; ++li) {
    const Layer& layer = model.layers[li];
    acts.push_back(layer.kind == LayerKind::kConv ? conv2d(acts.back(), layer.conv) : max_pool2(acts.back()));
  }
  return acts;
}

double squared_residual(const Tensor& out, const Tensor& target) {
  if (!out.same_shape(target)) {
    throw std::invalid_argument("deconvolve: target " + target.shape_string() + " does not match segment output " +
                                out.shape_string());
  }
  // Row partial sums reduced in a fixed order.
  std::vector<double> rows(static_cast<std::size_t>(out.height()), 0.0);
  const std::size_t row_len = static_cast<std::size_t>(out.width()) * out.channels();
  for (int y = 0; y < out.height(); ++y) {
    double s = 0.0;
    const float* a = out.data().data() + y * row_len;
    const float* b = target.data().data() + y * row_len;
    for (std::size_t i = 0; i < row_len; ++i) {
      const double d = static_cast<double>(a[i]) - b[i];
      s += d * d;
    }
    rows[static_cast<std::size_t>(y)] = s;
  }
  double total = 0.0;
  for (double s : rows) total += s;
  return total;
}

int level_channels(const NetworkModel& model, int level) {
  int channels = model.input_spec.channels;
  const std::size_t tap = model.tap_layer.at(static_cast<std::size_t>(level - 1));
  for (std::size_t li = 0; li <= tap; ++li)
    if (model.layers[li].kind == LayerKind::kConv) channels = model.layers[li].conv.out_channels;
  return channels;
}

}  // namespace

void AnalogyConfig::validate() const {
  if (levels != kPyramidLevels) throw std::invalid_argument("AnalogyConfig: only five-level pyramids are supported");
  for (double a : alpha)
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("AnalogyConfig: alpha must lie in [0, 1]");
  for (int r : patch_radius)
    if (r < 0) throw std::invalid_argument("AnalogyConfig: negative patch radius");
  if (pm_iterations < 1 || deconv_iterations < 1)
    throw std::invalid_argument("AnalogyConfig: iteration counts must be >= 1");
  if (search_radius < 0) throw std::invalid_argument("AnalogyConfig: negative search radius");
  if (!(deconv_step > 0.0)) throw std::invalid_argument("AnalogyConfig: deconv_step must be positive");
  if (!(weight_kappa >= 0.0)) throw std::invalid_argument("AnalogyConfig: weight_kappa must be non-negative");
}

std::uint64_t level_seed(std::uint64_t base, int level, int direction) {
  return splitmix64(base * 31 + static_cast<std::uint64_t>(level) * 7 + static_cast<std::uint64_t>(direction));
}

AnalogyState init_coarsest(const FeaturePyramid& pyr_a, const FeaturePyramid& pyr_b, const AnalogyConfig& cfg) {
  cfg.validate();
  for (int l = 1; l <= kPyramidLevels; ++l) {
    if (pyr_a.level(l).empty() || pyr_b.level(l).empty() ||
        pyr_a.level(l).channels() != pyr_b.level(l).channels()) {
      throw std::invalid_argument("init_coarsest: pyramids disagree at level " + std::to_string(l));
    }
  }
  AnalogyState s;
  s.level = kPyramidLevels;
  s.pyr_a = pyr_a;
  s.pyr_b = pyr_b;
  s.fa_prime = pyr_a.level(kPyramidLevels);
  s.fb_prime = pyr_b.level(kPyramidLevels);
  const Tensor& a5 = s.fa_prime;
  const Tensor& b5 = s.fb_prime;
  const int r = cfg.radius_at(kPyramidLevels);
  s.phi_ab = random_nnf(a5.height(), a5.width(), b5.height(), b5.width(), r, level_seed(cfg.rng_seed, 5, 2));
  s.phi_ba = random_nnf(b5.height(), b5.width(), a5.height(), a5.width(), r, level_seed(cfg.rng_seed, 5, 3));
  return s;
}

double deconv_objective(const NetworkModel& model, const Tensor& r, int level, const Tensor& target) {
  return squared_residual(forward_segment(model, r, level - 1, level), target);
}

Tensor deconv_gradient(const NetworkModel& model, const Tensor& r, int level, const Tensor& target) {
  const auto acts = segment_activations(model, r, level);
  const Tensor& out = acts.back();
  if (!out.same_shape(target)) throw std::invalid_argument("deconv_gradient: target shape mismatch");
  Tensor grad(out.height(), out.width(), out.channels());
  for (std::size_t i = 0; i < out.size(); ++i) grad.data()[i] = 2.0f * (out.data()[i] - target.data()[i]);

  const auto [first, last] = segment_range(model, level - 1, level);
  for (std::size_t li = last; li-- > first;) {
    const Layer& layer = model.layers[li];
    const Tensor& in = acts[li - first];
    const Tensor& post = acts[li - first + 1];
    if (layer.kind == LayerKind::kMaxPool) {
      grad = max_pool2_backward(in, grad);
      continue;
    }
    if (layer.conv.has_relu) {
      for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(post.data()[i] > 0.0f)) grad.data()[i] = 0.0f;
    }
    grad = conv2d_backward_input(grad, layer.conv, in.height(), in.width());
  }
  return grad;
}

Tensor deconv_initial_guess(const NetworkModel& model, const Tensor& target, int level, int out_h, int out_w) {
  const auto [first, last] = segment_range(model, level - 1, level);
  Tensor cur = resize_bilinear(target, out_h, out_w);
  for (std::size_t li = last; li-- > first;) {
    const Layer& layer = model.layers[li];
    if (layer.kind != LayerKind::kConv) continue;
    const ConvLayerSpec& c = layer.conv;
    // Kernel-summed weights, applied transposed: out channels -> in channels.
    std::vector<double> m(static_cast<std::size_t>(c.out_channels) * c.in_channels, 0.0);
    for (int o = 0; o < c.out_channels; ++o)
      for (int i = 0; i < c.in_channels; ++i)
        for (int ky = 0; ky < c.kernel_h; ++ky)
          for (int kx = 0; kx < c.kernel_w; ++kx)
            m[static_cast<std::size_t>(o) * c.in_channels + i] += c.weight(o, i, ky, kx);
    Tensor next(cur.height(), cur.width(), c.in_channels);
    for (int y = 0; y < cur.height(); ++y)
      for (int x = 0; x < cur.width(); ++x) {
        const auto src = cur.pixel(y, x);
        auto dst = next.pixel(y, x);
        for (int i = 0; i < c.in_channels; ++i) {
          double s = 0.0;
          for (int o = 0; o < c.out_channels; ++o) s += m[static_cast<std::size_t>(o) * c.in_channels + i] * src[o];
          dst[i] = static_cast<float>(s);
        }
      }
    cur = std::move(next);
  }
  return relu(cur);
}

DeconvResult deconvolve(const NetworkModel& model, const Tensor& target, int level, int out_h, int out_w,
                        const AnalogyConfig& cfg, const std::optional<Tensor>& init) {
  if (level < 2 || level > kPyramidLevels) throw std::invalid_argument("deconvolve: level must be in [2, 5]");
  if (target.channels() != level_channels(model, level)) {
    throw std::invalid_argument("deconvolve: target has " + std::to_string(target.channels()) +
                                " channels, level " + std::to_string(level) + " has " +
                                std::to_string(level_channels(model, level)));
  }
  DeconvResult res;
  res.features = init ? *init : deconv_initial_guess(model, target, level, out_h, out_w);
  if (res.features.height() != out_h || res.features.width() != out_w ||
      res.features.channels() != level_channels(model, level - 1)) {
    throw std::invalid_argument("deconvolve: initial guess has the wrong shape");
  }
  double f = deconv_objective(model, res.features, level, target);
  if (!std::isfinite(f)) throw std::runtime_error("deconvolve: non-finite objective at level " + std::to_string(level));
  res.trace.push_back(f);

  double step = cfg.deconv_step;
  Tensor grad;
  bool need_grad = true;
  for (int it = 0; it < cfg.deconv_iterations && f > 0.0; ++it) {
    if (need_grad) {
      grad = deconv_gradient(model, res.features, level, target);
      if (!grad.all_finite()) {
        throw std::runtime_error("deconvolve: non-finite gradient at level " + std::to_string(level) +
                                 " iteration " + std::to_string(it));
      }
      need_grad = false;
    }
    Tensor cand = res.features;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      const float v = cand.data()[i] - static_cast<float>(step) * grad.data()[i];
      cand.data()[i] = v > 0.0f ? v : 0.0f;
    }
    const double fc = deconv_objective(model, cand, level, target);
    if (fc < f) {
      res.features = std::move(cand);
      f = fc;
      res.trace.push_back(f);
      ++res.accepted_steps;
      need_grad = true;
      step *= 1.2;
    } else {
      step *= 0.5;
      if (step < 1e-20) break;
    }
  }
  for (float& v : res.features.data()) v = v > 0.0f ? v : 0.0f;
  return res;
}

Tensor weight_map(const Tensor& content, double alpha, const AnalogyConfig& cfg) {
  Tensor w(content.height(), content.width(), 1);
  std::vector<double> m(static_cast<std::size_t>(content.height()) * content.width(), 0.0);
  double max_m = 0.0;
  for (int y = 0; y < content.height(); ++y)
    for (int x = 0; x < content.width(); ++x) {
      double s = 0.0;
      for (float v : content.pixel(y, x)) s += static_cast<double>(v) * v;
      m[static_cast<std::size_t>(y) * content.width() + x] = s;
      max_m = std::max(max_m, s);
    }
  for (int y = 0; y < content.height(); ++y)
    for (int x = 0; x < content.width(); ++x) {
      const double mm = max_m > 0.0 ? m[static_cast<std::size_t>(y) * content.width() + x] / max_m : 0.0;
      const double sig = 1.0 / (1.0 + std::exp(-cfg.weight_kappa * (mm - cfg.weight_tau)));
      w.at(y, x, 0) = static_cast<float>(alpha * sig);
    }
  return w;
}

Tensor blend(const Tensor& content, const Tensor& warped_style, const Tensor& w) {
  if (!content.same_shape(warped_style) || !content.same_spatial(w) || w.channels() != 1) {
    throw std::invalid_argument("blend: dimension mismatch between content " + content.shape_string() + ", style " +
                                warped_style.shape_string() + " and weights " + w.shape_string());
  }
  Tensor out(content.height(), content.width(), content.channels());
  for (int y = 0; y < content.height(); ++y)
    for (int x = 0; x < content.width(); ++x) {
      const double wv = w.at(y, x, 0);
      const auto c = content.pixel(y, x);
      const auto s = warped_style.pixel(y, x);
      auto o = out.pixel(y, x);
      // Both products are exact in double, so the result rounds once.
      for (int ch = 0; ch < content.channels(); ++ch)
        o[ch] = static_cast<float>(c[ch] * wv + s[ch] * (1.0 - wv));
    }
  return out;
}

Tensor vote_reconstruct(const Tensor& style, const NNField& field) {
  if (style.height() != field.dst_h || style.width() != field.dst_w) {
    throw std::invalid_argument("vote_reconstruct: style image does not match the field target grid");
  }
  const int C = style.channels();
  std::vector<double> acc(static_cast<std::size_t>(field.src_h) * field.src_w * C, 0.0);
  std::vector<int> count(static_cast<std::size_t>(field.src_h) * field.src_w, 0);
  std::vector<float> sample(static_cast<std::size_t>(C));
  for (int sy = 0; sy < field.src_h; ++sy)
    for (int sx = 0; sx < field.src_w; ++sx) {
      const Coord q = field.at(sy, sx);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ty = sy + dy, tx = sx + dx;
          const float uy = q.y + static_cast<float>(dy), ux = q.x + static_cast<float>(dx);
          if (ty < 0 || ty >= field.src_h || tx < 0 || tx >= field.src_w) continue;
          if (uy < 0.0f || ux < 0.0f || uy > static_cast<float>(field.dst_h - 1) ||
              ux > static_cast<float>(field.dst_w - 1))
            continue;
          sample_bilinear(style, ux, uy, sample);
          const std::size_t t = static_cast<std::size_t>(ty) * field.src_w + tx;
          for (int c = 0; c < C; ++c) acc[t * C + c] += sample[static_cast<std::size_t>(c)];
          ++count[t];
        }
    }
  Tensor out(field.src_h, field.src_w, C);
  for (std::size_t t = 0; t < count.size(); ++t)
    for (int c = 0; c < C; ++c)
      out.data()[t * C + c] = count[t] > 0 ? static_cast<float>(acc[t * C + c] / count[t]) : 0.0f;
  return out;
}

LatentPair reconstruct_latent(const Tensor& img_a, const Tensor& img_b, const NNField& phi_ab,
                              const NNField& phi_ba) {
  auto fit = [](const NNField& f, const Tensor& src, const Tensor& dst) {
    if (f.src_h == src.height() && f.src_w == src.width() && f.dst_h == dst.height() && f.dst_w == dst.width())
      return f;
    if (f.src_h <= src.height() && f.src_w <= src.width() && f.dst_h <= dst.height() && f.dst_w <= dst.width())
      return upsample_nnf(f, src.height(), src.width(), dst.height(), dst.width());
    throw std::invalid_argument("reconstruct_latent: field does not fit the image grids");
  };
  const NNField ab = fit(phi_ab, img_a, img_b);
  const NNField ba = fit(phi_ba, img_b, img_a);
  return {vote_reconstruct(img_b, ab), vote_reconstruct(img_a, ba)};
}

AnalogyResult run_analogy(const Tensor& img_a, const Tensor& img_b, const NetworkModel& model,
                          const AnalogyConfig& cfg) {
  cfg.validate();
  AnalogyResult result;
  auto t0 = std::chrono::steady_clock::now();
  FeaturePyramid pyr_a, pyr_b;
#pragma omp parallel sections
  {
#pragma omp section
    pyr_a = extract_pyramid(model, img_a);
#pragma omp section
    pyr_b = extract_pyramid(model, img_b);
  }
  result.pyramid_seconds = seconds_since(t0);

  AnalogyState s = init_coarsest(pyr_a, pyr_b, cfg);
  for (int L = kPyramidLevels; L >= 1; --L) {
    const auto tl = std::chrono::steady_clock::now();
    LevelReport rep;
    rep.level = L;
    const Tensor& fa = pyr_a.level(L);
    const Tensor& fb = pyr_b.level(L);
    const FeatureQuad quad_ab = make_quad(fa, s.fb_prime, s.fa_prime, fb);
    const FeatureQuad quad_ba = make_quad(fb, s.fa_prime, s.fb_prime, fa);
    const int search = L == cfg.levels ? 0 : cfg.search_radius;
    const PatchMatchOptions opt_ab{cfg.pm_iterations, cfg.radius_at(L), level_seed(cfg.rng_seed, L, 0), true, search};
    const PatchMatchOptions opt_ba{cfg.pm_iterations, cfg.radius_at(L), level_seed(cfg.rng_seed, L, 1), true, search};
    NNField phi_ab, phi_ba;
#pragma omp parallel sections
    {
#pragma omp section
      phi_ab = patchmatch(quad_ab, s.phi_ab, opt_ab);
#pragma omp section
      phi_ba = patchmatch(quad_ba, s.phi_ba, opt_ba);
    }
    rep.cost_ab = phi_ab.total_cost();
    rep.cost_ba = phi_ba.total_cost();

    if (L > 1) {
      const Tensor& fa_lo = pyr_a.level(L - 1);
      const Tensor& fb_lo = pyr_b.level(L - 1);
      NNField up_ab = upsample_nnf(phi_ab, fa_lo.height(), fa_lo.width(), fb_lo.height(), fb_lo.width());
      NNField up_ba = upsample_nnf(phi_ba, fb_lo.height(), fb_lo.width(), fa_lo.height(), fa_lo.width());
      Tensor fa_prime_lo, fb_prime_lo;
#pragma omp parallel sections
      {
#pragma omp section
        {
          const Tensor rb = warp(fb, phi_ab);
          DeconvResult d = deconvolve(model, rb, L, fa_lo.height(), fa_lo.width(), cfg, warp(fb_lo, up_ab));
          const Tensor w = weight_map(fa_lo, cfg.alpha_at(L - 1), cfg);
          fa_prime_lo = blend(fa_lo, d.features, w);
          rep.deconv_trace_b = std::move(d.trace);
          double sum = 0.0;
          for (float v : w.data()) sum += v;
          rep.mean_weight_a = sum / static_cast<double>(w.size());
        }
#pragma omp section
        {
          const Tensor ra = warp(fa, phi_ba);
          DeconvResult d = deconvolve(model, ra, L, fb_lo.height(), fb_lo.width(), cfg, warp(fa_lo, up_ba));
          const Tensor w = weight_map(fb_lo, cfg.alpha_at(L - 1), cfg);
          fb_prime_lo = blend(fb_lo, d.features, w);
          rep.deconv_trace_a = std::move(d.trace);
          double sum = 0.0;
          for (float v : w.data()) sum += v;
          rep.mean_weight_b = sum / static_cast<double>(w.size());
        }
      }
      s.fa_prime = std::move(fa_prime_lo);
      s.fb_prime = std::move(fb_prime_lo);
      s.phi_ab = std::move(up_ab);
      s.phi_ba = std::move(up_ba);
      s.level = L - 1;
    } else {
      s.phi_ab = std::move(phi_ab);
      s.phi_ba = std::move(phi_ba);
    }
    rep.seconds = seconds_since(tl);
    result.levels.push_back(std::move(rep));
  }

  const auto tr = std::chrono::steady_clock::now();
  LatentPair latents = reconstruct_latent(img_a, img_b, s.phi_ab, s.phi_ba);
  result.reconstruct_seconds = seconds_since(tr);
  result.latent_a = std::move(latents.latent_a);
  result.latent_b = std::move(latents.latent_b);
  result.phi_ab = std::move(s.phi_ab);
  result.phi_ba = std::move(s.phi_ba);
  return result;
}

}  // namespace uaom
