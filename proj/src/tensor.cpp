#include "uaom/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace uaom {

Tensor::Tensor(int height, int width, int channels, float fill)
    : h_(height), w_(width), c_(channels) {
  if (height < 0 || width < 0 || channels < 0) {
    throw std::invalid_argument("Tensor: negative dimension");
  }
  data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

Tensor::Tensor(int height, int width, int channels, std::vector<float> data)
    : h_(height), w_(width), c_(channels), data_(std::move(data)) {
  if (height < 0 || width < 0 || channels < 0) {
    throw std::invalid_argument("Tensor: negative dimension");
  }
  if (data_.size() != static_cast<std::size_t>(height) * width * channels) {
    throw std::invalid_argument("Tensor: data length does not match " + shape_string());
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << h_ << "x" << w_ << "x" << c_;
  return os.str();
}

void ConvLayerSpec::validate() const {
  if (out_channels < 1 || in_channels < 1 || kernel_h < 1 || kernel_w < 1) {
    throw std::invalid_argument("conv layer: non-positive shape");
  }
  if (stride < 1) throw std::invalid_argument("conv layer: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv layer: padding must be >= 0");
  const auto expected = static_cast<std::size_t>(out_channels) * in_channels * kernel_h * kernel_w;
  if (weights.size() != expected) {
    throw std::invalid_argument("conv layer: weight blob has " + std::to_string(weights.size()) +
                                " values, expected " + std::to_string(expected));
  }
  if (bias.size() != static_cast<std::size_t>(out_channels)) {
    throw std::invalid_argument("conv layer: bias length mismatch");
  }
}

namespace {

// Weights rearranged to [ky][kx][in][out] so the innermost loop runs over
// contiguous output channels.
struct PackedConv {
  const ConvLayerSpec* layer;
  std::vector<double> w;

  explicit PackedConv(const ConvLayerSpec& l) : layer(&l) {
    w.resize(l.weights.size());
    for (int o = 0; o < l.out_channels; ++o)
      for (int i = 0; i < l.in_channels; ++i)
        for (int ky = 0; ky < l.kernel_h; ++ky)
          for (int kx = 0; kx < l.kernel_w; ++kx)
            w[((static_cast<std::size_t>(ky) * l.kernel_w + kx) * l.in_channels + i) * l.out_channels + o] =
                l.weight(o, i, ky, kx);
  }
};

void check_conv_shapes(const Tensor& input, const ConvLayerSpec& layer) {
  layer.validate();
  if (input.channels() != layer.in_channels) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(input.channels()) +
                                " channels, layer expects " + std::to_string(layer.in_channels));
  }
  if (layer.output_height(input.height()) < 1 || layer.output_width(input.width()) < 1 ||
      input.height() + 2 * layer.padding < layer.kernel_h ||
      input.width() + 2 * layer.padding < layer.kernel_w) {
    throw std::invalid_argument("conv2d: output would be empty for input " + input.shape_string());
  }
}

void conv_row(const Tensor& input, const PackedConv& pc, Tensor& out, int oy, std::vector<double>& acc) {
  const ConvLayerSpec& l = *pc.layer;
  const int O = l.out_channels;
  const int I = l.in_channels;
  for (int ox = 0; ox < out.width(); ++ox) {
    for (int o = 0; o < O; ++o) acc[o] = l.bias[o];
    for (int ky = 0; ky < l.kernel_h; ++ky) {
      const int iy = oy * l.stride - l.padding + ky;
      if (iy < 0 || iy >= input.height()) continue;
      for (int kx = 0; kx < l.kernel_w; ++kx) {
        const int ix = ox * l.stride - l.padding + kx;
        if (ix < 0 || ix >= input.width()) continue;
        const auto px = input.pixel(iy, ix);
        const double* wk = pc.w.data() + (static_cast<std::size_t>(ky) * l.kernel_w + kx) * I * O;
        for (int i = 0; i < I; ++i) {
          const double v = px[i];
          if (v == 0.0) continue;
          const double* wi = wk + static_cast<std::size_t>(i) * O;
          for (int o = 0; o < O; ++o) acc[o] += v * wi[o];
        }
      }
    }
    auto dst = out.pixel(oy, ox);
    for (int o = 0; o < O; ++o) {
      const float v = static_cast<float>(acc[o]);
      dst[o] = (l.has_relu && v < 0.0f) ? 0.0f : v;
    }
  }
}

// Gather form of the transposed convolution: each input element sums the
// output gradients it contributed to, so rows can be computed independently.
void conv_backward_row(const Tensor& grad_out, const PackedConv& pc, Tensor& grad_in, int iy,
                       std::vector<double>& acc) {
  const ConvLayerSpec& l = *pc.layer;
  const int O = l.out_channels;
  const int I = l.in_channels;
  for (int ix = 0; ix < grad_in.width(); ++ix) {
    std::fill(acc.begin(), acc.begin() + I, 0.0);
    for (int ky = 0; ky < l.kernel_h; ++ky) {
      const int ny = iy + l.padding - ky;
      if (ny < 0 || ny % l.stride != 0) continue;
      const int oy = ny / l.stride;
      if (oy >= grad_out.height()) continue;
      for (int kx = 0; kx < l.kernel_w; ++kx) {
        const int nx = ix + l.padding - kx;
        if (nx < 0 || nx % l.stride != 0) continue;
        const int ox = nx / l.stride;
        if (ox >= grad_out.width()) continue;
        const auto g = grad_out.pixel(oy, ox);
        const double* wk = pc.w.data() + (static_cast<std::size_t>(ky) * l.kernel_w + kx) * I * O;
        for (int i = 0; i < I; ++i) {
          const double* wi = wk + static_cast<std::size_t>(i) * O;
          double s = 0.0;
          for (int o = 0; o < O; ++o) s += g[o] * wi[o];
          acc[i] += s;
        }
      }
    }
    auto dst = grad_in.pixel(iy, ix);
    for (int i = 0; i < I; ++i) dst[i] = static_cast<float>(acc[i]);
  }
}

void normalize_pixel(std::span<const float> src, std::span<float> dst) {
  double sq = 0.0;
  for (float v : src) sq += static_cast<double>(v) * v;
  if (sq == 0.0) {
    std::fill(dst.begin(), dst.end(), 0.0f);
    return;
  }
  const double inv = 1.0 / std::sqrt(sq);
  for (std::size_t c = 0; c < src.size(); ++c) dst[c] = static_cast<float>(src[c] * inv);
}

}  // namespace

Tensor conv2d(const Tensor& input, const ConvLayerSpec& layer) {
  check_conv_shapes(input, layer);
  Tensor out(layer.output_height(input.height()), layer.output_width(input.width()), layer.out_channels);
  const PackedConv pc(layer);
  const long work = static_cast<long>(out.size()) * layer.in_channels * layer.kernel_h * layer.kernel_w;
#pragma omp parallel if (work > 200000)
  {
    std::vector<double> acc(layer.out_channels);
#pragma omp for schedule(static)
    for (int oy = 0; oy < out.height(); ++oy) conv_row(input, pc, out, oy, acc);
  }
  return out;
}

Tensor conv2d_backward_input(const Tensor& grad_output, const ConvLayerSpec& layer, int input_height,
                             int input_width) {
  layer.validate();
  if (grad_output.channels() != layer.out_channels ||
      grad_output.height() != layer.output_height(input_height) ||
      grad_output.width() != layer.output_width(input_width)) {
    throw std::invalid_argument("conv2d_backward_input: gradient shape mismatch");
  }
  Tensor grad_in(input_height, input_width, layer.in_channels);
  const PackedConv pc(layer);
  const long work = static_cast<long>(grad_output.size()) * layer.in_channels * layer.kernel_h * layer.kernel_w;
#pragma omp parallel if (work > 200000)
  {
    std::vector<double> acc(layer.in_channels);
#pragma omp for schedule(static)
    for (int iy = 0; iy < input_height; ++iy) conv_backward_row(grad_output, pc, grad_in, iy, acc);
  }
  return grad_in;
}

Tensor max_pool2(const Tensor& input) {
  if (input.height() < 2 || input.width() < 2) {
    throw std::invalid_argument("max_pool2: input " + input.shape_string() + " smaller than one window");
  }
  Tensor out(input.height() / 2, input.width() / 2, input.channels());
  for (int y = 0; y < out.height(); ++y) {
    for (int x = 0; x < out.width(); ++x) {
      auto dst = out.pixel(y, x);
      for (int c = 0; c < input.channels(); ++c) {
        dst[c] = std::max(std::max(input.at(2 * y, 2 * x, c), input.at(2 * y, 2 * x + 1, c)),
                          std::max(input.at(2 * y + 1, 2 * x, c), input.at(2 * y + 1, 2 * x + 1, c)));
      }
    }
  }
  return out;
}

Tensor max_pool2_backward(const Tensor& input, const Tensor& grad_output) {
  if (grad_output.height() != input.height() / 2 || grad_output.width() != input.width() / 2 ||
      grad_output.channels() != input.channels()) {
    throw std::invalid_argument("max_pool2_backward: shape mismatch");
  }
  Tensor grad_in(input.height(), input.width(), input.channels());
  for (int y = 0; y < grad_output.height(); ++y) {
    for (int x = 0; x < grad_output.width(); ++x) {
      for (int c = 0; c < input.channels(); ++c) {
        int by = 2 * y, bx = 2 * x;
        float best = input.at(by, bx, c);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const float v = input.at(2 * y + dy, 2 * x + dx, c);
            if (v > best) {
              best = v;
              by = 2 * y + dy;
              bx = 2 * x + dx;
            }
          }
        grad_in.at(by, bx, c) += grad_output.at(y, x, c);
      }
    }
  }
  return grad_in;
}

void sample_bilinear(const Tensor& input, float x, float y, std::span<float> out) {
  const float cx = std::clamp(x, 0.0f, static_cast<float>(input.width() - 1));
  const float cy = std::clamp(y, 0.0f, static_cast<float>(input.height() - 1));
  const int x0 = static_cast<int>(std::floor(cx));
  const int y0 = static_cast<int>(std::floor(cy));
  const int x1 = std::min(x0 + 1, input.width() - 1);
  const int y1 = std::min(y0 + 1, input.height() - 1);
  const float fx = cx - static_cast<float>(x0);
  const float fy = cy - static_cast<float>(y0);
  const auto p00 = input.pixel(y0, x0);
  if (fx == 0.0f && fy == 0.0f) {
    std::copy(p00.begin(), p00.end(), out.begin());
    return;
  }
  const auto p01 = input.pixel(y0, x1);
  const auto p10 = input.pixel(y1, x0);
  const auto p11 = input.pixel(y1, x1);
  for (int c = 0; c < input.channels(); ++c) {
    const float top = p00[c] + (p01[c] - p00[c]) * fx;
    const float bot = p10[c] + (p11[c] - p10[c]) * fx;
    out[c] = top + (bot - top) * fy;
  }
}

Tensor resize_bilinear(const Tensor& input, int new_height, int new_width) {
  if (new_height < 1 || new_width < 1) throw std::invalid_argument("resize_bilinear: target dims must be >= 1");
  if (input.empty()) throw std::invalid_argument("resize_bilinear: empty input");
  if (new_height == input.height() && new_width == input.width()) return input;
  Tensor out(new_height, new_width, input.channels());
  const double sy = static_cast<double>(input.height()) / new_height;
  const double sx = static_cast<double>(input.width()) / new_width;
  for (int y = 0; y < new_height; ++y) {
    const auto fy = static_cast<float>((y + 0.5) * sy - 0.5);
    for (int x = 0; x < new_width; ++x) {
      const auto fx = static_cast<float>((x + 0.5) * sx - 0.5);
      sample_bilinear(input, fx, fy, out.pixel(y, x));
    }
  }
  return out;
}

Tensor normalize_positionwise(const Tensor& input) {
  Tensor out(input.height(), input.width(), input.channels());
#pragma omp parallel for schedule(static) if (input.size() > 100000)
  for (int y = 0; y < input.height(); ++y)
    for (int x = 0; x < input.width(); ++x) normalize_pixel(input.pixel(y, x), out.pixel(y, x));
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out = input;
  for (float& v : out.data()) v = v < 0.0f ? 0.0f : v;
  return out;
}

namespace serial {

Tensor conv2d(const Tensor& input, const ConvLayerSpec& layer) {
  check_conv_shapes(input, layer);
  Tensor out(layer.output_height(input.height()), layer.output_width(input.width()), layer.out_channels);
  const PackedConv pc(layer);
  std::vector<double> acc(layer.out_channels);
  for (int oy = 0; oy < out.height(); ++oy) conv_row(input, pc, out, oy, acc);
  return out;
}

Tensor conv2d_backward_input(const Tensor& grad_output, const ConvLayerSpec& layer, int input_height,
                             int input_width) {
  layer.validate();
  if (grad_output.channels() != layer.out_channels ||
      grad_output.height() != layer.output_height(input_height) ||
      grad_output.width() != layer.output_width(input_width)) {
    throw std::invalid_argument("conv2d_backward_input: gradient shape mismatch");
  }
  Tensor grad_in(input_height, input_width, layer.in_channels);
  const PackedConv pc(layer);
  std::vector<double> acc(layer.in_channels);
  for (int iy = 0; iy < input_height; ++iy) conv_backward_row(grad_output, pc, grad_in, iy, acc);
  return grad_in;
}

Tensor normalize_positionwise(const Tensor& input) {
  Tensor out(input.height(), input.width(), input.channels());
  for (int y = 0; y < input.height(); ++y)
    for (int x = 0; x < input.width(); ++x) normalize_pixel(input.pixel(y, x), out.pixel(y, x));
  return out;
}

}  // namespace serial

}  // namespace uaom
