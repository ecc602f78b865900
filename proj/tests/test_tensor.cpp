#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "uaom/tensor.hpp"

using namespace uaom;

namespace {

// Direct evaluation of the convolution sum, one output element at a time.
Tensor conv_oracle(const Tensor& x, const ConvLayerSpec& c) {
  const int oh = (x.height() + 2 * c.padding - c.kernel_h) / c.stride + 1;
  const int ow = (x.width() + 2 * c.padding - c.kernel_w) / c.stride + 1;
  Tensor y(oh, ow, c.out_channels);
  for (int o = 0; o < c.out_channels; ++o)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        long double s = c.bias[static_cast<std::size_t>(o)];
        for (int i = 0; i < c.in_channels; ++i)
          for (int ky = 0; ky < c.kernel_h; ++ky)
            for (int kx = 0; kx < c.kernel_w; ++kx) {
              const int iy = oy * c.stride + ky - c.padding;
              const int ix = ox * c.stride + kx - c.padding;
              if (iy < 0 || ix < 0 || iy >= x.height() || ix >= x.width()) continue;
              const std::size_t widx =
                  ((static_cast<std::size_t>(o) * c.in_channels + i) * c.kernel_h + ky) * c.kernel_w + kx;
              s += static_cast<long double>(x.at(iy, ix, i)) * c.weights[widx];
            }
        if (c.has_relu && s < 0) s = 0;
        y.at(oy, ox, o) = static_cast<float>(s);
      }
  return y;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data()[i]) * b.data()[i];
  return s;
}

}  // namespace

TEST_CASE("conv2d matches the direct sum for assorted shapes") {
  struct Case {
    int h, w, in, out, k, stride, pad;
    bool relu;
  };
  const Case cases[] = {{7, 9, 3, 4, 3, 1, 1, true},  {8, 8, 2, 5, 3, 2, 1, false}, {5, 6, 1, 1, 1, 1, 0, false},
                        {10, 7, 4, 3, 5, 1, 2, true}, {9, 9, 3, 2, 3, 3, 0, false}, {32, 32, 1, 8, 8, 1, 0, false}};
  std::uint64_t seed = 1;
  for (const Case& cs : cases) {
    const Tensor x = testing::random_tensor(cs.h, cs.w, cs.in, seed++);
    const ConvLayerSpec c = testing::random_conv(cs.in, cs.out, cs.k, cs.stride, cs.pad, cs.relu, seed++);
    const Tensor got = conv2d(x, c);
    const Tensor want = conv_oracle(x, c);
    REQUIRE(got.same_shape(want));
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-5));
  }
}

TEST_CASE("parallel and serial kernels agree bit for bit") {
  const Tensor x = testing::random_tensor(64, 80, 8, 3);
  const ConvLayerSpec c = testing::random_conv(8, 16, 3, 1, 1, true, 4);
  CHECK(conv2d(x, c) == serial::conv2d(x, c));
  const Tensor g = testing::random_tensor(64, 80, 16, 5);
  CHECK(conv2d_backward_input(g, c, 64, 80) == serial::conv2d_backward_input(g, c, 64, 80));
  CHECK(normalize_positionwise(x) == serial::normalize_positionwise(x));
}

TEST_CASE("conv2d rejects a channel mismatch") {
  const Tensor x = testing::random_tensor(4, 4, 2, 1);
  const ConvLayerSpec c = testing::random_conv(3, 1, 3, 1, 1, false, 2);
  CHECK_THROWS_AS(conv2d(x, c), std::invalid_argument);
}

TEST_CASE("backward pass is the adjoint of the linear convolution") {
  for (int stride : {1, 2}) {
    ConvLayerSpec c = testing::random_conv(3, 5, 3, stride, 1, false, 10 + stride);
    std::fill(c.bias.begin(), c.bias.end(), 0.0f);
    const Tensor x = testing::random_tensor(9, 11, 3, 20 + stride);
    const Tensor y = conv2d(x, c);
    const Tensor g = testing::random_tensor(y.height(), y.width(), y.channels(), 30 + stride);
    const Tensor gx = conv2d_backward_input(g, c, x.height(), x.width());
    REQUIRE(gx.same_shape(x));
    CHECK(dot(y, g) == doctest::Approx(dot(x, gx)).epsilon(1e-5));
  }
}

TEST_CASE("max pooling floors odd sizes and routes gradients to the first maximum") {
  Tensor x(3, 5, 1);
  x.at(0, 0, 0) = 1.0f;
  x.at(1, 1, 0) = 1.0f;  // tie with (0, 0): the first one wins
  x.at(0, 3, 0) = 2.0f;
  const Tensor y = max_pool2(x);
  REQUIRE(y.height() == 1);
  REQUIRE(y.width() == 2);
  CHECK(y.at(0, 0, 0) == 1.0f);
  CHECK(y.at(0, 1, 0) == 2.0f);
  const Tensor g = max_pool2_backward(x, Tensor(1, 2, 1, 1.0f));
  CHECK(g.at(0, 0, 0) == 1.0f);
  CHECK(g.at(1, 1, 0) == 0.0f);
  CHECK(g.at(0, 3, 0) == 1.0f);
  double total = 0.0;
  for (float v : g.data()) total += v;
  CHECK(total == 2.0);
}

TEST_CASE("bilinear resize uses pixel-centre alignment") {
  const Tensor x = testing::random_tensor(6, 7, 2, 7);
  CHECK(resize_bilinear(x, 6, 7) == x);

  const Tensor up = resize_bilinear(x, 13, 9);
  for (int y = 0; y < 13; ++y)
    for (int xx = 0; xx < 9; ++xx) {
      const double sy = std::clamp((y + 0.5) * 6 / 13 - 0.5, 0.0, 5.0);
      const double sx = std::clamp((xx + 0.5) * 7 / 9 - 0.5, 0.0, 6.0);
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const int y1 = std::min(y0 + 1, 5), x1 = std::min(x0 + 1, 6);
      const double fy = sy - y0, fx = sx - x0;
      for (int c = 0; c < 2; ++c) {
        const double v = (1 - fy) * ((1 - fx) * x.at(y0, x0, c) + fx * x.at(y0, x1, c)) +
                         fy * ((1 - fx) * x.at(y1, x0, c) + fx * x.at(y1, x1, c));
        CHECK(up.at(y, xx, c) == doctest::Approx(v).epsilon(1e-6));
      }
    }
}

TEST_CASE("sample_bilinear is exact at integer positions and clamps outside") {
  const Tensor x = testing::random_tensor(4, 5, 3, 8);
  float out[3];
  sample_bilinear(x, 2.0f, 3.0f, out);
  for (int c = 0; c < 3; ++c) CHECK(out[c] == x.at(3, 2, c));
  sample_bilinear(x, -4.0f, 10.0f, out);
  for (int c = 0; c < 3; ++c) CHECK(out[c] == x.at(3, 0, c));
}

TEST_CASE("normalize_positionwise gives unit vectors and keeps zeros") {
  Tensor x = testing::random_tensor(5, 5, 4, 9);
  for (int c = 0; c < 4; ++c) x.at(2, 2, c) = 0.0f;
  const Tensor n = normalize_positionwise(x);
  for (int y = 0; y < 5; ++y)
    for (int xx = 0; xx < 5; ++xx) {
      double s = 0.0;
      for (float v : n.pixel(y, xx)) s += static_cast<double>(v) * v;
      if (y == 2 && xx == 2)
        CHECK(s == 0.0);
      else
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("layer validation catches inconsistent weights") {
  ConvLayerSpec c = testing::random_conv(2, 3, 3, 1, 1, false, 1);
  CHECK_NOTHROW(c.validate());
  c.weights.pop_back();
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = testing::random_conv(2, 3, 3, 0, 1, false, 1);
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
