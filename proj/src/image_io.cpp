#include "uaom/image_io.hpp"

#include "uaom/features.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace uaom {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  auto* err = static_cast<std::string*>(png_get_error_ptr(png));
  if (err) *err = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
  FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw ImageIoError("cannot open image " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ImageIoError("not a PNG file: " + path.string());

  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw ImageIoError("libpng initialisation failed");

  std::vector<unsigned char> buf;
  std::vector<png_bytep> rows;
  png_uint_32 w = 0, h = 0;
  int channels = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("corrupt PNG " + path.string() + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_strip_16(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png), png_set_strip_alpha(png);
  png_read_update_info(png, info);
  w = png_get_image_width(png, info);
  h = png_get_image_height(png, info);
  channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buf.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = buf.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (channels != 1 && channels != 3) throw ImageIoError("unsupported PNG layout in " + path.string());
  Tensor out(static_cast<int>(h), static_cast<int>(w), channels);
  for (png_uint_32 y = 0; y < h; ++y)
    for (png_uint_32 x = 0; x < w * static_cast<png_uint_32>(channels); ++x)
      out.data()[y * w * channels + x] = rows[y][x] / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  if (image.channels() != 1 && image.channels() != 3)
    throw std::invalid_argument("write_png: expected 1 or 3 channels, got " + image.shape_string());
  const int w = image.width(), h = image.height(), c = image.channels();
  std::vector<unsigned char> buf(image.size());
  for (std::size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<unsigned char>(std::lround(std::clamp(image.data()[i], 0.0f, 1.0f) * 255.0f));

  FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw ImageIoError("cannot write image " + path.string());
  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  if (!png || !info) throw ImageIoError("libpng initialisation failed");
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * w * c;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed writing " + path.string() + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Tensor to_gray(const Tensor& image) {
  if (image.channels() == 1) return image;
  if (image.channels() != 3) throw std::invalid_argument("to_gray: expected 1 or 3 channels");
  Tensor g(image.height(), image.width(), 1);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      const auto p = image.pixel(y, x);
      g.at(y, x, 0) = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
    }
  return g;
}

Tensor replicate_channels(const Tensor& gray, int channels) {
  if (gray.channels() != 1) throw std::invalid_argument("replicate_channels: expected one channel");
  Tensor out(gray.height(), gray.width(), channels);
  for (int y = 0; y < gray.height(); ++y)
    for (int x = 0; x < gray.width(); ++x)
      for (int c = 0; c < channels; ++c) out.at(y, x, c) = gray.at(y, x, 0);
  return out;
}

Tensor channel_mean(const Tensor& image) {
  Tensor out(image.height(), image.width(), 1);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x) {
      double s = 0.0;
      for (float v : image.pixel(y, x)) s += v;
      out.at(y, x, 0) = static_cast<float>(s / image.channels());
    }
  return out;
}

Tensor limit_size(const Tensor& image, int max_side, double& to_original) {
  const int side = std::max(image.height(), image.width());
  to_original = 1.0;
  if (max_side <= 0 || side <= max_side) return image;
  const double s = static_cast<double>(max_side) / side;
  const int nh = std::max(1, static_cast<int>(std::lround(image.height() * s)));
  const int nw = std::max(1, static_cast<int>(std::lround(image.width() * s)));
  to_original = static_cast<double>(side) / max_side;
  // Light pre-blur against aliasing before the bilinear decimation.
  return resize_bilinear(gaussian_blur(image, 0.5 * (to_original - 1.0)), nh, nw);
}

}  // namespace uaom
