#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace uaom {

/// Dense height x width x channels float tensor, row-major (y, x, c).
///
/// Channel vectors of one pixel are contiguous, which is what the NNF
/// and descriptor inner loops want.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int height, int width, int channels, float fill = 0.0f);
  Tensor(int height, int width, int channels, std::vector<float> data);

  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  float at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<float> pixel(int y, int x) {
    return {data_.data() + index(y, x, 0), static_cast<std::size_t>(c_)};
  }
  std::span<const float> pixel(int y, int x) const {
    return {data_.data() + index(y, x, 0), static_cast<std::size_t>(c_)};
  }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  const std::vector<float>& values() const { return data_; }

  bool same_shape(const Tensor& other) const {
    return h_ == other.h_ && w_ == other.w_ && c_ == other.c_;
  }
  bool same_spatial(const Tensor& other) const {
    return h_ == other.h_ && w_ == other.w_;
  }
  bool all_finite() const;

  std::string shape_string() const;

  bool operator==(const Tensor& other) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(w_) +
            static_cast<std::size_t>(x)) *
               static_cast<std::size_t>(c_) +
           static_cast<std::size_t>(c);
  }

  int h_ = 0;
  int w_ = 0;
  int c_ = 0;
  std::vector<float> data_;
};

/// One convolution of a linear chain. Weights are stored
/// [out][in][kernel_h][kernel_w], the layout PyTorch checkpoints use.
struct ConvLayerSpec {
  int out_channels = 0;
  int in_channels = 0;
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int padding = 0;
  bool has_relu = false;
  std::vector<float> weights;
  std::vector<float> bias;

  /// Throws std::invalid_argument when the invariants do not hold.
  void validate() const;

  int output_height(int in_h) const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  int output_width(int in_w) const { return (in_w + 2 * padding - kernel_w) / stride + 1; }

  float weight(int o, int i, int ky, int kx) const {
    return weights[((static_cast<std::size_t>(o) * in_channels + i) * kernel_h + ky) * kernel_w + kx];
  }
};

// Kernels below parallelize over output elements with OpenMP. Every output
// element is reduced in a fixed order, so results do not depend on the
// thread count and match the serial:: versions bit for bit.

Tensor conv2d(const Tensor& input, const ConvLayerSpec& layer);

/// Gradient of a conv2d (pre-activation) with respect to its input.
/// `grad_output` must already include the ReLU mask when the layer has one.
Tensor conv2d_backward_input(const Tensor& grad_output, const ConvLayerSpec& layer,
                             int input_height, int input_width);

Tensor max_pool2(const Tensor& input);

/// Routes each output gradient to the first maximum of its 2x2 window.
Tensor max_pool2_backward(const Tensor& input, const Tensor& grad_output);

/// Bilinear resampling with the align-corners-false convention:
/// source coordinate = (i + 0.5) * in / out - 0.5, clamped to the grid.
Tensor resize_bilinear(const Tensor& input, int new_height, int new_width);

/// Bilinear sample at a continuous coordinate, border-clamped.
void sample_bilinear(const Tensor& input, float x, float y, std::span<float> out);

/// Divides every channel vector by its Euclidean norm; zero vectors stay zero.
Tensor normalize_positionwise(const Tensor& input);

Tensor relu(const Tensor& input);

namespace serial {

// Single-threaded reference versions of the parallel kernels, kept for
// testing and benchmarking.
Tensor conv2d(const Tensor& input, const ConvLayerSpec& layer);
Tensor conv2d_backward_input(const Tensor& grad_output, const ConvLayerSpec& layer,
                             int input_height, int input_width);
Tensor normalize_positionwise(const Tensor& input);

}  // namespace serial

}  // namespace uaom
