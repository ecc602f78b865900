#pragma once

#include <filesystem>
#include <stdexcept>

#include "uaom/tensor.hpp"

namespace uaom {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads an 8- or 16-bit PNG as values in [0, 1] with 1 (gray) or 3 (RGB)
/// channels. Palettes are expanded and alpha is dropped.
Tensor read_png(const std::filesystem::path& path);

/// Writes a 1- or 3-channel tensor as 8-bit PNG, clamping to [0, 1] and
/// rounding to the nearest level.
void write_png(const std::filesystem::path& path, const Tensor& image);

/// Luma (0.299, 0.587, 0.114) for RGB input; gray input is returned as is.
Tensor to_gray(const Tensor& image);

/// Replicates a single channel into `channels` channels.
Tensor replicate_channels(const Tensor& gray, int channels);

/// Channel mean, for collapsing a latent image back to gray.
Tensor channel_mean(const Tensor& image);

/// Bilinear downscale so the long side is at most max_side. Returns the
/// factor mapping resized coordinates back to the input (>= 1).
Tensor limit_size(const Tensor& image, int max_side, double& to_original);

}  // namespace uaom
