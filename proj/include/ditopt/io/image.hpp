#pragma once

#include <filesystem>
#include <vector>

#include "ditopt/numerics/tensor.hpp"

namespace ditopt {

/// Interleaved RGB image, row-major, values in [0, 1].
struct Image {
  Index width = 0;
  Index height = 0;
  std::vector<float> rgb;  // height * width * 3

  Image() = default;
  Image(Index w, Index h, float fill = 0.0f) : width(w), height(h), rgb(static_cast<std::size_t>(w * h * 3), fill) {}

  float& at(Index x, Index y, Index c) { return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
  float at(Index x, Index y, Index c) const { return rgb[static_cast<std::size_t>((y * width + x) * 3 + c)]; }
  bool operator==(const Image&) const = default;
};

/// 8-bit RGB PNG (libpng). Grayscale/alpha/16-bit inputs are converted.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Binary P6 with maxval 255.
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

/// Dispatch on extension (.png, .ppm). InputError for anything else.
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& image);

/// Largest centered square.
Image center_crop(const Image& image);
/// Bilinear resampling to size x size.
Image resize(const Image& image, Index size);

/// Grid of equally sized tiles, `columns` wide.
Image montage(const std::vector<Image>& tiles, Index columns);

}  // namespace ditopt
