#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ditopt/io/image.hpp"
#include "ditopt/numerics/tensor.hpp"
#include "ditopt/rng.hpp"

namespace ditopt {

inline constexpr Index kLatentChannels = 4;

/// Fixed linear map from RGB in [0, 1] (shifted to [-1, 1]) to 4 latent
/// channels, and its least-squares inverse for visualization.
Tensor<float> image_to_latent(const Image& image);
Image latent_to_image(const Tensor<float>& latent);  // [4 x H x W]

struct Dataset {
  Tensor<float> latents;  // [M x 4 x H x W]
  std::vector<Index> labels;
  std::vector<std::string> class_names;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index num_classes() const { return static_cast<Index>(class_names.size()); }
};

struct SyntheticSpec {
  Index classes = 8;
  Index per_class = 8;
  Index size = 16;
  std::uint64_t seed = 0;
};

/// Class-parameterized Gabor texture: each class fixes a frequency,
/// orientation and color; each image jitters phase, center and contrast.
Image synthetic_image(Index cls, Index size, Rng& rng);

/// Images in class-major order with their labels.
std::vector<Image> synthetic_images(const SyntheticSpec& spec, std::vector<Index>& labels);
Dataset make_synthetic_dataset(const SyntheticSpec& spec);

/// One subdirectory per class (sorted by name), .png/.ppm files inside;
/// every image is center-cropped and resized to size x size.
Dataset load_image_folder(const std::filesystem::path& root, Index size);

/// Writes <root>/class_XXX/img_XXXX.png.
void write_image_folder(const std::filesystem::path& root, const std::vector<Image>& images,
                        const std::vector<Index>& labels);

}  // namespace ditopt
