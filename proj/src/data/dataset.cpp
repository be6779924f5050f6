#include "ditopt/data/dataset.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "ditopt/error.hpp"
#include "ditopt/rng.hpp"

namespace ditopt {

namespace {

const Eigen::Matrix<double, 4, 3>& rgb_to_latent_map() {
  static const Eigen::Matrix<double, 4, 3> m = [] {
    Eigen::Matrix<double, 4, 3> a;
    a << 0.299, 0.587, 0.114,  //
        0.5, 0.0, -0.5,        //
        -0.25, 0.5, -0.25,     //
        0.4, -0.2, -0.2;
    return a;
  }();
  return m;
}

const Eigen::Matrix<double, 3, 4>& latent_to_rgb_map() {
  static const Eigen::Matrix<double, 3, 4> inv = rgb_to_latent_map().completeOrthogonalDecomposition().pseudoInverse();
  return inv;
}

}  // namespace

Tensor<float> image_to_latent(const Image& image) {
  const Index H = image.height, W = image.width;
  Tensor<float> out(Shape{kLatentChannels, H, W});
  const auto& m = rgb_to_latent_map();
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      const Eigen::Vector3d rgb(2.0 * image.at(x, y, 0) - 1.0, 2.0 * image.at(x, y, 1) - 1.0,
                                2.0 * image.at(x, y, 2) - 1.0);
      const Eigen::Vector4d z = m * rgb;
      for (Index c = 0; c < kLatentChannels; ++c) out[(c * H + y) * W + x] = static_cast<float>(z[c]);
    }
  return out;
}

Image latent_to_image(const Tensor<float>& latent) {
  if (latent.rank() != 3 || latent.dim(0) != kLatentChannels) {
    throw ShapeError("latent_to_image expects [4 x H x W], got " + shape_string(latent.shape()));
  }
  const Index H = latent.dim(1), W = latent.dim(2);
  Image img(W, H);
  const auto& inv = latent_to_rgb_map();
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      Eigen::Vector4d z;
      for (Index c = 0; c < kLatentChannels; ++c) z[c] = latent[(c * H + y) * W + x];
      const Eigen::Vector3d rgb = inv * z;
      for (Index c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<float>(std::clamp(0.5 * (rgb[c] + 1.0), 0.0, 1.0));
    }
  return img;
}

Image synthetic_image(Index cls, Index size, Rng& rng) {
  // Class identity: golden-ratio spaced hue and orientation, frequency bands.
  const double golden = 0.6180339887498949;
  const double hue = std::fmod(static_cast<double>(cls) * golden, 1.0);
  const double theta = std::fmod(static_cast<double>(cls) * golden * 2.0, 1.0) * std::numbers::pi;
  const double freq = (1.5 + static_cast<double>(cls % 4)) / static_cast<double>(size);
  const double color[3] = {0.5 + 0.5 * std::cos(2 * std::numbers::pi * hue),
                           0.5 + 0.5 * std::cos(2 * std::numbers::pi * (hue - 1.0 / 3)),
                           0.5 + 0.5 * std::cos(2 * std::numbers::pi * (hue - 2.0 / 3))};
  // Per-image variation.
  const double phase = rng.uniform(0.0, 2 * std::numbers::pi);
  const double cx = size * rng.uniform(0.35, 0.65), cy = size * rng.uniform(0.35, 0.65);
  const double sigma = size * rng.uniform(0.25, 0.4);
  const double contrast = rng.uniform(0.7, 1.0);
  Image img(size, size);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double envelope = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      const double wave = std::cos(2 * std::numbers::pi * freq * (dx * std::cos(theta) + dy * std::sin(theta)) + phase);
      const double g = contrast * envelope * wave;
      for (Index c = 0; c < 3; ++c) {
        img.at(x, y, c) = static_cast<float>(std::clamp(0.5 + 0.5 * g * (2 * color[c] - 1) + 0.15 * envelope * color[c],
                                                        0.0, 1.0));
      }
    }
  return img;
}

std::vector<Image> synthetic_images(const SyntheticSpec& spec, std::vector<Index>& labels) {
  if (spec.classes < 1 || spec.per_class < 1 || spec.size < 2) throw ConfigError("bad synthetic dataset geometry");
  Rng rng(spec.seed);
  std::vector<Image> images;
  labels.clear();
  for (Index c = 0; c < spec.classes; ++c)
    for (Index i = 0; i < spec.per_class; ++i) {
      images.push_back(synthetic_image(c, spec.size, rng));
      labels.push_back(c);
    }
  return images;
}

namespace {

Dataset stack(const std::vector<Image>& images, std::vector<Index> labels, std::vector<std::string> names, Index size) {
  Dataset d;
  d.latents = Tensor<float>(Shape{static_cast<Index>(images.size()), kLatentChannels, size, size});
  const Index per = kLatentChannels * size * size;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto z = image_to_latent(images[i]);
    std::copy_n(z.data(), per, d.latents.data() + static_cast<Index>(i) * per);
  }
  d.labels = std::move(labels);
  d.class_names = std::move(names);
  return d;
}

std::string class_dir_name(Index c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class_%03lld", static_cast<long long>(c));
  return buf;
}

}  // namespace

Dataset make_synthetic_dataset(const SyntheticSpec& spec) {
  std::vector<Index> labels;
  auto images = synthetic_images(spec, labels);
  std::vector<std::string> names;
  for (Index c = 0; c < spec.classes; ++c) names.push_back(class_dir_name(c));
  return stack(images, std::move(labels), std::move(names), spec.size);
}

Dataset load_image_folder(const std::filesystem::path& root, Index size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw InputError("dataset directory not found: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  std::vector<Image> images;
  std::vector<Index> labels;
  std::vector<std::string> names;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      if (e.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(e.path());
    }
    if (files.empty()) continue;
    std::sort(files.begin(), files.end());
    const Index label = static_cast<Index>(names.size());
    names.push_back(dir.filename().string());
    for (const auto& f : files) {
      images.push_back(resize(center_crop(read_image(f)), size));
      labels.push_back(label);
    }
  }
  if (images.empty()) throw InputError("no .png/.ppm images under " + root.string());
  return stack(images, std::move(labels), std::move(names), size);
}

void write_image_folder(const std::filesystem::path& root, const std::vector<Image>& images,
                        const std::vector<Index>& labels) {
  if (images.size() != labels.size()) throw InputError("one label per image required");
  std::vector<Index> counters;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Index c = labels[i];
    if (static_cast<Index>(counters.size()) <= c) counters.resize(static_cast<std::size_t>(c + 1), 0);
    const auto dir = root / class_dir_name(c);
    std::filesystem::create_directories(dir);
    char name[32];
    std::snprintf(name, sizeof name, "img_%04lld.png", static_cast<long long>(counters[static_cast<std::size_t>(c)]++));
    write_png(dir / name, images[i]);
  }
}

}  // namespace ditopt
