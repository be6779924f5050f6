#include "ditopt/io/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "ditopt/error.hpp"

namespace ditopt {

namespace {

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::string lower_ext(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext;
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw InputError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&png);
    throw InputError("cannot decode PNG " + path.string() + ": " + png.message);
  }
  Image img(png.width, png.height);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(image.rgb.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_byte(image.rgb[i]);
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw InputError("cannot write PNG " + path.string() + ": " + png.message);
  }
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    long v = -1;
    in >> v;
    return v;
  };
  if (magic != "P6") throw InputError(path.string() + " is not a binary PPM");
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (!in || w <= 0 || h <= 0 || maxval != 255) throw InputError("unsupported PPM header in " + path.string());
  in.get();
  std::vector<unsigned char> buf(static_cast<std::size_t>(w * h * 3));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw InputError("truncated PPM " + path.string());
  Image img(w, h);
  for (std::size_t i = 0; i < buf.size(); ++i) img.rgb[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> buf(image.rgb.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_byte(image.rgb[i]);
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Image read_image(const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".png") return read_png(path);
  if (ext == ".ppm") return read_ppm(path);
  throw InputError("unsupported image type " + path.string());
}

void write_image(const std::filesystem::path& path, const Image& image) {
  const auto ext = lower_ext(path);
  if (ext == ".png") return write_png(path, image);
  if (ext == ".ppm") return write_ppm(path, image);
  throw InputError("unsupported image type " + path.string());
}

Image center_crop(const Image& image) {
  const Index side = std::min(image.width, image.height);
  const Index x0 = (image.width - side) / 2, y0 = (image.height - side) / 2;
  Image out(side, side);
  for (Index y = 0; y < side; ++y)
    for (Index x = 0; x < side; ++x)
      for (Index c = 0; c < 3; ++c) out.at(x, y, c) = image.at(x0 + x, y0 + y, c);
  return out;
}

Image resize(const Image& image, Index size) {
  if (image.width == 0 || image.height == 0) throw InputError("cannot resize an empty image");
  Image out(size, size);
  const double sx = static_cast<double>(image.width) / size, sy = static_cast<double>(image.height) / size;
  for (Index y = 0; y < size; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const Index y0 = static_cast<Index>(fy), y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (Index x = 0; x < size; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const Index x0 = static_cast<Index>(fx), x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (Index c = 0; c < 3; ++c) {
        const double top = image.at(x0, y0, c) * (1 - wx) + image.at(x1, y0, c) * wx;
        const double bot = image.at(x0, y1, c) * (1 - wx) + image.at(x1, y1, c) * wx;
        out.at(x, y, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Image montage(const std::vector<Image>& tiles, Index columns) {
  if (tiles.empty()) return {};
  const Index w = tiles[0].width, h = tiles[0].height;
  const Index n = static_cast<Index>(tiles.size());
  const Index cols = std::min(columns, n), rows = (n + cols - 1) / cols;
  Image out(cols * w, rows * h);
  for (Index i = 0; i < n; ++i) {
    const auto& t = tiles[static_cast<std::size_t>(i)];
    if (t.width != w || t.height != h) throw ShapeError("montage tiles differ in size");
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        for (Index c = 0; c < 3; ++c) out.at((i % cols) * w + x, (i / cols) * h + y, c) = t.at(x, y, c);
  }
  return out;
}

}  // namespace ditopt
