#include "ditopt/io/checkpoint_format.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "ditopt/error.hpp"

namespace ditopt {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

namespace {

template <typename T>
std::uint64_t append(std::vector<char>& blob, const std::vector<T>& values) {
  const std::uint64_t offset = blob.size();
  const std::size_t bytes = values.size() * sizeof(T);
  blob.resize(blob.size() + bytes);
  if (bytes) std::memcpy(blob.data() + offset, values.data(), bytes);
  return offset;
}

template <typename T>
std::vector<T> extract(const std::vector<char>& blob, std::uint64_t offset, std::uint64_t count, const std::string& name) {
  const std::uint64_t bytes = count * sizeof(T);
  if (offset + bytes > blob.size()) throw InputError("checkpoint blob truncated at tensor '" + name + "'");
  std::vector<T> out(count);
  if (bytes) std::memcpy(out.data(), blob.data() + offset, bytes);
  return out;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& dir, const CheckpointData& data) {
  std::filesystem::create_directories(dir);
  std::vector<char> blob;
  nlohmann::json manifest = data.meta;
  auto& list = manifest["tensors"] = nlohmann::json::array();
  for (const auto& t : data.tensors) {
    nlohmann::json e{{"name", t.name}, {"dtype", t.dtype}, {"shape", t.shape}, {"role", t.role}};
    if (t.dtype == "f32") {
      if (static_cast<Index>(t.f32.size()) != shape_numel(t.shape)) throw ShapeError("record '" + t.name + "' size");
      e["offset"] = append(blob, t.f32);
      e["nbytes"] = t.f32.size() * sizeof(float);
    } else if (t.dtype == "i8") {
      if (static_cast<Index>(t.i8.size()) != shape_numel(t.shape)) throw ShapeError("record '" + t.name + "' size");
      e["offset"] = append(blob, t.i8);
      e["nbytes"] = t.i8.size();
      e["scales_offset"] = append(blob, t.scales);
      e["scales_count"] = t.scales.size();
    } else {
      throw InputError("unknown dtype '" + t.dtype + "'");
    }
    list.push_back(std::move(e));
  }
  {
    std::ofstream out(dir / kBlobFile, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + (dir / kBlobFile).string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  }
  std::ofstream out(dir / kManifestFile, std::ios::trunc);
  if (!out) throw InputError("cannot write " + (dir / kManifestFile).string());
  out << manifest.dump(1) << '\n';
}

CheckpointData read_checkpoint(const std::filesystem::path& dir) {
  std::ifstream mf(dir / kManifestFile);
  if (!mf) throw InputError("checkpoint manifest not found in " + dir.string());
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  std::ifstream bf(dir / kBlobFile, std::ios::binary);
  if (!bf) throw InputError("checkpoint blob not found in " + dir.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

  CheckpointData data;
  try {
    for (const auto& e : manifest.at("tensors")) {
      TensorRecord t;
      t.name = e.at("name").get<std::string>();
      t.dtype = e.at("dtype").get<std::string>();
      t.role = e.value("role", std::string());
      t.shape = e.at("shape").get<Shape>();
      const auto count = static_cast<std::uint64_t>(shape_numel(t.shape));
      const auto offset = e.at("offset").get<std::uint64_t>();
      if (t.dtype == "f32") {
        t.f32 = extract<float>(blob, offset, count, t.name);
      } else if (t.dtype == "i8") {
        t.i8 = extract<std::int8_t>(blob, offset, count, t.name);
        t.scales = extract<float>(blob, e.at("scales_offset").get<std::uint64_t>(),
                                  e.at("scales_count").get<std::uint64_t>(), t.name);
      } else {
        throw InputError("unknown dtype '" + t.dtype + "' for tensor '" + t.name + "'");
      }
      data.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  manifest.erase("tensors");
  data.meta = std::move(manifest);
  return data;
}

std::uintmax_t checkpoint_size_bytes(const std::filesystem::path& dir) {
  return std::filesystem::file_size(dir / kManifestFile) + std::filesystem::file_size(dir / kBlobFile);
}

}  // namespace ditopt
