#pragma once

// Named-tensor container, safetensors-compatible:
//
//   [u64 little-endian header length N][N bytes of JSON header][payload]
//
// The header maps tensor name -> {"dtype": "F32", "shape": [...],
// "data_offsets": [begin, end]} with offsets relative to the payload start.
// An optional "__metadata__" object is carried through untouched. Only F32
// payloads are accepted.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "steerlab/errors.hpp"

namespace steerlab {

static_assert(std::endian::native == std::endian::little, "container payloads are little-endian fp32");

struct TensorInfo {
  std::string name;
  std::string dtype;
  std::vector<std::size_t> shape;
  std::uint64_t begin = 0;  // relative to payload start
  std::uint64_t end = 0;

  std::size_t element_count() const {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }
};

// A tensor to be written: shape plus row-major fp32 data.
struct TensorBlob {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

class TensorFile {
 public:
  static TensorFile open(const std::filesystem::path& path) {
    TensorFile f;
    f.path_ = path;
    std::ifstream in(path, std::ios::binary);
    if (!in) throw BundleError("cannot open tensor container " + path.string());
    const auto file_size = std::filesystem::file_size(path);
    if (file_size < 8) throw ValidationError("tensor container " + path.string() + " is shorter than its length prefix");

    std::uint64_t header_len = 0;
    in.read(reinterpret_cast<char*>(&header_len), 8);
    if (header_len > file_size - 8) throw ValidationError("tensor container header length exceeds file size");
    std::string header(header_len, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw BundleError("short read on tensor container header");
    f.payload_start_ = 8 + header_len;
    const std::uint64_t payload_size = file_size - f.payload_start_;

    nlohmann::json j;
    try {
      j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("tensor container header is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ValidationError("tensor container header must be a JSON object");

    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key() == "__metadata__") {
        f.metadata_ = it.value();
        continue;
      }
      const auto& v = it.value();
      TensorInfo info;
      info.name = it.key();
      try {
        info.dtype = v.at("dtype").get<std::string>();
        info.shape = v.at("shape").get<std::vector<std::size_t>>();
        auto off = v.at("data_offsets").get<std::vector<std::uint64_t>>();
        if (off.size() != 2) throw ValidationError("tensor " + info.name + ": data_offsets must have two entries");
        info.begin = off[0];
        info.end = off[1];
      } catch (const nlohmann::json::exception& e) {
        throw ValidationError("tensor " + info.name + ": malformed header entry (" + e.what() + ")");
      }
      if (info.dtype != "F32") throw ValidationError("tensor " + info.name + ": unsupported dtype " + info.dtype);
      if (info.end < info.begin || info.end - info.begin != info.element_count() * sizeof(float))
        throw ValidationError("tensor " + info.name + ": byte range does not match shape");
      if (info.end > payload_size)
        throw ValidationError("tensor " + info.name + ": payload truncated (needs " + std::to_string(info.end) +
                              " bytes, container has " + std::to_string(payload_size) + ")");
      f.index_.emplace(info.name, f.tensors_.size());
      f.tensors_.push_back(std::move(info));
    }
    return f;
  }

  const std::filesystem::path& path() const { return path_; }
  const std::vector<TensorInfo>& tensors() const { return tensors_; }
  const nlohmann::json& metadata() const { return metadata_; }
  bool contains(const std::string& name) const { return index_.contains(name); }

  const TensorInfo& info(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("tensor " + name + " missing from container");
    return tensors_[it->second];
  }

  std::vector<std::byte> read_bytes(const std::string& name) const {
    const auto& t = info(name);
    std::vector<std::byte> out(t.end - t.begin);
    std::ifstream in(path_, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(payload_start_ + t.begin));
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!in) throw BundleError("short read on tensor " + name);
    return out;
  }

  std::vector<float> read(const std::string& name) const {
    auto bytes = read_bytes(name);
    std::vector<float> out(bytes.size() / sizeof(float));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
  }

 private:
  std::filesystem::path path_;
  std::uint64_t payload_start_ = 0;
  std::vector<TensorInfo> tensors_;
  std::map<std::string, std::size_t> index_;
  nlohmann::json metadata_;
};

// Payloads are written in the order given; the header is space-padded to an
// 8-byte boundary like the reference safetensors writer.
inline void write_tensor_file(const std::filesystem::path& path, std::span<const TensorBlob> tensors,
                              const nlohmann::json& metadata = nullptr) {
  nlohmann::json header = nlohmann::json::object();
  if (!metadata.is_null()) header["__metadata__"] = metadata;
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const std::size_t n = std::accumulate(t.shape.begin(), t.shape.end(), std::size_t{1}, std::multiplies<>());
    if (n != t.data.size()) throw DimensionError("tensor " + t.name + ": data length does not match shape");
    const std::uint64_t bytes = n * sizeof(float);
    header[t.name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw BundleError("cannot write tensor container " + path.string());
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw BundleError("write failed for " + path.string());
}

}  // namespace steerlab
