#pragma once

// Parameter archive: named float32 arrays plus a JSON manifest.
//
//   "EEGVLMCK"  u32 version  u64 manifest_len  manifest (JSON text)
//   u32 array_count, then per array:
//   u32 name_len  name  u32 ndim  u64 dims[ndim]  f32 data[prod(dims)]
//
// All integers and floats little-endian.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eegvlm/nn.hpp"

namespace eegvlm::checkpoint {

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Archive {
  nlohmann::json manifest = nlohmann::json::object();
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  void add(const nn::Param& p);
  // Copies a stored array into p; throws ShapeMismatch or MissingUpstream.
  void restore(nn::Param& p) const;
};

std::vector<std::uint8_t> serialize(const Archive& archive);
Archive deserialize(std::span<const std::uint8_t> bytes);
void save(const std::filesystem::path& path, const Archive& archive);
Archive load(const std::filesystem::path& path);

}  // namespace eegvlm::checkpoint
