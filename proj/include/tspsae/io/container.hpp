#pragma once

// Checkpoint container shared by policy and SAE checkpoints:
//
//   offset 0   char[4]  magic "TSPK"
//          4   u32      format version
//          8   u64      header length H (bytes)
//         16   char[H]  UTF-8 JSON header
//       16+H   f32[]    tensor payload, little-endian, in header order
//
// Header: {"kind": str, "meta": {...}, "tensors": [{"name", "shape", "offset"}]}
// where offset counts floats from the start of the payload.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "tspsae/numerics/tensor.hpp"

namespace tspsae::io {

inline constexpr char kContainerMagic[4] = {'T', 'S', 'P', 'K'};
inline constexpr std::uint32_t kContainerVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct Container {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

// FNV-1a over the file bytes; identifies the checkpoint an artifact was
// derived from.
std::uint64_t file_hash(const std::filesystem::path& path);
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t state = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

}  // namespace tspsae::io
