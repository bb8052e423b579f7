#include "tspsae/io/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "tspsae/error.hpp"

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace tspsae::io {

const Tensor& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw FormatError("checkpoint (" + kind + "): missing tensor '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void write_container(const std::filesystem::path& path, const Container& container) {
  nlohmann::json header;
  header["kind"] = container.kind;
  header["meta"] = container.meta;
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : container.tensors) {
    header["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}});
    offset += t.value.size();
  }
  const std::string text = header.dump();
  const std::uint64_t header_len = text.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kContainerMagic, 4);
  out.write(reinterpret_cast<const char*>(&kContainerVersion), sizeof kContainerVersion);
  out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : container.tensors) {
    out.write(reinterpret_cast<const char*>(t.value.data()), static_cast<std::streamsize>(t.value.size() * sizeof(float)));
  }
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto fail = [&](const std::string& what) { return FormatError(path.string() + ": " + what); };

  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t header_len = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&header_len), sizeof header_len);
  if (!in || std::memcmp(magic, kContainerMagic, 4) != 0) throw fail("not a checkpoint file (bad magic)");
  if (version != kContainerVersion) throw fail("unsupported checkpoint version " + std::to_string(version));
  const auto file_size = std::filesystem::file_size(path);
  if (header_len > file_size) throw fail("header length exceeds file size");

  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw fail("truncated header");

  Container c;
  try {
    const auto header = nlohmann::json::parse(text);
    c.kind = header.at("kind").get<std::string>();
    c.meta = header.at("meta");
    const std::uint64_t payload_start = 16 + header_len;
    std::uint64_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      if (entry.at("offset").get<std::uint64_t>() != expected_offset) throw fail("tensor offsets out of order");
      const std::size_t count = shape_size(shape);
      if (payload_start + (expected_offset + count) * sizeof(float) > file_size) {
        throw fail("truncated payload for tensor '" + t.name + "'");
      }
      std::vector<float> values(count);
      in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(float)));
      if (!in) throw fail("truncated payload for tensor '" + t.name + "'");
      t.value = Tensor(shape, std::move(values));
      expected_offset += count;
      c.tensors.push_back(std::move(t));
    }
    if (payload_start + expected_offset * sizeof(float) != file_size) throw fail("trailing bytes after payload");
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  } catch (const DimensionError& e) {
    throw fail(e.what());
  }
  return c;
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t state) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    state ^= bytes[i];
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::uint64_t state = 0xcbf29ce484222325ULL;
  std::vector<char> buffer(1 << 16);
  while (in) {
    in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
    state = fnv1a(buffer.data(), static_cast<std::size_t>(in.gcount()), state);
  }
  return state;
}

std::string hex64(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return s;
}

}  // namespace tspsae::io
