#pragma once

// Activation corpus file. All integers little-endian.
//
//   header (64 bytes)
//     0  char[4] magic "TSPA"
//     4  u32     format version (1)
//     8  u32     d_model
//    12  u32     nodes per instance
//    16  u64     instance count
//    24  u64     policy checkpoint hash (FNV-1a of the checkpoint file)
//    32  u32     distribution (0 uniform, 1 clusters, 2 ring)
//    36  u32     reserved, zero
//    40  u64     first instance seed
//    48  u64     one past the last instance seed
//    56  u64     reserved, zero
//   records: instance-major, node-minor; record (i, j) is the float32[d_model]
//     at byte 64 + (i * nodes + j) * d_model * 4
//   trailer (16 bytes)
//     0  char[4] "TEND" when complete, "TBAD" when the writer failed
//     4  u32     CRC-32 (zlib polynomial) of all record bytes
//     8  u64     record count
//
// Instance i was generated with seed (first seed + i).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>

#include "tspsae/numerics/tensor.hpp"
#include "tspsae/tsp/instance.hpp"

namespace tspsae::capture {

inline constexpr char kDatasetMagic[4] = {'T', 'S', 'P', 'A'};
inline constexpr std::uint32_t kDatasetVersion = 1;
inline constexpr std::size_t kHeaderBytes = 64;
inline constexpr std::size_t kTrailerBytes = 16;

struct DatasetHeader {
  std::uint32_t d_model = 0;
  std::uint32_t nodes_per_instance = 0;
  std::uint64_t instance_count = 0;
  std::uint64_t checkpoint_hash = 0;
  tsp::Distribution distribution = tsp::Distribution::uniform;
  std::uint64_t seed_begin = 0;
  std::uint64_t seed_end = 0;

  std::uint64_t record_count() const { return instance_count * nodes_per_instance; }
  std::uint64_t file_size() const { return kHeaderBytes + record_count() * d_model * 4 + kTrailerBytes; }
  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

/// Streaming single writer. The trailer is written by finish(); a writer
/// destroyed before that (or after a failed write) leaves a "TBAD" trailer.
class DatasetWriter {
 public:
  DatasetWriter(const std::filesystem::path& path, const DatasetHeader& header);
  ~DatasetWriter();
  DatasetWriter(const DatasetWriter&) = delete;
  DatasetWriter& operator=(const DatasetWriter&) = delete;

  // All node vectors of the next instance, [nodes_per_instance, d_model].
  void append_instance(std::span<const float> values);
  // ContractError unless exactly instance_count instances were appended.
  void finish();

 private:
  void write(const void* data, std::size_t bytes);
  void mark_bad() noexcept;

  std::filesystem::path path_;
  DatasetHeader header_;
  std::ofstream out_;
  std::uint64_t instances_written_ = 0;
  std::uint32_t crc_ = 0;
  bool finished_ = false;
};

/// Read-only memory-mapped view. Safe to share between reader threads.
class ActivationDataset {
 public:
  // IntegrityError (with byte offset) on truncation, bad trailer or CRC
  // mismatch; FormatError on bad magic/version or a d_model different from
  // `expected_d_model` when one is given.
  static ActivationDataset open(const std::filesystem::path& path, std::optional<std::uint32_t> expected_d_model = {},
                                bool verify_crc = true);

  ActivationDataset(ActivationDataset&& other) noexcept;
  ActivationDataset& operator=(ActivationDataset&& other) noexcept;
  ~ActivationDataset();

  const DatasetHeader& header() const { return header_; }
  const std::filesystem::path& path() const { return path_; }
  std::uint64_t size() const { return header_.record_count(); }
  std::size_t d_model() const { return header_.d_model; }

  std::span<const float> record(std::uint64_t index) const;
  std::span<const float> record(std::uint64_t instance, std::size_t node) const;
  // Rows [first, first + count) as a [count, d_model] tensor.
  Tensor rows(std::uint64_t first, std::uint64_t count) const;
  // Instance regenerated from the header's seed range.
  tsp::Instance instance(std::uint64_t index) const;

  /// Fixed-size batches over [begin, end); the last one may be shorter.
  class Batches {
   public:
    Batches(const ActivationDataset& data, std::size_t batch_size, std::uint64_t begin, std::uint64_t end);
    bool next(Tensor& batch);
    void reset() { cursor_ = begin_; }

   private:
    const ActivationDataset* data_;
    std::size_t batch_size_;
    std::uint64_t begin_, end_, cursor_;
  };
  Batches batches(std::size_t batch_size, std::uint64_t begin = 0, std::uint64_t end = UINT64_MAX) const;

 private:
  ActivationDataset() = default;

  std::filesystem::path path_;
  DatasetHeader header_;
  const unsigned char* map_ = nullptr;
  std::size_t map_size_ = 0;
};

DatasetHeader read_header(const std::filesystem::path& path);

struct CaptureRequest {
  std::filesystem::path checkpoint;
  std::filesystem::path output;
  tsp::Distribution distribution = tsp::Distribution::uniform;
  std::uint64_t num_instances = 0;
  std::size_t n = 100;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::optional<std::uint32_t> expected_d_model;  // FormatError when the checkpoint disagrees
};

// Encodes every instance once and streams the final residual vectors to
// disk. Byte-identical output for fixed inputs regardless of `threads`.
DatasetHeader capture(const CaptureRequest& request);

}  // namespace tspsae::capture
