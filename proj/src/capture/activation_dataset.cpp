#include "tspsae/capture/activation_dataset.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <array>
#include <atomic>
#include <cstring>
#include <thread>

#include "tspsae/error.hpp"
#include "tspsae/io/container.hpp"
#include "tspsae/policy/checkpoint.hpp"

namespace tspsae::capture {

namespace {

template <class U>
void put(unsigned char* buf, std::size_t at, U v) {
  std::memcpy(buf + at, &v, sizeof v);
}

template <class U>
U get(const unsigned char* buf, std::size_t at) {
  U v;
  std::memcpy(&v, buf + at, sizeof v);
  return v;
}

std::array<unsigned char, kHeaderBytes> encode_header(const DatasetHeader& h) {
  std::array<unsigned char, kHeaderBytes> buf{};
  std::memcpy(buf.data(), kDatasetMagic, 4);
  put(buf.data(), 4, kDatasetVersion);
  put(buf.data(), 8, h.d_model);
  put(buf.data(), 12, h.nodes_per_instance);
  put(buf.data(), 16, h.instance_count);
  put(buf.data(), 24, h.checkpoint_hash);
  put(buf.data(), 32, static_cast<std::uint32_t>(h.distribution));
  put(buf.data(), 40, h.seed_begin);
  put(buf.data(), 48, h.seed_end);
  return buf;
}

DatasetHeader decode_header(const unsigned char* buf, const std::filesystem::path& path) {
  if (std::memcmp(buf, kDatasetMagic, 4) != 0) throw FormatError(path.string() + ": not an activation dataset");
  const auto version = get<std::uint32_t>(buf, 4);
  if (version != kDatasetVersion) {
    throw FormatError(path.string() + ": unsupported dataset version " + std::to_string(version));
  }
  DatasetHeader h;
  h.d_model = get<std::uint32_t>(buf, 8);
  h.nodes_per_instance = get<std::uint32_t>(buf, 12);
  h.instance_count = get<std::uint64_t>(buf, 16);
  h.checkpoint_hash = get<std::uint64_t>(buf, 24);
  const auto dist = get<std::uint32_t>(buf, 32);
  if (dist > 2) throw FormatError(path.string() + ": unknown distribution code " + std::to_string(dist));
  h.distribution = static_cast<tsp::Distribution>(dist);
  h.seed_begin = get<std::uint64_t>(buf, 40);
  h.seed_end = get<std::uint64_t>(buf, 48);
  if (h.d_model == 0 || h.nodes_per_instance == 0) throw FormatError(path.string() + ": empty record shape");
  if (h.seed_end - h.seed_begin != h.instance_count) {
    throw FormatError(path.string() + ": seed range does not match instance count");
  }
  return h;
}

void validate_header(const DatasetHeader& h) {
  if (h.d_model == 0 || h.nodes_per_instance == 0 || h.instance_count == 0) {
    throw ParameterError("dataset: d_model, nodes per instance and instance count must be positive");
  }
  if (h.seed_end - h.seed_begin != h.instance_count) {
    throw ParameterError("dataset: seed range must cover exactly instance_count seeds");
  }
}

}  // namespace

DatasetWriter::DatasetWriter(const std::filesystem::path& path, const DatasetHeader& header)
    : path_(path), header_(header), out_(path, std::ios::binary | std::ios::trunc) {
  validate_header(header_);
  if (!out_) throw std::runtime_error("cannot open " + path.string() + " for writing");
  crc_ = static_cast<std::uint32_t>(::crc32(0L, Z_NULL, 0));
  const auto buf = encode_header(header_);
  write(buf.data(), buf.size());
}

DatasetWriter::~DatasetWriter() {
  if (!finished_) mark_bad();
}

void DatasetWriter::write(const void* data, std::size_t bytes) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out_) {
    mark_bad();
    throw std::runtime_error("write failed: " + path_.string() + " (file marked invalid)");
  }
}

void DatasetWriter::mark_bad() noexcept {
  if (finished_) return;
  finished_ = true;
  try {
    out_.clear();
    std::array<unsigned char, kTrailerBytes> t{};
    std::memcpy(t.data(), "TBAD", 4);
    put(t.data(), 4, crc_);
    put(t.data(), 8, instances_written_ * header_.nodes_per_instance);
    out_.write(reinterpret_cast<const char*>(t.data()), t.size());
    out_.flush();
  } catch (...) {
  }
}

void DatasetWriter::append_instance(std::span<const float> values) {
  if (finished_) throw ContractError("dataset writer: already finished");
  const std::size_t expected = std::size_t{header_.nodes_per_instance} * header_.d_model;
  if (values.size() != expected) {
    throw DimensionError("dataset writer: " + std::to_string(values.size()) + " values per instance, expected " +
                         std::to_string(expected));
  }
  if (instances_written_ >= header_.instance_count) throw ContractError("dataset writer: too many instances");
  for (float v : values) {
    if (!std::isfinite(v)) throw NumericalError("dataset writer: non-finite activation");
  }
  const std::size_t bytes = values.size() * sizeof(float);
  crc_ = static_cast<std::uint32_t>(
      ::crc32(crc_, reinterpret_cast<const Bytef*>(values.data()), static_cast<uInt>(bytes)));
  write(values.data(), bytes);
  ++instances_written_;
}

void DatasetWriter::finish() {
  if (finished_) throw ContractError("dataset writer: already finished");
  if (instances_written_ != header_.instance_count) {
    throw ContractError("dataset writer: " + std::to_string(instances_written_) + " of " +
                        std::to_string(header_.instance_count) + " instances written");
  }
  std::array<unsigned char, kTrailerBytes> t{};
  std::memcpy(t.data(), "TEND", 4);
  put(t.data(), 4, crc_);
  put(t.data(), 8, header_.record_count());
  write(t.data(), t.size());
  out_.flush();
  if (!out_) {
    mark_bad();
    throw std::runtime_error("write failed: " + path_.string());
  }
  finished_ = true;
  out_.close();
}

DatasetHeader read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::array<unsigned char, kHeaderBytes> buf{};
  in.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw IntegrityError(path.string() + ": truncated header (file ends at byte offset " +
                         std::to_string(in.gcount()) + ")");
  }
  return decode_header(buf.data(), path);
}

ActivationDataset ActivationDataset::open(const std::filesystem::path& path, std::optional<std::uint32_t> expected_d_model,
                                          bool verify_crc) {
  ActivationDataset ds;
  ds.path_ = path;
  ds.header_ = read_header(path);
  const auto& h = ds.header_;
  if (expected_d_model && *expected_d_model != h.d_model) {
    throw FormatError(path.string() + ": d_model " + std::to_string(h.d_model) + ", expected " +
                      std::to_string(*expected_d_model));
  }
  const std::uint64_t actual = std::filesystem::file_size(path);
  const std::uint64_t expected = h.file_size();
  if (actual < expected) {
    throw IntegrityError(path.string() + ": truncated at byte offset " + std::to_string(actual) + " (expected " +
                         std::to_string(expected) + " bytes)");
  }
  if (actual > expected) {
    throw IntegrityError(path.string() + ": unexpected data after byte offset " + std::to_string(expected));
  }

  const int fd = ::open(path.c_str(), O_RDONLY);
  if (fd < 0) throw std::runtime_error("cannot open " + path.string());
  void* map = ::mmap(nullptr, actual, PROT_READ, MAP_SHARED, fd, 0);
  ::close(fd);
  if (map == MAP_FAILED) throw std::runtime_error("cannot map " + path.string());
  ds.map_ = static_cast<const unsigned char*>(map);
  ds.map_size_ = actual;

  const std::uint64_t trailer_at = expected - kTrailerBytes;
  const unsigned char* t = ds.map_ + trailer_at;
  if (std::memcmp(t, "TEND", 4) != 0) {
    const bool flagged = std::memcmp(t, "TBAD", 4) == 0;
    throw IntegrityError(path.string() + ": " + (flagged ? "writer flagged the file invalid" : "corrupt trailer") +
                         " at byte offset " + std::to_string(trailer_at));
  }
  if (get<std::uint64_t>(t, 8) != h.record_count()) {
    throw IntegrityError(path.string() + ": trailer record count disagrees with header at byte offset " +
                         std::to_string(trailer_at + 8));
  }
  if (verify_crc) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    const unsigned char* p = ds.map_ + kHeaderBytes;
    for (std::uint64_t left = trailer_at - kHeaderBytes; left > 0;) {
      const auto chunk = static_cast<uInt>(std::min<std::uint64_t>(left, 1u << 30));
      crc = ::crc32(crc, p, chunk);
      p += chunk;
      left -= chunk;
    }
    if (static_cast<std::uint32_t>(crc) != get<std::uint32_t>(t, 4)) {
      throw IntegrityError(path.string() + ": record checksum mismatch (trailer at byte offset " +
                           std::to_string(trailer_at) + ")");
    }
  }
  return ds;
}

ActivationDataset::ActivationDataset(ActivationDataset&& other) noexcept
    : path_(std::move(other.path_)), header_(other.header_), map_(other.map_), map_size_(other.map_size_) {
  other.map_ = nullptr;
  other.map_size_ = 0;
}

ActivationDataset& ActivationDataset::operator=(ActivationDataset&& other) noexcept {
  if (this != &other) {
    if (map_) ::munmap(const_cast<unsigned char*>(map_), map_size_);
    path_ = std::move(other.path_);
    header_ = other.header_;
    map_ = other.map_;
    map_size_ = other.map_size_;
    other.map_ = nullptr;
    other.map_size_ = 0;
  }
  return *this;
}

ActivationDataset::~ActivationDataset() {
  if (map_) ::munmap(const_cast<unsigned char*>(map_), map_size_);
}

std::span<const float> ActivationDataset::record(std::uint64_t index) const {
  if (index >= size()) {
    throw ContractError("dataset: record " + std::to_string(index) + " out of range (" + std::to_string(size()) + ")");
  }
  const auto* base = reinterpret_cast<const float*>(map_ + kHeaderBytes);
  return {base + index * header_.d_model, header_.d_model};
}

std::span<const float> ActivationDataset::record(std::uint64_t instance, std::size_t node) const {
  if (instance >= header_.instance_count || node >= header_.nodes_per_instance) {
    throw ContractError("dataset: record (" + std::to_string(instance) + ", " + std::to_string(node) +
                        ") out of range");
  }
  return record(instance * header_.nodes_per_instance + node);
}

Tensor ActivationDataset::rows(std::uint64_t first, std::uint64_t count) const {
  if (count == 0 || first + count > size()) throw ContractError("dataset: row range out of bounds");
  const auto* base = reinterpret_cast<const float*>(map_ + kHeaderBytes) + first * header_.d_model;
  return Tensor(Shape{count, header_.d_model}, std::vector<float>(base, base + count * header_.d_model));
}

tsp::Instance ActivationDataset::instance(std::uint64_t index) const {
  if (index >= header_.instance_count) throw ContractError("dataset: instance index out of range");
  return tsp::generate(header_.distribution, header_.nodes_per_instance, header_.seed_begin + index);
}

ActivationDataset::Batches::Batches(const ActivationDataset& data, std::size_t batch_size, std::uint64_t begin,
                                    std::uint64_t end)
    : data_(&data), batch_size_(batch_size), begin_(begin), end_(std::min(end, data.size())), cursor_(begin) {
  if (batch_size_ == 0) throw ParameterError("dataset: batch size must be positive");
  if (begin_ > end_) throw ContractError("dataset: batch range begins after it ends");
}

bool ActivationDataset::Batches::next(Tensor& batch) {
  if (cursor_ >= end_) return false;
  const std::uint64_t count = std::min<std::uint64_t>(batch_size_, end_ - cursor_);
  batch = data_->rows(cursor_, count);
  cursor_ += count;
  return true;
}

ActivationDataset::Batches ActivationDataset::batches(std::size_t batch_size, std::uint64_t begin,
                                                      std::uint64_t end) const {
  return Batches(*this, batch_size, begin, end);
}

DatasetHeader capture(const CaptureRequest& req) {
  if (req.num_instances == 0) throw ParameterError("capture: num_instances must be >= 1");
  if (req.n < 3) throw ParameterError("capture: n must be >= 3");
  const auto policy = policy::load_policy(req.checkpoint);
  const auto d_model = static_cast<std::uint32_t>(policy.config().d_model);
  if (req.expected_d_model && *req.expected_d_model != d_model) {
    throw FormatError("capture: checkpoint d_model " + std::to_string(d_model) + ", expected " +
                      std::to_string(*req.expected_d_model));
  }

  DatasetHeader h;
  h.d_model = d_model;
  h.nodes_per_instance = static_cast<std::uint32_t>(req.n);
  h.instance_count = req.num_instances;
  h.checkpoint_hash = io::file_hash(req.checkpoint);
  h.distribution = req.distribution;
  h.seed_begin = req.seed;
  h.seed_end = req.seed + req.num_instances;
  DatasetWriter writer(req.output, h);

  // Fixed chunking keeps the bytes independent of the thread count.
  constexpr std::uint64_t kChunk = 64;
  const std::size_t workers = std::max<std::size_t>(1, req.threads);
  const std::size_t per_instance = req.n * d_model;
  std::vector<std::vector<float>> buffers(workers);
  for (std::uint64_t wave = 0; wave < req.num_instances; wave += kChunk * workers) {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t w; (w = next.fetch_add(1)) < workers;) {
        const std::uint64_t begin = wave + w * kChunk;
        buffers[w].clear();
        if (begin >= req.num_instances) continue;
        const std::uint64_t end = std::min(req.num_instances, begin + kChunk);
        std::vector<tsp::Instance> instances;
        for (std::uint64_t i = begin; i < end; ++i) instances.push_back(tsp::generate(req.distribution, req.n, req.seed + i));
        ad::Tape<float> tape(false);
        const auto enc = policy.encode(tape, instances);
        const auto& v = enc.nodes.value().values();
        buffers[w].assign(v.begin(), v.end());
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    for (const auto& buf : buffers) {
      for (std::size_t at = 0; at < buf.size(); at += per_instance) {
        writer.append_instance(std::span<const float>(buf.data() + at, per_instance));
      }
    }
  }
  writer.finish();
  return h;
}

}  // namespace tspsae::capture
