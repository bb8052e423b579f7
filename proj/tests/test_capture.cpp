#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "tspsae/capture/activation_dataset.hpp"
#include "tspsae/error.hpp"
#include "tspsae/io/container.hpp"
#include "tspsae/policy/checkpoint.hpp"

using namespace tspsae;
using namespace tspsae::capture;

namespace {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void overwrite(const std::filesystem::path& path, std::size_t offset, const void* bytes, std::size_t n) {
  std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
  f.seekp(static_cast<std::streamoff>(offset));
  f.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
}

DatasetHeader header(std::uint32_t d, std::uint32_t nodes, std::uint64_t count) {
  DatasetHeader h;
  h.d_model = d;
  h.nodes_per_instance = nodes;
  h.instance_count = count;
  h.checkpoint_hash = 0xfeedULL;
  h.distribution = tsp::Distribution::clusters;
  h.seed_begin = 100;
  h.seed_end = 100 + count;
  return h;
}

std::filesystem::path write_policy(const std::filesystem::path& dir, std::size_t d_model = 16) {
  Rng rng(3);
  const policy::Policy<float> p({.d_model = d_model, .layers = 1, .heads = 2, .ff_width = 32}, rng);
  const auto path = dir / ("policy" + std::to_string(d_model) + ".ckpt");
  policy::save_policy(path, p);
  return path;
}

}  // namespace

TEST_CASE("writer/reader round-trip 1000 fuzzed records bit-exactly") {
  TempDir dir("tspsae_capture_rt");
  const auto path = dir.path / "data.tspa";
  const auto h = header(8, 10, 100);
  Rng rng(1);
  std::vector<float> all;
  {
    DatasetWriter w(path, h);
    for (int i = 0; i < 100; ++i) {
      std::vector<float> v(80);
      for (auto& x : v) {
        // Random finite bit patterns, including subnormals and signed zero.
        std::uint32_t bits;
        do {
          bits = static_cast<std::uint32_t>(rng.engine()());
          std::memcpy(&x, &bits, 4);
        } while (!std::isfinite(x));
      }
      w.append_instance(v);
      all.insert(all.end(), v.begin(), v.end());
    }
    w.finish();
  }
  CHECK(std::filesystem::file_size(path) == h.file_size());
  CHECK(std::filesystem::file_size(path) == 64 + 1000 * 8 * 4 + 16);

  const auto ds = ActivationDataset::open(path);
  CHECK(ds.header() == h);
  CHECK(ds.size() == 1000);
  for (std::uint64_t i = 0; i < 100; ++i) {
    for (std::size_t j = 0; j < 10; ++j) {
      const auto r = ds.record(i, j);
      REQUIRE(std::memcmp(r.data(), all.data() + (i * 10 + j) * 8, 32) == 0);
    }
  }
  // Random access equals the computed byte offset in the raw file.
  const auto raw = slurp(path);
  CHECK(std::memcmp(ds.record(37, 4).data(), raw.data() + 64 + (37 * 10 + 4) * 8 * 4, 32) == 0);
  CHECK_THROWS_AS(ds.record(100, 0), ContractError);
  CHECK_THROWS_AS(ds.record(0, 10), ContractError);

  std::size_t seen = 0, batches = 0;
  auto it = ds.batches(300);
  for (Tensor b; it.next(b);) {
    CHECK(b.cols() == 8);
    CHECK(std::memcmp(b.data(), all.data() + seen * 8, b.size() * 4) == 0);
    seen += b.rows();
    ++batches;
  }
  CHECK(seen == 1000);
  CHECK(batches == 4);  // 300, 300, 300, 100

  CHECK(ds.instance(2).seed == 102);
  CHECK(ds.instance(2).distribution == tsp::Distribution::clusters);
}

TEST_CASE("corruption is detected with a byte offset") {
  TempDir dir("tspsae_capture_bad");
  const auto path = dir.path / "data.tspa";
  const auto h = header(4, 5, 6);
  auto write_good = [&] {
    DatasetWriter w(path, h);
    std::vector<float> v(20, 0.5f);
    for (int i = 0; i < 6; ++i) w.append_instance(v);
    w.finish();
  };

  write_good();
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 7);
  try {
    ActivationDataset::open(path);
    FAIL("expected IntegrityError");
  } catch (const IntegrityError& e) {
    CHECK(std::string(e.what()).find("byte offset") != std::string::npos);
  }

  write_good();
  overwrite(path, 64 + 17, "\x01", 1);  // flip a payload byte
  CHECK_THROWS_AS(ActivationDataset::open(path), IntegrityError);
  CHECK_NOTHROW(ActivationDataset::open(path, {}, /*verify_crc=*/false));

  write_good();
  overwrite(path, h.file_size() - 16, "XXXX", 4);
  try {
    ActivationDataset::open(path);
    FAIL("expected IntegrityError");
  } catch (const IntegrityError& e) {
    CHECK(std::string(e.what()).find(std::to_string(h.file_size() - 16)) != std::string::npos);
  }

  write_good();
  overwrite(path, 0, "NOPE", 4);
  CHECK_THROWS_AS(ActivationDataset::open(path), FormatError);

  write_good();
  CHECK_THROWS_AS(ActivationDataset::open(path, 8u), FormatError);
}

TEST_CASE("an unfinished writer leaves an invalid file") {
  TempDir dir("tspsae_capture_partial");
  const auto path = dir.path / "data.tspa";
  const auto h = header(4, 5, 3);
  {
    DatasetWriter w(path, h);
    std::vector<float> v(20, 1.0f);
    w.append_instance(v);
    CHECK_THROWS_AS(w.append_instance(std::vector<float>(19)), DimensionError);
    CHECK_THROWS_AS(w.finish(), ContractError);
  }
  CHECK_THROWS_AS(ActivationDataset::open(path), IntegrityError);

  // Same size as a complete file but flagged bad.
  {
    DatasetWriter w(path, h);
    std::vector<float> v(20, 1.0f);
    for (int i = 0; i < 3; ++i) w.append_instance(v);
  }
  try {
    ActivationDataset::open(path);
    FAIL("expected IntegrityError");
  } catch (const IntegrityError& e) {
    CHECK(std::string(e.what()).find("invalid") != std::string::npos);
  }
}

TEST_CASE("capture: record counts, determinism, header provenance") {
  TempDir dir("tspsae_capture_run");
  const auto ckpt = write_policy(dir.path);
  CaptureRequest req;
  req.checkpoint = ckpt;
  req.output = dir.path / "a.tspa";
  req.num_instances = 10;
  req.n = 100;
  req.seed = 5;
  const auto h = capture::capture(req);
  CHECK(h.record_count() == 1000);
  CHECK(h.d_model == 16);
  CHECK(h.checkpoint_hash == io::file_hash(ckpt));
  CHECK(h.seed_begin == 5);
  CHECK(h.seed_end == 15);

  auto again = req;
  again.output = dir.path / "b.tspa";
  again.threads = 3;
  capture::capture(again);
  CHECK(slurp(req.output) == slurp(again.output));

  auto other = req;
  other.output = dir.path / "c.tspa";
  other.seed = 6;
  const auto h2 = capture::capture(other);
  CHECK(slurp(req.output) != slurp(other.output));
  CHECK(h2.d_model == h.d_model);
  CHECK(h2.record_count() == h.record_count());

  // Records equal a fresh encoder pass over the regenerated instance.
  const auto ds = ActivationDataset::open(req.output, 16u);
  const auto policy = policy::load_policy(ckpt);
  for (std::uint64_t i : {0ULL, 9ULL}) {
    const auto emb = policy::encode(policy, ds.instance(i)).node_embeddings();
    for (std::size_t j = 0; j < 100; j += 33) {
      const auto r = ds.record(i, j);
      for (std::size_t k = 0; k < 16; ++k) CHECK(r[k] == doctest::Approx(emb(j, k)).epsilon(1e-5));
    }
  }

  auto mismatch = req;
  mismatch.output = dir.path / "d.tspa";
  mismatch.expected_d_model = 32;
  CHECK_THROWS_AS(capture::capture(mismatch), FormatError);
  auto empty = req;
  empty.num_instances = 0;
  CHECK_THROWS_AS(capture::capture(empty), ParameterError);
}
