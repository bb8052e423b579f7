#pragma once

// Stage wiring behind the `tspsae` command line. Every stage reads one
// PipelineConfig, writes its artifacts under the workdir and returns a
// completion record; run_cli adds argument parsing and exit codes.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "tspsae/analysis/analysis.hpp"
#include "tspsae/sae/grid_search.hpp"
#include "tspsae/training/reinforce.hpp"

namespace tspsae::pipeline {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum ExitCode : int { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumerical = 4 };

inline constexpr const char* kWorkdirEnv = "TSPSAE_WORKDIR";

// Relative entries resolve against `workdir`.
struct Paths {
  std::filesystem::path workdir = ".";
  std::filesystem::path instances = "instances";
  std::filesystem::path policy = "policy.ckpt";
  std::filesystem::path train_log = "train.ndjson";
  std::filesystem::path dataset = "activations.tspa";
  std::filesystem::path sae = "sae.ckpt";
  std::filesystem::path sae_log = "sae.ndjson";
  std::filesystem::path grid = "grid";
  std::filesystem::path analysis = "analysis";
  std::filesystem::path explorer = "explorer";
  std::optional<std::filesystem::path> labels;

  std::filesystem::path resolve(const std::filesystem::path& p) const { return p.is_absolute() ? p : workdir / p; }
};

struct GenerateConfig {
  tsp::Distribution distribution = tsp::Distribution::uniform;
  std::size_t n = 20;
  std::size_t count = 100;
  std::uint64_t seed = 0;
};

struct EvalConfig {
  tsp::Distribution distribution = tsp::Distribution::uniform;
  std::size_t n = 20;
  std::size_t instances = 500;
  std::uint64_t seed = 0;
};

struct CaptureConfig {
  tsp::Distribution distribution = tsp::Distribution::uniform;
  std::size_t n = 100;
  std::uint64_t instances = 1000;
  std::uint64_t seed = 0;
};

struct ExportConfig {
  std::size_t top = 32;  // features exported, best first by rank_key; 0 = all
  analysis::RankKey rank_key = analysis::RankKey::mean;
  tsp::Distribution distribution = tsp::Distribution::uniform;
  std::size_t num_instances = 10;
  std::size_t n = 100;
  std::uint64_t seed = 0;
};

struct PipelineConfig {
  Paths paths;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  GenerateConfig generate;
  training::TrainConfig train;
  EvalConfig eval;
  CaptureConfig capture;
  sae::SaeConfig sae;
  sae::Grid grid;
  analysis::RankKey analyze_rank_key = analysis::RankKey::mean;
  ExportConfig export_;

  // Dimensional consistency (the SAE width must equal the policy d_model)
  // and per-stage ranges. ConfigError.
  void validate() const;
};

// Instance-stream seeds are offset from the global seed so stages never
// share instances.
inline constexpr std::uint64_t kGenerateSeedOffset = 3'000'000'000ULL;
inline constexpr std::uint64_t kCaptureSeedOffset = 2'000'000'000ULL;
inline constexpr std::uint64_t kExportSeedOffset = 4'000'000'000ULL;
inline constexpr std::uint64_t kEvalSeedOffset = 5'000'000'000ULL;

struct ConfigOverrides {
  std::optional<std::uint64_t> seed;  // replaces the global seed and every stage seed
  std::optional<std::size_t> threads;
  std::optional<std::filesystem::path> workdir;
  std::vector<std::string> set;  // "dotted.key=value", value parsed as JSON, else taken as a string
};

// Unknown keys, bad values and inconsistent dimensions are ConfigErrors.
// Workdir precedence: override, then $TSPSAE_WORKDIR, then the file.
PipelineConfig config_from_json(nlohmann::json j, const ConfigOverrides& overrides = {});
PipelineConfig load_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides = {});
nlohmann::json to_json(const PipelineConfig& config);

using Progress = std::function<void(const nlohmann::json&)>;

nlohmann::json run_generate(const PipelineConfig& config);
nlohmann::json run_train_policy(const PipelineConfig& config, const std::optional<std::filesystem::path>& resume = {},
                                const Progress& progress = {});
nlohmann::json run_eval(const PipelineConfig& config, const std::optional<std::filesystem::path>& checkpoint = {});
nlohmann::json run_capture(const PipelineConfig& config);
nlohmann::json run_train_sae(const PipelineConfig& config);
nlohmann::json run_grid_search(const PipelineConfig& config);
nlohmann::json run_analyze(const PipelineConfig& config);
nlohmann::json run_export_explorer(const PipelineConfig& config);

// Full command line. Machine-readable records go to `out` (one JSON object
// per line), human-readable text to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tspsae::pipeline
