#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "tspsae/sae/sae.hpp"

namespace tspsae::sae {

struct Grid {
  std::vector<std::size_t> expansions{1, 4, 16};
  std::vector<double> k_ratios{0.01, 0.1};
  std::vector<double> l1s{1e-4, 1e-3, 1e-2, 1e-1};

  std::size_t size() const { return expansions.size() * k_ratios.size() * l1s.size(); }
  // Expansion-major, then k-ratio, then l1; other fields from `base`.
  std::vector<SaeConfig> configs(const SaeConfig& base) const;
};

nlohmann::json to_json(const Grid& grid);
Grid grid_from_json(const nlohmann::json& j);

struct GridRow {
  SaeConfig config;
  std::optional<SaeMetrics> metrics;  // empty when the run failed
  std::filesystem::path model_path;
  std::string error;
};

// One SAE per grid point, checkpoints and NDJSON logs under `out_dir`.
// A failing run is recorded and the search continues. Rows come back
// sorted: by k-ratio (fixed sparsity level), then reconstruction error,
// failed runs last. Runs are spread over `threads` workers.
std::vector<GridRow> grid_search(const capture::ActivationDataset& data, const SaeConfig& base, const Grid& grid,
                                 const std::filesystem::path& out_dir, std::size_t threads = 1);

void sort_rows(std::vector<GridRow>& rows);
nlohmann::json to_json(const GridRow& row);
// Writes <stem>.json and <stem>.csv; model paths are file names relative
// to the run directory.
void write_grid_table(const std::vector<GridRow>& rows, const std::filesystem::path& stem);

// Sparsity response to the l1 coefficient: for each (expansion, k-ratio)
// pair with every l1 run successful, whether mean l1 of the codes is
// non-increasing as the coefficient grows.
struct L1Trend {
  std::size_t pairs = 0;
  std::size_t non_increasing = 0;
};
L1Trend l1_trend(const std::vector<GridRow>& rows);

}  // namespace tspsae::sae
