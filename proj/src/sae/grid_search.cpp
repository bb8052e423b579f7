#include "tspsae/sae/grid_search.hpp"

#include <algorithm>
#include <map>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "tspsae/error.hpp"

namespace tspsae::sae {

std::vector<SaeConfig> Grid::configs(const SaeConfig& base) const {
  std::vector<SaeConfig> out;
  for (std::size_t e : expansions) {
    for (double rho : k_ratios) {
      for (double l1 : l1s) {
        SaeConfig c = base;
        c.expansion = e;
        c.k_ratio = rho;
        c.l1 = l1;
        out.push_back(c);
      }
    }
  }
  return out;
}

nlohmann::json to_json(const Grid& g) {
  return {{"expansions", g.expansions}, {"k_ratios", g.k_ratios}, {"l1s", g.l1s}};
}

Grid grid_from_json(const nlohmann::json& j) {
  Grid g;
  try {
    g.expansions = j.value("expansions", g.expansions);
    g.k_ratios = j.value("k_ratios", g.k_ratios);
    g.l1s = j.value("l1s", g.l1s);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("grid: ") + e.what());
  }
  return g;
}

namespace {

std::string run_name(const SaeConfig& c) {
  std::ostringstream s;
  s << "sae_e" << c.expansion << "_k" << c.k_ratio << "_l" << c.l1;
  return s.str();
}

}  // namespace

void sort_rows(std::vector<GridRow>& rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) {
    if (a.metrics.has_value() != b.metrics.has_value()) return a.metrics.has_value();
    if (a.config.k_ratio != b.config.k_ratio) return a.config.k_ratio < b.config.k_ratio;
    if (!a.metrics) return false;
    return a.metrics->reconstruction_error < b.metrics->reconstruction_error;
  });
}

std::vector<GridRow> grid_search(const capture::ActivationDataset& data, const SaeConfig& base, const Grid& grid,
                                 const std::filesystem::path& out_dir, std::size_t threads) {
  if (grid.size() == 0) throw ParameterError("grid: empty grid");
  std::filesystem::create_directories(out_dir);
  const auto configs = grid.configs(base);
  std::vector<GridRow> rows(configs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < configs.size();) {
      GridRow& row = rows[i];
      row.config = configs[i];
      const std::string name = run_name(row.config);
      row.model_path = out_dir / (name + ".ckpt");
      try {
        auto run = train_sae(row.config, data, out_dir / (name + ".ndjson"));
        save_sae(row.model_path, run.model, row.config, {{"metrics", to_json(run.final_metrics)}});
        row.metrics = run.final_metrics;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, configs.size());
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  sort_rows(rows);
  return rows;
}

nlohmann::json to_json(const GridRow& row) {
  nlohmann::json j{{"expansion", row.config.expansion},
                   {"k_ratio", row.config.k_ratio},
                   {"l1", row.config.l1},
                   {"k", row.config.k()},
                   {"latent", row.config.latent()},
                   {"model", row.model_path.filename().string()}};
  if (row.metrics) {
    j["metrics"] = to_json(*row.metrics);
  } else {
    j["metrics"] = nullptr;
    j["error"] = row.error;
  }
  return j;
}

void write_grid_table(const std::vector<GridRow>& rows, const std::filesystem::path& stem) {
  nlohmann::json table = nlohmann::json::array();
  for (const auto& r : rows) table.push_back(to_json(r));
  const auto json_path = std::filesystem::path(stem.string() + ".json");
  const auto csv_path = std::filesystem::path(stem.string() + ".csv");
  std::ofstream js(json_path, std::ios::trunc);
  js << table.dump(2) << '\n';
  if (!js) throw std::runtime_error("write failed: " + json_path.string());

  std::ofstream csv(csv_path, std::ios::trunc);
  csv << "expansion,k_ratio,l1,k,reconstruction_error,mean_l0,mean_l1,dead_features,model,error\n";
  csv << std::setprecision(10);
  for (const auto& r : rows) {
    csv << r.config.expansion << ',' << r.config.k_ratio << ',' << r.config.l1 << ',' << r.config.k() << ',';
    if (r.metrics) {
      csv << r.metrics->reconstruction_error << ',' << r.metrics->mean_l0 << ',' << r.metrics->mean_l1 << ','
          << r.metrics->dead_features;
    } else {
      csv << ",,,";
    }
    std::string err = r.error;
    std::replace(err.begin(), err.end(), '"', '\'');
    csv << ',' << r.model_path.filename().string() << ",\"" << err << "\"\n";
  }
  if (!csv) throw std::runtime_error("write failed: " + csv_path.string());
}

L1Trend l1_trend(const std::vector<GridRow>& rows) {
  std::map<std::pair<std::size_t, double>, std::vector<const GridRow*>> groups;
  for (const auto& r : rows) groups[{r.config.expansion, r.config.k_ratio}].push_back(&r);
  L1Trend t;
  for (auto& [key, group] : groups) {
    if (std::any_of(group.begin(), group.end(), [](const GridRow* r) { return !r->metrics; })) continue;
    std::sort(group.begin(), group.end(), [](const GridRow* a, const GridRow* b) { return a->config.l1 < b->config.l1; });
    ++t.pairs;
    bool ok = true;
    for (std::size_t i = 1; i < group.size(); ++i) ok = ok && group[i]->metrics->mean_l1 <= group[i - 1]->metrics->mean_l1;
    t.non_increasing += ok;
  }
  return t;
}

}  // namespace tspsae::sae
