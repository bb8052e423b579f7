#include <chrono>
#include <cstdio>

#include "tspsae/error.hpp"
#include "tspsae/io/container.hpp"
#include "tspsae/pipeline/pipeline.hpp"
#include "tspsae/policy/checkpoint.hpp"

namespace tspsae::pipeline {

namespace {

using nlohmann::json;

void ensure_parent(const std::filesystem::path& p) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

json completion(const char* stage) { return {{"stage", stage}, {"status", "ok"}}; }

std::vector<tsp::Instance> instance_set(tsp::Distribution d, std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<tsp::Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(tsp::generate(d, n, seed + i));
  return out;
}

std::string hash_of(const std::filesystem::path& p) { return io::hex64(io::file_hash(p)); }

}  // namespace

json run_generate(const PipelineConfig& config) {
  const auto& g = config.generate;
  const auto dir = config.paths.resolve(config.paths.instances);
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < g.count; ++i) {
    const auto inst = tsp::generate(g.distribution, g.n, g.seed + i);
    char name[96];
    std::snprintf(name, sizeof name, "%s_n%zu_%llu.json", std::string(tsp::to_string(g.distribution)).c_str(), g.n,
                  static_cast<unsigned long long>(inst.seed));
    tsp::save_instance(inst, dir / name);
  }
  auto r = completion("generate");
  r["dir"] = dir.string();
  r["files"] = g.count;
  r["n"] = g.n;
  r["distribution"] = tsp::to_string(g.distribution);
  r["seed_begin"] = g.seed;
  r["seed_end"] = g.seed + g.count;
  return r;
}

json run_train_policy(const PipelineConfig& config, const std::optional<std::filesystem::path>& resume,
                      const Progress& progress) {
  training::TrainOutputs outputs{config.paths.resolve(config.paths.policy), config.paths.resolve(config.paths.train_log),
                                 resume};
  ensure_parent(outputs.checkpoint);
  ensure_parent(outputs.log);
  const auto summary = training::train(config.train, outputs, [&](const training::LogRecord& rec) {
    if (!progress) return;
    auto j = training::to_json(rec);
    j["event"] = "train";
    progress(j);
  });
  auto r = completion("train-policy");
  r["checkpoint"] = outputs.checkpoint.string();
  r["checkpoint_hash"] = hash_of(outputs.checkpoint);
  r["log"] = outputs.log.string();
  r["steps_run"] = summary.steps_run;
  r["final_step"] = summary.final_step;
  r["initial_eval"] = summary.initial_eval;
  r["final_eval"] = summary.final_eval;
  r["baseline"] = summary.baseline;
  r["stopped_early"] = summary.stopped_early;
  return r;
}

json run_eval(const PipelineConfig& config, const std::optional<std::filesystem::path>& checkpoint) {
  const auto path = checkpoint ? *checkpoint : config.paths.resolve(config.paths.policy);
  const auto policy = policy::load_policy(path);
  const auto& e = config.eval;
  const auto instances = instance_set(e.distribution, e.n, e.instances, e.seed);
  const auto tours = policy::greedy_tours(policy, std::span<const tsp::Instance>(instances), 64, config.threads);
  const bool exact = e.n <= tsp::kHeldKarpMaxNodes;

  double model = 0, nn = 0, opt2 = 0, hk = 0, gap_nn = 0, gap_2 = 0, gap_hk = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    const double len = tours[i].length;
    const auto nearest = tsp::nearest_neighbor(inst);
    const auto two = tsp::two_opt(inst, nearest);
    model += len;
    nn += nearest.length;
    opt2 += two.length;
    gap_nn += (len - nearest.length) / nearest.length;
    gap_2 += (len - two.length) / two.length;
    if (exact) {
      const double best = tsp::held_karp(inst).length;
      hk += best;
      gap_hk += (len - best) / best;
    }
  }
  const double m = double(instances.size());
  auto r = completion("eval");
  r["checkpoint"] = path.string();
  r["checkpoint_hash"] = hash_of(path);
  r["n"] = e.n;
  r["instances"] = e.instances;
  r["distribution"] = tsp::to_string(e.distribution);
  r["seed_begin"] = e.seed;
  r["policy_mean"] = model / m;
  r["nearest_neighbor_mean"] = nn / m;
  r["two_opt_mean"] = opt2 / m;
  r["gap_vs_nearest_neighbor"] = gap_nn / m;
  r["gap_vs_two_opt"] = gap_2 / m;
  if (exact) {
    r["held_karp_mean"] = hk / m;
    r["gap_vs_held_karp"] = gap_hk / m;
  } else {
    r["held_karp_mean"] = nullptr;
    r["gap_vs_held_karp"] = nullptr;
  }
  return r;
}

json run_capture(const PipelineConfig& config) {
  capture::CaptureRequest req;
  req.checkpoint = config.paths.resolve(config.paths.policy);
  req.output = config.paths.resolve(config.paths.dataset);
  req.distribution = config.capture.distribution;
  req.num_instances = config.capture.instances;
  req.n = config.capture.n;
  req.seed = config.capture.seed;
  req.threads = config.threads;
  req.expected_d_model = static_cast<std::uint32_t>(config.train.policy.d_model);
  ensure_parent(req.output);
  const auto h = capture::capture(req);
  auto r = completion("capture");
  r["dataset"] = req.output.string();
  r["records"] = h.record_count();
  r["d_model"] = h.d_model;
  r["nodes_per_instance"] = h.nodes_per_instance;
  r["instances"] = h.instance_count;
  r["checkpoint_hash"] = io::hex64(h.checkpoint_hash);
  r["seed_begin"] = h.seed_begin;
  r["seed_end"] = h.seed_end;
  r["bytes"] = h.file_size();
  return r;
}

json run_train_sae(const PipelineConfig& config) {
  const auto dataset_path = config.paths.resolve(config.paths.dataset);
  const auto data = capture::ActivationDataset::open(dataset_path, static_cast<std::uint32_t>(config.sae.d));
  const auto out = config.paths.resolve(config.paths.sae);
  const auto log = config.paths.resolve(config.paths.sae_log);
  ensure_parent(out);
  ensure_parent(log);
  const auto run = sae::train_sae(config.sae, data, log);
  const json metrics = sae::to_json(run.final_metrics);
  sae::save_sae(out, run.model, config.sae,
                {{"dataset", config.paths.dataset.string()},
                 {"policy_hash", io::hex64(data.header().checkpoint_hash)},
                 {"metrics", metrics}});
  auto r = completion("train-sae");
  r["checkpoint"] = out.string();
  r["checkpoint_hash"] = hash_of(out);
  r["log"] = log.string();
  r["latent"] = config.sae.latent();
  r["k"] = config.sae.k();
  r["train_records"] = run.train_rows;
  r["heldout_records"] = data.size() - run.heldout_begin;
  r["metrics"] = metrics;
  return r;
}

json run_grid_search(const PipelineConfig& config) {
  const auto data =
      capture::ActivationDataset::open(config.paths.resolve(config.paths.dataset), static_cast<std::uint32_t>(config.sae.d));
  const auto dir = config.paths.resolve(config.paths.grid);
  const auto rows = sae::grid_search(data, config.sae, config.grid, dir, config.threads);
  sae::write_grid_table(rows, dir / "results");
  const auto trend = sae::l1_trend(rows);
  std::size_t ok = 0;
  for (const auto& row : rows) ok += row.metrics.has_value();
  auto r = completion("grid-search");
  r["dir"] = dir.string();
  r["table"] = (dir / "results.json").string();
  r["runs"] = rows.size();
  r["succeeded"] = ok;
  r["failed"] = rows.size() - ok;
  r["l1_pairs"] = trend.pairs;
  r["l1_non_increasing_pairs"] = trend.non_increasing;
  if (!rows.empty() && rows.front().metrics) r["best"] = sae::to_json(rows.front());
  return r;
}

namespace {

struct Analysed {
  sae::LoadedSae sae;
  std::vector<analysis::FeatureSummary> summaries;
  analysis::Labels labels;
};

Analysed analyse(const PipelineConfig& config) {
  Analysed a{sae::load_sae(config.paths.resolve(config.paths.sae), config.sae.d), {}, {}};
  const auto data = capture::ActivationDataset::open(config.paths.resolve(config.paths.dataset),
                                                     static_cast<std::uint32_t>(config.sae.d));
  a.summaries = analysis::summarize(a.sae.model, data, 0, {}, config.threads);
  if (config.paths.labels) {
    a.labels = analysis::load_labels(config.paths.resolve(*config.paths.labels));
    analysis::apply_labels(a.summaries, a.labels);
  }
  return a;
}

json rankings(std::span<const analysis::FeatureSummary> s) {
  json r = json::object();
  for (auto key : {analysis::RankKey::mean, analysis::RankKey::firing_frequency, analysis::RankKey::max}) {
    r[std::string(analysis::to_string(key))] = analysis::rank_features(s, key);
  }
  return r;
}

}  // namespace

json run_analyze(const PipelineConfig& config) {
  const auto a = analyse(config);
  const auto dir = config.paths.resolve(config.paths.analysis);
  std::filesystem::create_directories(dir);
  json features = json::array();
  for (const auto& s : a.summaries) features.push_back(analysis::to_json(s));
  const json meta{{"sae_hash", hash_of(config.paths.resolve(config.paths.sae))},
                  {"dataset", config.paths.dataset.string()}};
  analysis::write_json(dir / "summaries.json", {{"schema_version", 1},
                                                {"features", features},
                                                {"rankings", rankings(a.summaries)},
                                                {"meta", meta}});
  const auto report = analysis::taxonomy_report(a.summaries, a.labels);
  analysis::write_json(dir / "taxonomy.json", analysis::to_json(report));

  const auto order = analysis::rank_features(a.summaries, config.analyze_rank_key);
  std::size_t dead = 0;
  for (const auto& s : a.summaries) dead += s.firing_frequency == 0.0;
  json top = json::array();
  for (std::size_t i = 0; i < std::min<std::size_t>(10, order.size()); ++i) {
    top.push_back(analysis::to_json(a.summaries[order[i]]));
  }
  auto r = completion("analyze");
  r["summaries"] = (dir / "summaries.json").string();
  r["taxonomy"] = (dir / "taxonomy.json").string();
  r["features"] = a.summaries.size();
  r["dead_features"] = dead;
  r["rank_key"] = analysis::to_string(config.analyze_rank_key);
  r["top"] = top;
  r["label_counts"] = analysis::to_json(report)["counts"];
  return r;
}

json run_export_explorer(const PipelineConfig& config) {
  const auto a = analyse(config);
  const auto policy_path = config.paths.resolve(config.paths.policy);
  const auto policy = policy::load_policy(policy_path, &config.train.policy);
  const auto& e = config.export_;

  auto order = analysis::rank_features(a.summaries, e.rank_key);
  if (e.top > 0 && e.top < order.size()) order.resize(e.top);

  const auto dir = config.paths.resolve(config.paths.explorer);
  const json meta{{"policy_hash", hash_of(policy_path)},
                  {"sae_hash", hash_of(config.paths.resolve(config.paths.sae))},
                  {"rank_key", analysis::to_string(e.rank_key)}};
  analysis::OverlayRequest req{order, e.distribution, e.num_instances, e.n, e.seed, config.threads};
  analysis::export_overlay(a.sae.model, policy, req, dir / "overlays", meta);

  std::vector<analysis::ManifestEntry> entries;
  std::vector<analysis::FeatureSummary> selected;
  for (auto f : order) {
    entries.push_back({a.summaries[f], "overlays/" + analysis::overlay_file_name(f)});
    selected.push_back(a.summaries[f]);
  }
  json manifest_meta = meta;
  manifest_meta["dataset"] = config.paths.dataset.string();
  manifest_meta["instances_summarised"] = a.summaries.front().instances;
  manifest_meta["overlay_seed_begin"] = e.seed;
  manifest_meta["overlay_instances"] = e.num_instances;
  manifest_meta["overlay_n"] = e.n;
  const auto manifest = analysis::manifest_json(entries, manifest_meta);
  analysis::write_json(dir / "manifest.json", manifest);
  analysis::write_json(dir / "ordering.json", {{"schema_version", 1}, {"orderings", rankings(selected)}});
  analysis::validate_manifest(manifest, dir);

  auto r = completion("export-explorer");
  r["manifest"] = (dir / "manifest.json").string();
  r["ordering"] = (dir / "ordering.json").string();
  r["overlays"] = order.size();
  r["features"] = order;
  return r;
}

}  // namespace tspsae::pipeline
