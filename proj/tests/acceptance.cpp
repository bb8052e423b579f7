// Acceptance run: trains the desk-scale models and prints one PASS/FAIL line
// per criterion. Exit status is nonzero if any criterion fails.
//
//   acceptance [--workdir DIR] [--only NAME]...

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "support/brute_force.hpp"
#include "support/gradcheck.hpp"
#include "support/random_nets.hpp"
#include "tspsae/analysis/analysis.hpp"
#include "tspsae/error.hpp"
#include "tspsae/pipeline/pipeline.hpp"
#include "tspsae/policy/checkpoint.hpp"
#include "tspsae/sae/grid_search.hpp"
#include "tspsae/training/reinforce.hpp"

using namespace tspsae;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

double cpu_seconds() { return double(std::clock()) / CLOCKS_PER_SEC; }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void note(const std::string& line) { std::cerr << "  .. " << line << std::endl; }

// Desk-scale policy: small enough for a single core in well under the
// 30 CPU-minute budget.
policy::PolicyConfig desk_policy() {
  policy::PolicyConfig p;
  p.d_model = 64;
  p.layers = 2;
  p.heads = 4;
  p.ff_width = 256;
  return p;
}

training::TrainConfig desk_training(std::size_t n, std::size_t steps) {
  training::TrainConfig c;
  c.n = n;
  c.batch_size = 128;
  c.steps = steps;
  c.warmup_rollouts = 1000;
  c.adam.lr = 3e-4;
  c.policy = desk_policy();
  c.eval_every = 250;
  c.eval_instances = 500;
  c.log_every = 50;
  c.max_wall_seconds = 25 * 60;
  return c;
}

class Acceptance {
 public:
  explicit Acceptance(fs::path workdir) : dir_(std::move(workdir)) {}

  Outcome autodiff() {
    Rng rng(2024);
    double worst = 0.0;
    std::size_t failures = 0;
    const double start = cpu_seconds();
    for (int i = 0; i < 100; ++i) {
      Rng net_rng = rng.split(i);
      const auto net = i % 2 == 0 ? testing::random_two_layer_net(net_rng) : testing::random_attention_net(net_rng);
      const double err = testing::gradient_error(net.build, net.inputs, 1e-3);
      worst = std::max(worst, err);
      failures += !(err < 1e-4);
    }
    const double cpu = cpu_seconds() - start;
    return {failures == 0 && cpu < 60.0, "100 networks (MLP and attention/pointer), max relative error " + fmt(worst, 3) +
                                             ", " + std::to_string(failures) + " above 1e-4, " + fmt(cpu, 3) +
                                             " CPU-s (limit 60)"};
  }

  Outcome held_karp() {
    const double start = cpu_seconds();
    std::size_t mismatches = 0;
    const tsp::Distribution dists[] = {tsp::Distribution::uniform, tsp::Distribution::clusters, tsp::Distribution::ring};
    for (std::uint64_t i = 0; i < 200; ++i) {
      const auto inst = tsp::generate(dists[i % 3], 5 + i % 4, 900'000 + i);
      mismatches += tsp::held_karp(inst).length != testing::brute_force_optimum(inst);
    }
    const double cpu = cpu_seconds() - start;
    return {mismatches == 0 && cpu < 120.0, "200 instances with n in 5..8, " + std::to_string(mismatches) +
                                                " length mismatches vs exhaustive search, " + fmt(cpu, 3) +
                                                " CPU-s (limit 120)"};
  }

  Outcome policy_training() {
    const auto& r = desk_run();
    const auto evals = training::eval_set(r.config);
    double nn = 0.0, two = 0.0;
    for (const auto& inst : evals) {
      const auto t = tsp::nearest_neighbor(inst);
      nn += t.length;
      two += tsp::two_opt(inst, t).length;
    }
    nn /= double(evals.size());
    two /= double(evals.size());
    const bool below_untrained = r.summary.final_eval < r.summary.initial_eval;
    const bool beats_nn = r.summary.final_eval <= nn;
    const bool in_budget = r.cpu_seconds <= 30 * 60;
    const double vs_two = r.summary.final_eval / two - 1.0;
    return {below_untrained && beats_nn && in_budget,
            "n=20, 500 eval instances: trained " + fmt(r.summary.final_eval) + " vs untrained " +
                fmt(r.summary.initial_eval) + ", nearest neighbour " + fmt(nn) + "; " +
                std::to_string(r.summary.steps_run) + " steps in " + fmt(r.cpu_seconds / 60.0, 3) +
                " CPU-min (limit 30); stretch: " + fmt(100.0 * vs_two, 3) + "% above 2-opt " + fmt(two) + " (" +
                (vs_two <= 0.10 ? "met" : "missed") + ", target 10%)"};
  }

  Outcome small_n_gap() {
    const double start = cpu_seconds();
    auto cfg = desk_training(8, 800);
    cfg.seed = 8;
    cfg.eval_instances = 200;
    const auto ckpt = dir_ / "policy_n8.ckpt";
    const auto summary = training::train(cfg, {ckpt, dir_ / "policy_n8.ndjson", {}});
    const auto pol = policy::load_policy(ckpt, &cfg.policy);
    std::vector<tsp::Instance> evals;
    for (std::uint64_t i = 0; i < 200; ++i) evals.push_back(tsp::generate(tsp::Distribution::uniform, 8, 7'000'000'000ULL + i));
    const auto tours = policy::greedy_tours(pol, std::span<const tsp::Instance>(evals));
    double gap = 0.0;
    for (std::size_t i = 0; i < evals.size(); ++i) {
      const double best = tsp::held_karp(evals[i]).length;
      gap += (tours[i].length - best) / best;
    }
    gap /= double(evals.size());
    return {gap <= 0.15, "n=8, " + std::to_string(summary.steps_run) + " steps: mean gap vs Held-Karp " +
                             fmt(100.0 * gap, 3) + "% on 200 held-out instances (limit 15%), " +
                             fmt((cpu_seconds() - start) / 60.0, 3) + " CPU-min"};
  }

  Outcome sae_formula() {
    std::vector<float> out(3);
    const std::vector<float> z{3, 1, 2};
    sae::topk_sparsify(z, 2, sae::TopkMode::shifted, out);
    const bool example = out == std::vector<float>{1, 0, 0};

    Rng rng(31);
    std::size_t l0_violations = 0, shift_violations = 0;
    for (int trial = 0; trial < 10'000; ++trial) {
      const std::size_t n = 1 + rng.below(128), k = 1 + rng.below(n);
      std::vector<float> v(n), a(n), b(n);
      for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 3.0));
      for (auto mode : {sae::TopkMode::shifted, sae::TopkMode::masked}) {
        sae::topk_sparsify(v, k, mode, a);
        l0_violations += std::count_if(a.begin(), a.end(), [](float x) { return x != 0.0f; }) > std::ptrdiff_t(k);
      }
      // Integer-valued inputs keep z + c exact, so invariance is checked
      // bit for bit.
      std::vector<float> zi(n), zc(n);
      const float c = static_cast<float>(rng.below(2001)) - 1000.0f;
      for (std::size_t i = 0; i < n; ++i) {
        zi[i] = static_cast<float>(rng.below(4001)) - 2000.0f;
        zc[i] = zi[i] + c;
      }
      sae::topk_sparsify(zi, k, sae::TopkMode::shifted, a);
      sae::topk_sparsify(zc, k, sae::TopkMode::shifted, b);
      shift_violations += a != b;
    }
    return {example && l0_violations == 0 && shift_violations == 0,
            std::string("[3,1,2], k=2 -> ") + (example ? "[1,0,0]" : "wrong") + "; l0 > k in " +
                std::to_string(l0_violations) + " of 20000 fuzzed encodings; shift invariance broken in " +
                std::to_string(shift_violations) + " of 10000"};
  }

  Outcome sae_training() {
    const auto& r = desk_run();
    const double start = cpu_seconds();
    capture::CaptureRequest req;
    req.checkpoint = r.checkpoint;
    req.output = dir_ / "desk_activations.tspa";
    req.num_instances = 1000;
    req.n = 100;
    req.seed = 2'000'000'000;
    req.expected_d_model = 64;
    capture::capture(req);
    const auto data = capture::ActivationDataset::open(req.output, 64);

    sae::SaeConfig c;
    c.d = 64;
    c.expansion = 4;
    c.k_ratio = 0.1;
    c.l1 = 1e-3;
    c.steps = 10'000;
    c.batch_size = 256;
    c.eval_every = 2'000;
    const auto run = sae::train_sae(c, data, dir_ / "desk_sae.ndjson");
    sae::save_sae(dir_ / "desk_sae.ckpt", run.model, c);
    const double cpu = cpu_seconds() - start;

    std::uint64_t violations = 0;
    for (std::uint64_t first = 0; first < data.size(); first += 4096) {
      const auto count = std::min<std::uint64_t>(4096, data.size() - first);
      const Tensor zs = sae::features(run.model, data.rows(first, count));
      for (std::size_t row = 0; row < count; ++row) {
        std::size_t nz = 0;
        for (float v : zs.row(row)) nz += v != 0.0f;
        violations += nz > c.k();
      }
    }
    const double err = run.final_metrics.reconstruction_error;
    sae_ready_ = true;
    return {data.size() >= 100'000 && err < 0.15 && violations == 0 && cpu < 30 * 60,
            std::to_string(data.size()) + " records, e=4 k=" + std::to_string(c.k()) + " l1=1e-3: held-out 1-R^2 " +
                fmt(err) + " (limit 0.15), " + std::to_string(violations) + " samples with l0 > k, mean l0 " +
                fmt(run.final_metrics.mean_l0) + ", " + std::to_string(run.final_metrics.dead_features) +
                " dead features, " + fmt(cpu / 60.0, 3) + " CPU-min (limit 30)"};
  }

  Outcome grid() {
    const double start = cpu_seconds();
    auto cfg = desk_training(20, 300);
    cfg.policy.d_model = 32;
    cfg.policy.ff_width = 128;
    cfg.eval_every = 0;
    cfg.eval_instances = 100;
    cfg.seed = 32;
    const auto ckpt = dir_ / "policy_d32.ckpt";
    training::train(cfg, {ckpt, dir_ / "policy_d32.ndjson", {}});
    capture::CaptureRequest req;
    req.checkpoint = ckpt;
    req.output = dir_ / "d32_activations.tspa";
    req.num_instances = 100;
    req.n = 100;
    req.seed = 2'100'000'000;
    capture::capture(req);
    const auto data = capture::ActivationDataset::open(req.output, 32);

    sae::SaeConfig base;
    base.d = 32;
    base.steps = 2'000;
    base.batch_size = 256;
    base.eval_every = 0;
    const sae::Grid grid;
    const auto rows = sae::grid_search(data, base, grid, dir_ / "grid");
    sae::write_grid_table(rows, dir_ / "grid" / "results");
    const auto table = analysis::read_json(dir_ / "grid" / "results.json");
    std::size_t ok = 0;
    for (const auto& row : rows) ok += row.metrics.has_value();
    const auto trend = sae::l1_trend(rows);
    return {data.size() == 10'000 && table.size() == 24 && ok == 24 && trend.pairs == 6 && trend.non_increasing >= 5,
            std::to_string(grid.size()) + " runs on " + std::to_string(data.size()) + " records (d_model 32): " +
                std::to_string(table.size()) + "-row table, " + std::to_string(ok) +
                " succeeded; mean l1 non-increasing along lambda in " + std::to_string(trend.non_increasing) + " of " +
                std::to_string(trend.pairs) + " (e, rho) pairs (need 5 of 6), " + fmt((cpu_seconds() - start) / 60.0, 3) +
                " CPU-min"};
  }

  Outcome analysis_checks() {
    Rng rng(55);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t nodes = 1 + rng.below(150), feats = 1 + rng.below(64);
      analysis::FeatureActivations fa{0, Tensor(Shape{nodes, feats})};
      for (auto& v : fa.z.values()) v = rng.uniform() < 0.15 ? static_cast<float>(rng.uniform(0.0, 10.0)) : 0.0f;
      for (std::size_t i = 0; i < feats; ++i) {
        long double s = 0.0L;
        for (std::size_t j = 0; j < nodes; ++j) s += fa.z.values()[j * feats + i];
        worst = std::max(worst, std::abs(analysis::mean_activation(fa, i) - double(s / nodes)));
      }
    }

    // Overlay exports from the desk models, written twice.
    if (!sae_ready_) sae_training();
    const auto model = sae::load_sae(dir_ / "desk_sae.ckpt", 64).model;
    const auto pol = policy::load_policy(desk_run().checkpoint);
    analysis::OverlayRequest req;
    req.features = {0, 1, 2};
    req.seed = 4'000'000'000ULL;
    const auto a = analysis::export_overlay(model, pol, req, dir_ / "overlay_a");
    const auto b = analysis::export_overlay(model, pol, req, dir_ / "overlay_b");
    bool counts_ok = true, identical = true;
    for (std::size_t f = 0; f < a.size(); ++f) {
      const auto doc = analysis::read_json(a[f]);
      analysis::validate_overlay(doc);
      std::size_t points = 0;
      for (const auto& inst : doc["instances"]) points += inst["nodes"].size();
      counts_ok = counts_ok && doc["instances"].size() == 10 && points == 1000;
      identical = identical && slurp(a[f]) == slurp(b[f]);
    }
    return {worst <= 1e-9 && counts_ok && identical,
            "mu_i max deviation from brute force " + fmt(worst, 3) + " over 1000 fuzzed matrices (limit 1e-9); " +
                std::to_string(a.size()) + " overlays " + (counts_ok ? "with 10x100 points" : "with wrong point counts") +
                ", " + (identical ? "byte-identical" : "different") + " on re-export"};
  }

  Outcome end_to_end() {
    const auto start = std::chrono::steady_clock::now();
    const auto work = dir_ / "e2e";
    const std::string config = std::string(TSPSAE_SOURCE_DIR) + "/configs/miniature.json";
    std::string failed;
    for (const char* stage : {"generate", "train-policy", "capture", "train-sae", "analyze", "export-explorer"}) {
      const char* argv[] = {"tspsae", stage, "--config", config.c_str(), "--workdir", work.c_str()};
      std::ostringstream out, err;
      if (pipeline::run_cli(6, argv, out, err) != 0) {
        failed = std::string(stage) + ": " + err.str();
        break;
      }
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!failed.empty()) return {false, "stage failed, " + failed};
    const auto manifest = analysis::read_json(work / "explorer" / "manifest.json");
    std::string schema = "valid";
    try {
      analysis::validate_manifest(manifest, work / "explorer");
    } catch (const FormatError& e) {
      schema = e.what();
    }
    const std::size_t overlays = manifest["features"].size();
    return {schema == "valid" && overlays >= 1 && wall < 600,
            "generate -> train-policy -> capture -> train-sae -> analyze -> export-explorer in " + fmt(wall, 3) +
                " s (limit 600); " + std::to_string(overlays) + " overlay exports, schema " + schema};
  }

 private:
  struct DeskRun {
    training::TrainConfig config;
    training::TrainSummary summary;
    fs::path checkpoint;
    double cpu_seconds = 0.0;
  };

  const DeskRun& desk_run() {
    if (desk_) return *desk_;
    DeskRun r;
    r.config = desk_training(20, 1500);
    r.checkpoint = dir_ / "policy_n20.ckpt";
    const double start = cpu_seconds();
    r.summary = training::train(r.config, {r.checkpoint, dir_ / "policy_n20.ndjson", {}},
                                [](const training::LogRecord& rec) {
                                  if (rec.eval_mean_length) {
                                    note("n=20 step " + std::to_string(rec.step) + " eval " + fmt(*rec.eval_mean_length));
                                  }
                                });
    r.cpu_seconds = cpu_seconds() - start;
    desk_ = std::move(r);
    return *desk_;
  }

  fs::path dir_;
  std::optional<DeskRun> desk_;
  bool sae_ready_ = false;
};

}  // namespace

int main(int argc, char** argv) {
  fs::path workdir = fs::temp_directory_path() / "tspsae_acceptance";
  std::set<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      only.insert(argv[++i]);
    } else {
      std::cerr << "usage: acceptance [--workdir DIR] [--only NAME]...\n";
      return 2;
    }
  }
  fs::remove_all(workdir);
  fs::create_directories(workdir);
  Acceptance acc(workdir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"autodiff-gradients", [&] { return acc.autodiff(); }},
      {"held-karp-oracle", [&] { return acc.held_karp(); }},
      {"policy-training-n20", [&] { return acc.policy_training(); }},
      {"policy-gap-n8", [&] { return acc.small_n_gap(); }},
      {"sae-topk-formula", [&] { return acc.sae_formula(); }},
      {"sae-training", [&] { return acc.sae_training(); }},
      {"sae-grid-search", [&] { return acc.grid(); }},
      {"analysis", [&] { return acc.analysis_checks(); }},
      {"end-to-end-smoke", [&] { return acc.end_to_end(); }},
  };
  std::size_t passed = 0, run = 0;
  for (const auto& [name, check] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    ++run;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    passed += o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << " [" << fmt(secs, 3) << " s]"
              << std::endl;
  }
  std::cout << "acceptance: " << passed << "/" << run << " passed" << std::endl;
  return passed == run ? 0 : 1;
}
