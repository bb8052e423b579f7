#include <cmath>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "tspsae/error.hpp"
#include "tspsae/io/container.hpp"
#include "tspsae/policy/checkpoint.hpp"
#include "tspsae/training/reinforce.hpp"

using namespace tspsae;
using namespace tspsae::training;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.n = 10;
  c.batch_size = 16;
  c.steps = 6;
  c.warmup_rollouts = 32;
  c.policy = {.d_model = 16, .layers = 1, .heads = 2, .ff_width = 32};
  c.eval_every = 3;
  c.eval_instances = 20;
  c.log_every = 1;
  c.adam.lr = 1e-3;
  c.seed = 17;
  return c;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("config validation and JSON round-trip") {
  auto c = tiny_config();
  CHECK_NOTHROW(c.validate());
  const auto back = train_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  c.advantage_clip = std::numeric_limits<double>::infinity();
  CHECK(std::isinf(train_config_from_json(to_json(c)).advantage_clip));

  CHECK_THROWS_AS(train_config_from_json({{"bogus", 1}}), FormatError);
  CHECK_THROWS_AS(train_config_from_json({{"n", "twenty"}}), FormatError);
  auto bad = tiny_config();
  bad.advantage_clip = 0.0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = tiny_config();
  bad.baseline_decay = 1.0;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("temperature schedule interpolates linearly") {
  auto c = tiny_config();
  c.steps = 11;
  c.temperature_start = 2.0;
  c.temperature_end = 1.0;
  CHECK(c.temperature_at(0) == 2.0);
  CHECK(c.temperature_at(5) == doctest::Approx(1.5));
  CHECK(c.temperature_at(10) == 1.0);
  CHECK(c.temperature_at(50) == 1.0);
}

TEST_CASE("clipped advantages stay within the bound") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> lengths(32);
    for (auto& l : lengths) l = rng.uniform(0.0, 50.0);
    const double baseline = rng.uniform(0.0, 50.0), c = rng.uniform(0.1, 20.0);
    const auto a = clipped_advantages(lengths, baseline, c);
    for (std::size_t i = 0; i < a.size(); ++i) {
      REQUIRE(std::abs(a[i]) <= c);
      if (std::abs(baseline - lengths[i]) <= c) REQUIRE(a[i] == baseline - lengths[i]);
    }
  }
}

TEST_CASE("warmup: deterministic, zero-rollout fallback, plausible untrained baseline") {
  const auto c = tiny_config();
  Rng init(1);
  const policy::Policy<float> p(c.policy, init);
  const auto a = warmup(p, c, Rng(c.seed));
  const auto b = warmup(p, c, Rng(c.seed));
  CHECK(a.initialized);
  CHECK(a.value == b.value);
  CHECK(std::isfinite(a.value));
  CHECK(a.value > 0.0);

  auto zero = c;
  zero.warmup_rollouts = 0;
  CHECK_FALSE(warmup(p, zero, Rng(c.seed)).initialized);
  // The first batch then seeds the baseline with its own mean.
  policy::Policy<float> q(c.policy, init);
  Adam<float> opt(q.parameters(), c.adam);
  BaselineState s;
  Rng step_rng;
  const auto batch = training_batch(zero, 0, step_rng);
  const auto r = reinforce_step(q, opt, s, batch, zero, 1.0, step_rng);
  CHECK(s.initialized);
  CHECK(s.value == doctest::Approx(r.mean_length));  // EMA of equal values

  // Untrained policy on uniform n=100. Oracles: a uniformly random tour
  // over the same kind of instances (Monte Carlo) bounds it from above, and
  // the asymptotic optimum 0.7124 * sqrt(n) bounds it from below.
  auto big = c;
  big.n = 100;
  big.warmup_rollouts = 20;
  const auto w = warmup(p, big, Rng(4));
  Rng mc(77);
  double random_tours = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto inst = tsp::generate(tsp::Distribution::uniform, 100, 5000 + trial);
    std::vector<std::size_t> order(100);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), mc.engine());
    random_tours += tsp::tour_length(inst, order);
  }
  random_tours /= 200.0;
  CHECK(random_tours == doctest::Approx(52.1).epsilon(0.03));  // 0.5214 * n
  CHECK(w.value >= 0.7124 * std::sqrt(100.0));
  CHECK(w.value <= random_tours);
}

TEST_CASE("reinforce_step: zero advantage leaves parameters unchanged") {
  const auto c = tiny_config();
  Rng init(2);
  policy::Policy<float> p(c.policy, init);
  Adam<float> opt(p.parameters(), c.adam);
  std::vector<tsp::Instance> batch{tsp::generate(tsp::Distribution::uniform, 10, 5)};

  // Sample once to learn the tour length the step will see.
  Rng probe(9);
  const auto seen = policy::rollout(p, batch[0], policy::DecodeMode::sample(1.0), &probe);
  BaselineState baseline{seen.tour.length, true};

  std::vector<Tensor> before;
  for (const auto* q : p.parameters()) before.push_back(q->value);
  Rng rng(9);
  const auto r = reinforce_step(p, opt, baseline, batch, c, 1.0, rng);
  CHECK(r.loss == 0.0);
  CHECK(r.grad_norm == 0.0);
  const auto after = p.parameters();
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i]->value == before[i]);
}

TEST_CASE("reinforce_step: inactive clipping gives an identical update") {
  auto run = [](double clip) {
    auto c = tiny_config();
    c.advantage_clip = clip;
    Rng init(6);
    policy::Policy<float> p(c.policy, init);
    Adam<float> opt(p.parameters(), c.adam);
    BaselineState baseline{4.0, true};
    Rng step_rng;
    const auto batch = training_batch(c, 3, step_rng);
    reinforce_step(p, opt, baseline, batch, c, 1.0, step_rng);
    std::vector<Tensor> out;
    for (const auto* q : p.parameters()) out.push_back(q->value);
    return std::make_pair(out, baseline.value);
  };
  // Tour lengths at n=10 are far below 1e6 away from the baseline.
  const auto [a, ba] = run(std::numeric_limits<double>::infinity());
  const auto [b, bb] = run(1e6);
  CHECK(a == b);
  CHECK(ba == bb);
}

TEST_CASE("reinforce_step: non-finite values abort with the batch seed") {
  const auto c = tiny_config();
  Rng init(2);
  policy::Policy<float> p(c.policy, init);
  p.parameter("dec.logit_k").value[0] = std::numeric_limits<float>::quiet_NaN();
  Adam<float> opt(p.parameters(), c.adam);
  BaselineState baseline{4.0, true};
  Rng rng(1);
  const auto batch = std::vector<tsp::Instance>{tsp::generate(tsp::Distribution::uniform, 10, 1)};
  try {
    reinforce_step(p, opt, baseline, batch, c, 1.0, rng, 12345);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("12345") != std::string::npos);
  }
}

TEST_CASE("training loss gradient matches finite differences (d_model 8, n 5)") {
  auto c = tiny_config();
  c.policy = {.d_model = 8, .layers = 2, .heads = 2, .ff_width = 16};
  c.advantage_clip = 0.5;  // some advantages clip, some do not
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng init(seed + 30);
    policy::Policy<double> p(c.policy, init);
    std::vector<tsp::Instance> instances;
    for (std::uint64_t s = 0; s < 4; ++s) instances.push_back(tsp::generate(tsp::Distribution::uniform, 5, seed * 7 + s));
    std::vector<tsp::Tour> tours;
    {
      ad::Tape<double> tape(false);
      const auto& cp = p;
      Rng rng(seed);
      tours = cp.rollout(tape, cp.encode(tape, instances), policy::DecodeMode::sample(1.0), &rng).tours;
    }
    double baseline = 0.0;
    for (const auto& t : tours) baseline += t.length;
    baseline /= double(tours.size());

    ad::Tape<double> tape;
    tape.backward(reinforce_loss(tape, p, instances, tours, baseline, c, 1.0));
    auto value = [&] {
      ad::Tape<double> t(true);
      return reinforce_loss(t, p, instances, tours, baseline, c, 1.0).value().item();
    };

    double diff = 0.0, na = 0.0, nb = 0.0;
    const double h = 1e-5;
    for (auto* q : p.parameters()) {
      for (std::size_t i = 0; i < q->value.size(); ++i) {
        const double orig = q->value[i];
        q->value[i] = orig + h;
        const double up = value();
        q->value[i] = orig - h;
        const double down = value();
        q->value[i] = orig;
        const double fd = (up - down) / (2 * h);
        diff += (fd - q->grad[i]) * (fd - q->grad[i]);
        na += q->grad[i] * q->grad[i];
        nb += fd * fd;
      }
    }
    CHECK(na > 0.0);
    CHECK(std::sqrt(diff) / std::max(std::sqrt(na), std::sqrt(nb)) < 1e-3);
  }
}

TEST_CASE("train: log format, improvement signal, and bitwise resume") {
  TempDir dir("tspsae_train_test");
  auto c = tiny_config();
  c.checkpoint_every = 3;
  const auto full = train(c, {dir.path / "full.ckpt", dir.path / "full.log", {}});
  CHECK(full.steps_run == 6);
  CHECK(full.final_step == 6);
  CHECK(std::filesystem::exists(dir.path / "full.ckpt.step3"));

  const auto lines = read_lines(dir.path / "full.log");
  REQUIRE(lines.size() == 7);  // step 0 (warm-up) + steps 1..6
  for (const auto& line : lines) {
    const auto j = nlohmann::json::parse(line);
    for (const char* key : {"step", "loss", "baseline", "eval_mean_length", "wall_ms"}) CHECK(j.contains(key));
  }
  CHECK(nlohmann::json::parse(lines[3])["eval_mean_length"].is_number());
  CHECK(nlohmann::json::parse(lines[2])["eval_mean_length"].is_null());

  // Resume from the step-3 checkpoint into a fresh log.
  const auto resumed = train(c, {dir.path / "resumed.ckpt", dir.path / "resumed.log", dir.path / "full.ckpt.step3"});
  CHECK(resumed.steps_run == 3);
  const auto tail = read_lines(dir.path / "resumed.log");
  REQUIRE(tail.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    auto a = nlohmann::json::parse(lines[4 + i]);
    auto b = nlohmann::json::parse(tail[i]);
    a.erase("wall_ms");
    b.erase("wall_ms");
    CHECK(a.dump() == b.dump());
  }
  CHECK(slurp(dir.path / "full.ckpt") == slurp(dir.path / "resumed.ckpt"));
  CHECK(full.final_eval == resumed.final_eval);

  // The training checkpoint doubles as a policy checkpoint.
  CHECK(io::read_container(dir.path / "full.ckpt").kind == "policy");
  const auto loaded = policy::load_policy(dir.path / "full.ckpt", &c.policy);
  const auto evals = eval_set(c);
  CHECK(greedy_mean_length(loaded, evals) == full.final_eval);
}

TEST_CASE("train: I/O failures name the path") {
  auto c = tiny_config();
  c.steps = 1;
  try {
    train(c, {"/nonexistent-dir/x.ckpt", "/nonexistent-dir/x.log", {}});
    FAIL("expected failure");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("/nonexistent-dir/x.log") != std::string::npos);
  }
}
