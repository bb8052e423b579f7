#pragma once

// REINFORCE with a scalar moving-average baseline, warm-up initialisation
// and clipped advantages.

#include <filesystem>
#include <functional>
#include <optional>

#include "json.hpp"
#include "tspsae/numerics/adam.hpp"
#include "tspsae/policy/policy.hpp"

namespace tspsae::training {

struct TrainConfig {
  std::size_t n = 20;
  tsp::Distribution distribution = tsp::Distribution::uniform;
  std::size_t batch_size = 128;
  std::size_t steps = 20000;
  std::size_t warmup_rollouts = 1000;
  // Sampling temperature, linearly interpolated from start to end over the run.
  double temperature_start = 1.0;
  double temperature_end = 1.0;
  double advantage_clip = 10.0;  // +inf disables
  double baseline_decay = 0.99;
  double grad_clip = 1.0;  // global norm; <= 0 disables
  AdamConfig adam{};
  std::uint64_t seed = 0;

  policy::PolicyConfig policy{};

  std::size_t eval_every = 500;  // 0: only before and after training
  std::size_t eval_instances = 500;
  std::uint64_t eval_seed = 1'000'000'000;  // eval set is seeds eval_seed .. eval_seed + count - 1
  std::size_t log_every = 50;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  double max_wall_seconds = 0.0;     // 0: no limit; otherwise stop early and checkpoint
  std::size_t threads = 1;           // evaluation workers

  void validate() const;
  double temperature_at(std::size_t step) const;
};

nlohmann::json to_json(const TrainConfig& config);
// Missing fields keep their defaults; unknown fields are a FormatError.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct BaselineState {
  double value = 0.0;
  bool initialized = false;
};

// Mean greedy length over `warmup_rollouts` fresh instances; leaves the
// baseline uninitialised when that count is zero (the first training batch
// then seeds it).
BaselineState warmup(const policy::Policy<float>& policy, const TrainConfig& config, const Rng& rng);

// Advantages baseline - length, clipped to [-c, c].
std::vector<double> clipped_advantages(std::span<const double> lengths, double baseline, double clip);

// -mean(clip(A) * sum log p(tour)) for fixed tours, recorded on `tape`.
template <class T>
ad::Var<T> reinforce_loss(ad::Tape<T>& tape, policy::Policy<T>& policy, std::span<const tsp::Instance> instances,
                          std::span<const tsp::Tour> tours, double baseline, const TrainConfig& config,
                          double temperature);

struct StepResult {
  double loss = 0.0;
  double mean_length = 0.0;
  double grad_norm = 0.0;
};

// Samples one tour per instance, applies one Adam update and advances the
// baseline. NumericalError (naming `batch_seed`) on a non-finite loss or
// gradient; parameters are untouched in that case.
StepResult reinforce_step(policy::Policy<float>& policy, Adam<float>& optimizer, BaselineState& baseline,
                          std::span<const tsp::Instance> instances, const TrainConfig& config, double temperature,
                          Rng& rng, std::uint64_t batch_seed = 0);

// Fixed evaluation instances for a config.
std::vector<tsp::Instance> eval_set(const TrainConfig& config);
double greedy_mean_length(const policy::Policy<float>& policy, std::span<const tsp::Instance> instances,
                          std::size_t threads = 1);

// Training batch for `step`: instance seeds and the sampling stream are both
// derived from (seed, step), so any step can be replayed in isolation.
std::vector<tsp::Instance> training_batch(const TrainConfig& config, std::size_t step, Rng& step_rng);

struct LogRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double baseline = 0.0;
  std::optional<double> eval_mean_length;
  double wall_ms = 0.0;
};
nlohmann::json to_json(const LogRecord& record);

// Training state checkpoint: policy parameters, Adam moments, baseline and
// step. Loadable as a plain policy checkpoint as well.
struct TrainState {
  policy::Policy<float> policy;
  Adam<float> optimizer;
  BaselineState baseline;
  std::size_t next_step = 0;
};
void save_train_state(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config);
// Restores a state written by save_train_state, checking the policy shape
// against `config`.
void load_train_state(const std::filesystem::path& path, TrainState& state, const TrainConfig& config);

struct TrainOutputs {
  std::filesystem::path checkpoint;  // final checkpoint
  std::filesystem::path log;         // NDJSON
  std::optional<std::filesystem::path> resume_from;
};

struct TrainSummary {
  std::size_t steps_run = 0;
  std::size_t final_step = 0;
  double initial_eval = 0.0;
  double final_eval = 0.0;
  double baseline = 0.0;
  bool stopped_early = false;  // hit max_wall_seconds
};

// Full loop. Appends to the log when resuming. `on_record` (optional)
// sees every log record as it is written.
TrainSummary train(const TrainConfig& config, const TrainOutputs& outputs,
                   const std::function<void(const LogRecord&)>& on_record = {});

}  // namespace tspsae::training
