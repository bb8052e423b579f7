#include "tspsae/training/reinforce.hpp"

#include <chrono>
#include <utility>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "tspsae/error.hpp"
#include "tspsae/policy/checkpoint.hpp"

namespace tspsae::training {

void TrainConfig::validate() const {
  if (n < 3) throw ParameterError("train: n must be >= 3");
  if (batch_size == 0) throw ParameterError("train: batch_size must be positive");
  if (!(advantage_clip > 0.0)) throw ParameterError("train: advantage clip c must be > 0");
  if (!(baseline_decay > 0.0 && baseline_decay < 1.0)) throw ParameterError("train: baseline decay must be in (0, 1)");
  if (!(temperature_start > 0.0) || !(temperature_end > 0.0)) throw ParameterError("train: temperatures must be > 0");
  if (eval_instances == 0) throw ParameterError("train: eval_instances must be positive");
  if (max_wall_seconds < 0.0) throw ParameterError("train: max_wall_seconds must be >= 0");
  policy.validate();
}

double TrainConfig::temperature_at(std::size_t step) const {
  if (steps <= 1) return temperature_start;
  const double f = std::min(1.0, double(step) / double(steps - 1));
  return temperature_start + f * (temperature_end - temperature_start);
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"n", c.n},
                   {"distribution", std::string(tsp::to_string(c.distribution))},
                   {"batch_size", c.batch_size},
                   {"steps", c.steps},
                   {"warmup_rollouts", c.warmup_rollouts},
                   {"temperature_start", c.temperature_start},
                   {"temperature_end", c.temperature_end},
                   {"baseline_decay", c.baseline_decay},
                   {"grad_clip", c.grad_clip},
                   {"lr", c.adam.lr},
                   {"beta1", c.adam.beta1},
                   {"beta2", c.adam.beta2},
                   {"eps", c.adam.eps},
                   {"seed", c.seed},
                   {"policy", policy::config_to_json(c.policy)},
                   {"eval_every", c.eval_every},
                   {"eval_instances", c.eval_instances},
                   {"eval_seed", c.eval_seed},
                   {"log_every", c.log_every},
                   {"checkpoint_every", c.checkpoint_every},
                   {"max_wall_seconds", c.max_wall_seconds},
                   {"threads", c.threads}};
  // JSON has no infinity; null means "no clipping".
  j["advantage_clip"] = std::isfinite(c.advantage_clip) ? nlohmann::json(c.advantage_clip) : nlohmann::json(nullptr);
  return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("train config: expected an object");
  TrainConfig c;
  const nlohmann::json defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw FormatError("train config: unknown field '" + key + "'");
  }
  try {
    c.n = j.value("n", c.n);
    if (j.contains("distribution")) c.distribution = tsp::parse_distribution(j["distribution"].get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.warmup_rollouts = j.value("warmup_rollouts", c.warmup_rollouts);
    c.temperature_start = j.value("temperature_start", c.temperature_start);
    c.temperature_end = j.value("temperature_end", c.temperature_end);
    if (j.contains("advantage_clip")) {
      c.advantage_clip = j["advantage_clip"].is_null() ? std::numeric_limits<double>::infinity()
                                                       : j["advantage_clip"].get<double>();
    }
    c.baseline_decay = j.value("baseline_decay", c.baseline_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.seed = j.value("seed", c.seed);
    if (j.contains("policy")) c.policy = policy::config_from_json(j["policy"]);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.eval_instances = j.value("eval_instances", c.eval_instances);
    c.eval_seed = j.value("eval_seed", c.eval_seed);
    c.log_every = j.value("log_every", c.log_every);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.max_wall_seconds = j.value("max_wall_seconds", c.max_wall_seconds);
    c.threads = j.value("threads", c.threads);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("train config: ") + e.what());
  }
  return c;
}

std::vector<tsp::Instance> eval_set(const TrainConfig& config) {
  std::vector<tsp::Instance> out;
  out.reserve(config.eval_instances);
  for (std::size_t i = 0; i < config.eval_instances; ++i) {
    out.push_back(tsp::generate(config.distribution, config.n, config.eval_seed + i));
  }
  return out;
}

double greedy_mean_length(const policy::Policy<float>& policy, std::span<const tsp::Instance> instances,
                          std::size_t threads) {
  const auto tours = policy::greedy_tours(policy, instances, 64, threads);
  double total = 0.0;
  for (const auto& t : tours) total += t.length;
  return total / double(tours.size());
}

namespace {

// Keys into the root stream; training steps use their own index.
constexpr std::uint64_t kWarmupKey = ~std::uint64_t{0};

std::vector<tsp::Instance> fresh_instances(const TrainConfig& config, std::size_t count, Rng& rng) {
  std::vector<tsp::Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(tsp::generate(config.distribution, config.n, rng.engine()()));
  return out;
}

}  // namespace

std::vector<tsp::Instance> training_batch(const TrainConfig& config, std::size_t step, Rng& step_rng) {
  step_rng = Rng(config.seed).split(step);
  return fresh_instances(config, config.batch_size, step_rng);
}

BaselineState warmup(const policy::Policy<float>& policy, const TrainConfig& config, const Rng& rng) {
  BaselineState state;
  if (config.warmup_rollouts == 0) return state;
  Rng stream = rng.split(kWarmupKey);
  const auto instances = fresh_instances(config, config.warmup_rollouts, stream);
  state.value = greedy_mean_length(policy, instances, config.threads);
  state.initialized = true;
  if (!std::isfinite(state.value) || state.value <= 0.0) {
    throw NumericalError("warmup: baseline " + std::to_string(state.value) + " is not finite and positive");
  }
  return state;
}

std::vector<double> clipped_advantages(std::span<const double> lengths, double baseline, double clip) {
  std::vector<double> out(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) out[i] = std::clamp(baseline - lengths[i], -clip, clip);
  return out;
}

template <class T>
ad::Var<T> reinforce_loss(ad::Tape<T>& tape, policy::Policy<T>& policy, std::span<const tsp::Instance> instances,
                          std::span<const tsp::Tour> tours, double baseline, const TrainConfig& config,
                          double temperature) {
  const auto enc = policy.encode(tape, instances);
  const auto replayed = policy.replay(tape, enc, tours, temperature);
  std::vector<double> lengths;
  for (const auto& t : tours) lengths.push_back(t.length);
  auto weights = clipped_advantages(lengths, baseline, config.advantage_clip);
  for (auto& w : weights) w = -w / double(tours.size());
  return ad::weighted_sum(replayed.total_log_prob, std::span<const double>(weights));
}

StepResult reinforce_step(policy::Policy<float>& policy, Adam<float>& optimizer, BaselineState& baseline,
                          std::span<const tsp::Instance> instances, const TrainConfig& config, double temperature,
                          Rng& rng, std::uint64_t batch_seed) {
  StepResult result;
  const auto fail = [&](const std::string& what) {
    std::ostringstream msg;
    msg << "reinforce_step: " << what << " (batch seed " << batch_seed << ", mean length " << result.mean_length
        << ", baseline " << baseline.value << ")";
    return NumericalError(msg.str());
  };
  const auto params = policy.parameters();
  for (const auto* p : params) {
    if (!p->value.all_finite()) throw fail("non-finite parameter '" + p->name + "'");
  }

  ad::Tape<float> tape;
  const auto enc = policy.encode(tape, instances);
  policy::Rollout<float> rollout;
  try {
    rollout = policy.rollout(tape, enc, policy::DecodeMode::sample(temperature), &rng);
  } catch (const ContractError& e) {
    // NaN logits look like fully masked rows to the softmax.
    if (!enc.nodes.value().all_finite()) throw fail(std::string("non-finite activations: ") + e.what());
    throw;
  }

  std::vector<double> lengths;
  for (const auto& t : rollout.tours) lengths.push_back(t.length);
  for (double l : lengths) result.mean_length += l;
  result.mean_length /= double(lengths.size());
  if (!baseline.initialized) baseline = {result.mean_length, true};

  auto weights = clipped_advantages(lengths, baseline.value, config.advantage_clip);
  for (auto& w : weights) w = -w / double(lengths.size());
  const auto loss = ad::weighted_sum(rollout.total_log_prob, std::span<const double>(weights));
  result.loss = loss.value().item();
  if (!std::isfinite(result.loss)) throw fail("non-finite loss " + std::to_string(result.loss));

  optimizer.zero_grad();
  tape.backward(loss);
  result.grad_norm = config.grad_clip > 0.0 ? clip_grad_norm(params, config.grad_clip) : grad_norm(params);
  if (!std::isfinite(result.grad_norm)) throw fail("non-finite gradient norm");
  optimizer.step();

  baseline.value = config.baseline_decay * baseline.value + (1.0 - config.baseline_decay) * result.mean_length;
  return result;
}

nlohmann::json to_json(const LogRecord& r) {
  return {{"step", r.step},
          {"loss", r.loss},
          {"baseline", r.baseline},
          {"eval_mean_length", r.eval_mean_length ? nlohmann::json(*r.eval_mean_length) : nlohmann::json(nullptr)},
          {"wall_ms", r.wall_ms}};
}

void save_train_state(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config) {
  auto c = policy::to_container(state.policy, {{"train_config", to_json(config)},
                                               {"next_step", state.next_step},
                                               {"baseline", state.baseline.value},
                                               {"baseline_initialized", state.baseline.initialized},
                                               {"adam_step", state.optimizer.step_count()}});
  const auto params = state.policy.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    c.tensors.push_back({"adam.m." + params[i]->name, state.optimizer.first_moments()[i]});
    c.tensors.push_back({"adam.v." + params[i]->name, state.optimizer.second_moments()[i]});
  }
  io::write_container(path, c);
}

void load_train_state(const std::filesystem::path& path, TrainState& state, const TrainConfig& config) {
  auto c = io::read_container(path);
  std::vector<io::NamedTensor> moments;
  std::erase_if(c.tensors, [&](io::NamedTensor& t) {
    if (t.name.rfind("adam.", 0) != 0) return false;
    moments.push_back(std::move(t));
    return true;
  });
  const auto loaded = policy::from_container(c, &config.policy);
  auto dst = state.policy.parameters();
  const auto src = loaded.parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;

  io::Container m;
  m.kind = "adam";
  m.tensors = std::move(moments);
  for (std::size_t i = 0; i < dst.size(); ++i) {
    const Tensor& first = m.tensor("adam.m." + dst[i]->name);
    const Tensor& second = m.tensor("adam.v." + dst[i]->name);
    if (first.shape() != dst[i]->value.shape() || second.shape() != dst[i]->value.shape()) {
      throw FormatError(path.string() + ": optimizer state shape mismatch for '" + dst[i]->name + "'");
    }
    state.optimizer.first_moments()[i] = first;
    state.optimizer.second_moments()[i] = second;
  }
  try {
    state.optimizer.set_step_count(c.meta.at("adam_step").get<std::uint64_t>());
    state.baseline.value = c.meta.at("baseline").get<double>();
    state.baseline.initialized = c.meta.at("baseline_initialized").get<bool>();
    state.next_step = c.meta.at("next_step").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": not a training checkpoint (" + e.what() + ")");
  }
}

TrainSummary train(const TrainConfig& config, const TrainOutputs& outputs,
                   const std::function<void(const LogRecord&)>& on_record) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  };

  Rng root(config.seed);
  Rng init = root.split(kWarmupKey - 1);
  TrainState state{policy::Policy<float>(config.policy, init), Adam<float>(), {}, 0};
  state.optimizer = Adam<float>(state.policy.parameters(), config.adam);
  if (outputs.resume_from) {
    load_train_state(*outputs.resume_from, state, config);
    for (const auto* p : std::as_const(state.policy).parameters()) {
      if (!p->value.all_finite()) {
        throw NumericalError("train: " + outputs.resume_from->string() + " has non-finite parameter '" + p->name +
                             "' (seed " + std::to_string(config.seed) + ")");
      }
    }
  }

  const auto eval_instances = eval_set(config);
  TrainSummary summary;
  summary.initial_eval = greedy_mean_length(state.policy, eval_instances, config.threads);

  std::ofstream log(outputs.log, outputs.resume_from ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open training log " + outputs.log.string());
  const auto emit = [&](LogRecord r) {
    r.wall_ms = elapsed_ms();
    log << to_json(r).dump() << '\n';
    log.flush();
    if (!log) throw std::runtime_error("write failed: " + outputs.log.string());
    if (on_record) on_record(r);
  };
  const auto checkpoint = [&](const std::filesystem::path& path) {
    try {
      save_train_state(path, state, config);
    } catch (const std::exception& e) {
      throw std::runtime_error("checkpoint " + path.string() + ": " + e.what());
    }
  };

  if (!outputs.resume_from) {
    state.baseline = warmup(state.policy, config, root);
    emit({0, 0.0, state.baseline.value, summary.initial_eval, 0.0});
  }

  double last_loss = 0.0;
  for (std::size_t step = state.next_step; step < config.steps; ++step) {
    if (config.max_wall_seconds > 0.0 && elapsed_ms() > 1000.0 * config.max_wall_seconds) {
      summary.stopped_early = true;
      break;
    }
    Rng step_rng;
    const auto batch = training_batch(config, step, step_rng);
    const auto r = reinforce_step(state.policy, state.optimizer, state.baseline, batch, config,
                                  config.temperature_at(step), step_rng, root.split(step).seed());
    last_loss = r.loss;
    state.next_step = step + 1;
    ++summary.steps_run;

    const std::size_t done = step + 1;
    const bool eval_now = (config.eval_every > 0 && done % config.eval_every == 0) || done == config.steps;
    const bool log_now = eval_now || (config.log_every > 0 && done % config.log_every == 0);
    if (log_now) {
      LogRecord rec{done, r.loss, state.baseline.value, std::nullopt, 0.0};
      if (eval_now) rec.eval_mean_length = greedy_mean_length(state.policy, eval_instances, config.threads);
      emit(rec);
    }
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done != config.steps) {
      checkpoint(outputs.checkpoint.string() + ".step" + std::to_string(done));
    }
  }

  summary.final_step = state.next_step;
  summary.final_eval = greedy_mean_length(state.policy, eval_instances, config.threads);
  summary.baseline = state.baseline.value;
  if (summary.stopped_early) emit({state.next_step, last_loss, state.baseline.value, summary.final_eval, 0.0});
  checkpoint(outputs.checkpoint);
  return summary;
}

template ad::Var<float> reinforce_loss(ad::Tape<float>&, policy::Policy<float>&, std::span<const tsp::Instance>,
                                       std::span<const tsp::Tour>, double, const TrainConfig&, double);
template ad::Var<double> reinforce_loss(ad::Tape<double>&, policy::Policy<double>&, std::span<const tsp::Instance>,
                                        std::span<const tsp::Tour>, double, const TrainConfig&, double);

}  // namespace tspsae::training
