#include <cstdlib>
#include <fstream>
#include <set>

#include "tspsae/error.hpp"
#include "tspsae/pipeline/pipeline.hpp"

namespace tspsae::pipeline {

namespace {

using nlohmann::json;

// Strict reader for one config object: typed fields, unknown keys rejected.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError(name_ + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(name_ + "." + key + ": wrong type (" + j_.at(key).dump() + ")");
    }
  }

  void distribution(const std::string& key, tsp::Distribution& out) {
    std::string s(tsp::to_string(out));
    get(key, s);
    try {
      out = tsp::parse_distribution(s);
    } catch (const ParameterError& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  void rank_key(const std::string& key, analysis::RankKey& out) {
    std::string s(analysis::to_string(out));
    get(key, s);
    try {
      out = analysis::parse_rank_key(s);
    } catch (const ParameterError& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  void path(const std::string& key, std::filesystem::path& out) {
    std::string s = out.string();
    get(key, s);
    out = s;
  }

  void skip(const std::string& key) { used_.insert(key); }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(name_ + ": unknown field '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> used_;
};

json section(const json& root, const char* key) {
  if (!root.contains(key)) return json::object();
  const auto& s = root.at(key);
  if (s.is_null()) return json::object();
  return s;
}

void apply_set(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: empty component in '" + key + "'");
    if (!node->is_object()) throw ConfigError("--set: '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

}  // namespace

void PipelineConfig::validate() const {
  try {
    train.validate();
    sae.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (sae.d != train.policy.d_model) {
    throw ConfigError("sae.d = " + std::to_string(sae.d) + " does not match the policy d_model = " +
                      std::to_string(train.policy.d_model) + "; the SAE reads the policy's residual stream");
  }
  if (threads == 0) throw ConfigError("threads must be >= 1");
  if (generate.n < 3 || generate.count == 0) throw ConfigError("generate: need n >= 3 and count >= 1");
  if (eval.n < 3 || eval.instances == 0) throw ConfigError("eval: need n >= 3 and instances >= 1");
  if (capture.n < 3 || capture.instances == 0) throw ConfigError("capture: need n >= 3 and instances >= 1");
  if (export_.n < 3 || export_.num_instances == 0) throw ConfigError("export: need n >= 3 and num_instances >= 1");
  if (grid.size() == 0) throw ConfigError("grid: every axis needs at least one value");
}

PipelineConfig config_from_json(json j, const ConfigOverrides& overrides) {
  if (j.is_null()) j = json::object();
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& s : overrides.set) apply_set(j, s);

  PipelineConfig c;
  {
    Section root(j, "config");
    for (const char* k : {"paths", "generate", "train", "eval", "capture", "sae", "grid", "analyze", "export"}) {
      root.skip(k);
    }
    root.get("seed", c.seed);
    root.get("threads", c.threads);
    root.finish();
  }
  if (overrides.seed) c.seed = *overrides.seed;
  if (overrides.threads) c.threads = *overrides.threads;
  // A stage seed comes from the file only when no global override is given.
  auto stage_seed = [&](const json& s, std::uint64_t offset) -> std::optional<std::uint64_t> {
    if (overrides.seed || !s.contains("seed")) return c.seed + offset;
    return std::nullopt;
  };

  {
    const json s = section(j, "paths");
    Section p(s, "paths");
    p.path("workdir", c.paths.workdir);
    p.path("instances", c.paths.instances);
    p.path("policy", c.paths.policy);
    p.path("train_log", c.paths.train_log);
    p.path("dataset", c.paths.dataset);
    p.path("sae", c.paths.sae);
    p.path("sae_log", c.paths.sae_log);
    p.path("grid", c.paths.grid);
    p.path("analysis", c.paths.analysis);
    p.path("explorer", c.paths.explorer);
    if (s.contains("labels") && !s.at("labels").is_null()) {
      std::filesystem::path labels;
      p.path("labels", labels);
      c.paths.labels = labels;
    } else {
      p.skip("labels");
    }
    p.finish();
  }
  if (const char* env = std::getenv(kWorkdirEnv); env && *env) c.paths.workdir = env;
  if (overrides.workdir) c.paths.workdir = *overrides.workdir;

  {
    const json s = section(j, "generate");
    Section g(s, "generate");
    g.distribution("distribution", c.generate.distribution);
    g.get("n", c.generate.n);
    g.get("count", c.generate.count);
    g.get("seed", c.generate.seed);
    g.finish();
    if (auto seed = stage_seed(s, kGenerateSeedOffset)) c.generate.seed = *seed;
  }
  {
    json s = section(j, "train");
    if (overrides.seed || !s.contains("seed")) s["seed"] = c.seed;
    if (overrides.threads || !s.contains("threads")) s["threads"] = c.threads;
    try {
      c.train = training::train_config_from_json(s);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("train: ") + e.what());
    }
  }
  {
    const json s = section(j, "eval");
    Section e(s, "eval");
    e.distribution("distribution", c.eval.distribution);
    e.get("n", c.eval.n);
    e.get("instances", c.eval.instances);
    e.get("seed", c.eval.seed);
    e.finish();
    if (auto seed = stage_seed(s, kEvalSeedOffset)) c.eval.seed = *seed;
  }
  {
    const json s = section(j, "capture");
    Section e(s, "capture");
    e.distribution("distribution", c.capture.distribution);
    e.get("n", c.capture.n);
    e.get("instances", c.capture.instances);
    e.get("seed", c.capture.seed);
    e.finish();
    if (auto seed = stage_seed(s, kCaptureSeedOffset)) c.capture.seed = *seed;
  }
  {
    json s = section(j, "sae");
    if (!s.contains("d")) s["d"] = c.train.policy.d_model;
    if (overrides.seed || !s.contains("seed")) s["seed"] = c.seed;
    try {
      c.sae = sae::sae_config_from_json(s);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("sae: ") + e.what());
    }
  }
  {
    const json s = section(j, "grid");
    Section g(s, "grid");
    g.get("expansions", c.grid.expansions);
    g.get("k_ratios", c.grid.k_ratios);
    g.get("l1s", c.grid.l1s);
    g.finish();
  }
  {
    const json s = section(j, "analyze");
    Section a(s, "analyze");
    a.rank_key("rank_key", c.analyze_rank_key);
    a.finish();
  }
  {
    const json s = section(j, "export");
    Section e(s, "export");
    e.get("top", c.export_.top);
    e.rank_key("rank_key", c.export_.rank_key);
    e.distribution("distribution", c.export_.distribution);
    e.get("num_instances", c.export_.num_instances);
    e.get("n", c.export_.n);
    e.get("seed", c.export_.seed);
    e.finish();
    if (auto seed = stage_seed(s, kExportSeedOffset)) c.export_.seed = *seed;
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides) {
  json j = json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot open config file " + path->string());
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(path->string() + ": " + e.what());
    }
  }
  return config_from_json(std::move(j), overrides);
}

nlohmann::json to_json(const PipelineConfig& c) {
  json paths{{"workdir", c.paths.workdir.string()},   {"instances", c.paths.instances.string()},
             {"policy", c.paths.policy.string()},     {"train_log", c.paths.train_log.string()},
             {"dataset", c.paths.dataset.string()},   {"sae", c.paths.sae.string()},
             {"sae_log", c.paths.sae_log.string()},   {"grid", c.paths.grid.string()},
             {"analysis", c.paths.analysis.string()}, {"explorer", c.paths.explorer.string()},
             {"labels", c.paths.labels ? json(c.paths.labels->string()) : json(nullptr)}};
  return {{"paths", paths},
          {"seed", c.seed},
          {"threads", c.threads},
          {"generate",
           {{"distribution", tsp::to_string(c.generate.distribution)},
            {"n", c.generate.n},
            {"count", c.generate.count},
            {"seed", c.generate.seed}}},
          {"train", training::to_json(c.train)},
          {"eval",
           {{"distribution", tsp::to_string(c.eval.distribution)},
            {"n", c.eval.n},
            {"instances", c.eval.instances},
            {"seed", c.eval.seed}}},
          {"capture",
           {{"distribution", tsp::to_string(c.capture.distribution)},
            {"n", c.capture.n},
            {"instances", c.capture.instances},
            {"seed", c.capture.seed}}},
          {"sae", sae::to_json(c.sae)},
          {"grid", sae::to_json(c.grid)},
          {"analyze", {{"rank_key", analysis::to_string(c.analyze_rank_key)}}},
          {"export",
           {{"top", c.export_.top},
            {"rank_key", analysis::to_string(c.export_.rank_key)},
            {"distribution", tsp::to_string(c.export_.distribution)},
            {"num_instances", c.export_.num_instances},
            {"n", c.export_.n},
            {"seed", c.export_.seed}}}};
}

}  // namespace tspsae::pipeline
