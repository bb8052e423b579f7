#include "tspsae/analysis/analysis.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "tspsae/error.hpp"

namespace tspsae::analysis {

namespace {

void check_widths(const sae::SaeModel<float>& sae, std::size_t d_model, const std::string& source) {
  if (sae.d() != d_model) {
    throw FormatError("analysis: SAE expects inputs of width " + std::to_string(sae.d()) + ", " + source +
                      " provides d_model " + std::to_string(d_model));
  }
}

// Runs body(i) for i in [0, count) on up to `threads` workers.
template <class F>
void parallel_for(std::size_t count, std::size_t threads, F body) {
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(count, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

constexpr std::size_t kChunk = 64;

}  // namespace

std::vector<FeatureActivations> feature_activations(const sae::SaeModel<float>& sae,
                                                    const policy::Policy<float>& policy,
                                                    std::span<const tsp::Instance> instances, std::uint64_t first_id,
                                                    std::size_t threads) {
  check_widths(sae, policy.config().d_model, "the policy");
  std::vector<FeatureActivations> out(instances.size());
  const std::size_t chunks = (instances.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, threads, [&](std::size_t c) {
    const std::size_t begin = c * kChunk, end = std::min(instances.size(), begin + kChunk);
    const auto part = instances.subspan(begin, end - begin);
    for (const auto& inst : part) {
      if (inst.n != part.front().n) throw ParameterError("analysis: batched instances must share n");
    }
    ad::Tape<float> tape(false);
    const auto enc = policy.encode(tape, part);
    const Tensor codes = sae::features(sae, enc.nodes.value());
    const std::size_t n = part.front().n, latent = sae.latent();
    for (std::size_t b = 0; b < part.size(); ++b) {
      Tensor z(Shape{n, latent});
      std::copy_n(codes.values().begin() + static_cast<long>(b * n * latent), n * latent, z.values().begin());
      out[begin + b] = {first_id + begin + b, std::move(z)};
    }
  });
  return out;
}

FeatureActivations feature_activations(const sae::SaeModel<float>& sae, const policy::Policy<float>& policy,
                                       const tsp::Instance& instance, std::uint64_t instance_id) {
  return std::move(feature_activations(sae, policy, std::span(&instance, 1), instance_id).front());
}

FeatureActivations feature_activations(const sae::SaeModel<float>& sae, const capture::ActivationDataset& data,
                                       std::uint64_t index) {
  check_widths(sae, data.d_model(), "dataset " + data.path().string());
  const auto& h = data.header();
  if (index >= h.instance_count) throw ParameterError("analysis: dataset instance index out of range");
  return {index, sae::features(sae, data.rows(index * h.nodes_per_instance, h.nodes_per_instance))};
}

double mean_activation(const FeatureActivations& fa, std::size_t feature) {
  if (feature >= fa.features()) {
    throw ParameterError("analysis: feature " + std::to_string(feature) + " out of range (" +
                         std::to_string(fa.features()) + " features)");
  }
  double s = 0.0;
  for (std::size_t j = 0; j < fa.nodes(); ++j) s += fa.z(j, feature);
  return s / double(fa.nodes());
}

std::string_view to_string(Taxonomy t) {
  switch (t) {
    case Taxonomy::boundary: return "boundary";
    case Taxonomy::spot: return "spot";
    case Taxonomy::separator: return "separator";
    case Taxonomy::unclear: return "unclear";
    case Taxonomy::unlabeled: return "unlabeled";
  }
  return "unlabeled";
}

Taxonomy parse_taxonomy(std::string_view name) {
  for (auto t : {Taxonomy::boundary, Taxonomy::spot, Taxonomy::separator, Taxonomy::unclear, Taxonomy::unlabeled}) {
    if (name == to_string(t)) return t;
  }
  throw ParameterError("analysis: unknown taxonomy label '" + std::string(name) +
                       "' (expected boundary, spot, separator, unclear or unlabeled)");
}

SummaryBuilder::SummaryBuilder(std::size_t features) : mu_sum_(features), fired_(features), max_(features) {
  if (features == 0) throw ParameterError("analysis: no features to summarise");
}

void SummaryBuilder::add(const FeatureActivations& fa) {
  if (fa.features() != mu_sum_.size()) throw DimensionError("analysis: feature count differs between instances");
  const std::size_t m = fa.features();
  std::vector<double> col(m);
  for (std::size_t j = 0; j < fa.nodes(); ++j) {
    const auto row = fa.z.row(j);
    for (std::size_t i = 0; i < m; ++i) {
      const float v = row[i];
      col[i] += v;
      if (v > 0.0f) {
        ++fired_[i];
        max_[i] = std::max<double>(max_[i], v);
      }
    }
  }
  for (std::size_t i = 0; i < m; ++i) mu_sum_[i] += col[i] / double(fa.nodes());
  ++instances_;
  nodes_ += fa.nodes();
}

void SummaryBuilder::merge(const SummaryBuilder& other) {
  if (other.mu_sum_.size() != mu_sum_.size()) throw DimensionError("analysis: merging summaries of different widths");
  for (std::size_t i = 0; i < mu_sum_.size(); ++i) {
    mu_sum_[i] += other.mu_sum_[i];
    fired_[i] += other.fired_[i];
    max_[i] = std::max(max_[i], other.max_[i]);
  }
  instances_ += other.instances_;
  nodes_ += other.nodes_;
}

std::vector<FeatureSummary> SummaryBuilder::finish() const {
  if (instances_ == 0) throw ContractError("analysis: summary over zero instances");
  std::vector<FeatureSummary> out(mu_sum_.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].feature = i;
    out[i].mean_activation = mu_sum_[i] / double(instances_);
    out[i].firing_frequency = double(fired_[i]) / double(nodes_);
    out[i].max_activation = max_[i];
    out[i].instances = instances_;
  }
  return out;
}

std::vector<FeatureSummary> summarize(std::span<const FeatureActivations> activations) {
  if (activations.empty()) throw ParameterError("analysis: no activations to summarise");
  SummaryBuilder b(activations.front().features());
  for (const auto& fa : activations) b.add(fa);
  return b.finish();
}

std::vector<FeatureSummary> summarize(const sae::SaeModel<float>& sae, const capture::ActivationDataset& data,
                                      std::uint64_t begin, std::optional<std::uint64_t> end, std::size_t threads) {
  check_widths(sae, data.d_model(), "dataset " + data.path().string());
  const std::uint64_t stop = end.value_or(data.header().instance_count);
  if (begin >= stop || stop > data.header().instance_count) {
    throw ParameterError("analysis: instance range [" + std::to_string(begin) + ", " + std::to_string(stop) +
                         ") is empty or exceeds the dataset");
  }
  // Fixed blocks merged in order: results do not depend on `threads`.
  const std::uint64_t blocks = (stop - begin + kChunk - 1) / kChunk;
  std::vector<SummaryBuilder> parts(blocks, SummaryBuilder(sae.latent()));
  parallel_for(blocks, threads, [&](std::size_t blk) {
    const std::uint64_t first = begin + blk * kChunk, last = std::min<std::uint64_t>(stop, first + kChunk);
    for (std::uint64_t i = first; i < last; ++i) parts[blk].add(feature_activations(sae, data, i));
  });
  for (std::size_t p = 1; p < parts.size(); ++p) parts[0].merge(parts[p]);
  return parts[0].finish();
}

std::string_view to_string(RankKey k) {
  switch (k) {
    case RankKey::mean: return "mean";
    case RankKey::firing_frequency: return "firing_frequency";
    case RankKey::max: return "max";
  }
  return "mean";
}

RankKey parse_rank_key(std::string_view name) {
  for (auto k : {RankKey::mean, RankKey::firing_frequency, RankKey::max}) {
    if (name == to_string(k)) return k;
  }
  throw ParameterError("analysis: unknown rank key '" + std::string(name) +
                       "' (expected mean, firing_frequency or max)");
}

std::vector<std::size_t> rank_features(std::span<const FeatureSummary> summaries, RankKey key) {
  auto value = [key](const FeatureSummary& s) {
    switch (key) {
      case RankKey::mean: return s.mean_activation;
      case RankKey::firing_frequency: return s.firing_frequency;
      case RankKey::max: return s.max_activation;
    }
    return s.mean_activation;
  };
  std::vector<const FeatureSummary*> order;
  order.reserve(summaries.size());
  for (const auto& s : summaries) order.push_back(&s);
  std::sort(order.begin(), order.end(), [&](const FeatureSummary* a, const FeatureSummary* b) {
    const double va = value(*a), vb = value(*b);
    if (va != vb) return va > vb;
    return a->feature < b->feature;
  });
  std::vector<std::size_t> out;
  out.reserve(order.size());
  for (const auto* s : order) out.push_back(s->feature);
  return out;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump() << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_labels(const std::filesystem::path& path, const Labels& labels) {
  nlohmann::json map = nlohmann::json::object();
  for (const auto& [feature, label] : labels) map[std::to_string(feature)] = to_string(label);
  write_json(path, {{"schema_version", kLabelSchemaVersion}, {"labels", map}});
}

Labels load_labels(const std::filesystem::path& path) {
  const auto doc = read_json(path);
  if (!doc.is_object() || doc.value("schema_version", -1) != kLabelSchemaVersion || !doc.contains("labels") ||
      !doc.at("labels").is_object()) {
    throw FormatError(path.string() + ": not a version " + std::to_string(kLabelSchemaVersion) + " label file");
  }
  Labels labels;
  for (const auto& [key, value] : doc.at("labels").items()) {
    std::size_t feature = 0;
    const auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), feature);
    if (ec != std::errc{} || ptr != key.data() + key.size()) {
      throw FormatError(path.string() + ": label key '" + key + "' is not a feature index");
    }
    if (!value.is_string()) throw FormatError(path.string() + ": label for feature " + key + " is not a string");
    try {
      labels[feature] = parse_taxonomy(value.get<std::string>());
    } catch (const ParameterError& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return labels;
}

void apply_labels(std::vector<FeatureSummary>& summaries, const Labels& labels) {
  std::map<std::size_t, FeatureSummary*> by_index;
  for (auto& s : summaries) by_index[s.feature] = &s;
  for (const auto& [feature, label] : labels) {
    const auto it = by_index.find(feature);
    if (it == by_index.end()) {
      throw ParameterError("analysis: label for unknown feature " + std::to_string(feature));
    }
    it->second->label = label;
  }
}

TaxonomyReport taxonomy_report(std::span<const FeatureSummary> summaries, const Labels& labels) {
  std::vector<FeatureSummary> labelled(summaries.begin(), summaries.end());
  for (auto& s : labelled) s.label = Taxonomy::unlabeled;
  apply_labels(labelled, labels);
  TaxonomyReport report;
  for (auto t : {Taxonomy::boundary, Taxonomy::spot, Taxonomy::separator, Taxonomy::unclear, Taxonomy::unlabeled}) {
    report.groups[t];
  }
  std::sort(labelled.begin(), labelled.end(),
            [](const FeatureSummary& a, const FeatureSummary& b) { return a.feature < b.feature; });
  for (const auto& s : labelled) report.groups[s.label].push_back(s.feature);
  return report;
}

nlohmann::json to_json(const TaxonomyReport& report) {
  nlohmann::json counts = nlohmann::json::object(), groups = nlohmann::json::object();
  for (const auto& [t, features] : report.groups) {
    counts[std::string(to_string(t))] = features.size();
    groups[std::string(to_string(t))] = features;
  }
  return {{"counts", counts}, {"features", groups}};
}

nlohmann::json to_json(const FeatureSummary& s) {
  return {{"feature", s.feature},
          {"mean_activation", s.mean_activation},
          {"firing_frequency", s.firing_frequency},
          {"max_activation", s.max_activation},
          {"instances", s.instances},
          {"label", to_string(s.label)}};
}

std::string overlay_file_name(std::size_t feature) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "feature_%05zu.json", feature);
  return buf;
}

nlohmann::json overlay_json(std::size_t feature, std::span<const tsp::Instance> instances,
                            std::span<const FeatureActivations> activations, const nlohmann::json& meta) {
  if (instances.size() != activations.size()) throw DimensionError("overlay: instance/activation count mismatch");
  double max_a = 0.0;
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    const auto& fa = activations[i];
    if (fa.nodes() != inst.n) throw DimensionError("overlay: activation rows differ from node count");
    if (feature >= fa.features()) throw ParameterError("overlay: feature " + std::to_string(feature) + " out of range");
    nlohmann::json nodes = nlohmann::json::array();
    for (std::size_t j = 0; j < inst.n; ++j) {
      const double a = fa.z(j, feature);
      max_a = std::max(max_a, a);
      nodes.push_back({{"x", inst.coords[j][0]}, {"y", inst.coords[j][1]}, {"a", a}});
    }
    list.push_back({{"id", fa.instance_id},
                    {"marker", kMarkers[i % std::size(kMarkers)]},
                    {"nodes", std::move(nodes)}});
  }
  return {{"schema_version", kOverlaySchemaVersion},
          {"feature", feature},
          {"instances", std::move(list)},
          {"max_activation", max_a},
          {"all_zero", max_a == 0.0},
          {"normalization", {{"min", 0.0}, {"max", max_a}}},
          {"meta", meta}};
}

std::vector<std::filesystem::path> export_overlay(const sae::SaeModel<float>& sae, const policy::Policy<float>& policy,
                                                  const OverlayRequest& request, const std::filesystem::path& out_dir,
                                                  const nlohmann::json& meta) {
  if (request.num_instances == 0 || request.n == 0) throw ParameterError("overlay: need at least one node");
  for (auto f : request.features) {
    if (f >= sae.latent()) {
      throw ParameterError("overlay: feature " + std::to_string(f) + " out of range (" +
                           std::to_string(sae.latent()) + " features)");
    }
  }
  std::vector<tsp::Instance> instances;
  for (std::size_t i = 0; i < request.num_instances; ++i) {
    instances.push_back(tsp::generate(request.distribution, request.n, request.seed + i));
  }
  const auto acts = feature_activations(sae, policy, instances, request.seed, request.threads);

  nlohmann::json m = meta;
  m["distribution"] = to_string(request.distribution);
  m["n"] = request.n;
  m["num_instances"] = request.num_instances;
  m["seed_begin"] = request.seed;
  m["seed_end"] = request.seed + request.num_instances;
  m["k"] = sae.k;
  m["topk_mode"] = sae::to_string(sae.mode);

  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> paths;
  for (auto f : request.features) {
    const auto path = out_dir / overlay_file_name(f);
    write_json(path, overlay_json(f, instances, acts, m));
    paths.push_back(path);
  }
  return paths;
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw FormatError("overlay schema: " + what);
}

bool is_count(const nlohmann::json& j) { return j.is_number_unsigned() || (j.is_number_integer() && j.get<long long>() >= 0); }

}  // namespace

void validate_overlay(const nlohmann::json& doc) {
  require(doc.is_object(), "document is not an object");
  require(doc.contains("schema_version") && doc["schema_version"] == kOverlaySchemaVersion,
          "schema_version must be " + std::to_string(kOverlaySchemaVersion));
  require(doc.contains("feature") && is_count(doc["feature"]), "feature must be a nonnegative integer");
  require(doc.contains("meta") && doc["meta"].is_object(), "meta must be an object");
  require(doc.contains("max_activation") && doc["max_activation"].is_number(), "max_activation must be a number");
  require(doc.contains("instances") && doc["instances"].is_array() && !doc["instances"].empty(),
          "instances must be a nonempty array");
  double max_a = 0.0;
  for (const auto& inst : doc["instances"]) {
    require(inst.is_object() && inst.contains("id") && is_count(inst["id"]), "instance id must be a nonnegative integer");
    require(inst.contains("marker") && inst["marker"].is_string(), "instance marker must be a string");
    require(inst.contains("nodes") && inst["nodes"].is_array() && !inst["nodes"].empty(),
            "instance nodes must be a nonempty array");
    for (const auto& node : inst["nodes"]) {
      require(node.is_object() && node.contains("x") && node.contains("y") && node.contains("a"),
              "node needs x, y and a");
      require(node["x"].is_number() && node["y"].is_number() && node["a"].is_number(), "node fields must be numbers");
      const double x = node["x"], y = node["y"], a = node["a"];
      require(x >= 0.0 && x <= 1.0 && y >= 0.0 && y <= 1.0, "node coordinates must lie in the unit square");
      require(std::isfinite(a) && a >= 0.0, "activations must be finite and nonnegative");
      max_a = std::max(max_a, a);
    }
  }
  require(doc["max_activation"].get<double>() == max_a, "max_activation must equal the largest activation");
  if (doc.contains("normalization")) {
    const auto& n = doc["normalization"];
    require(n.is_object() && n.value("min", -1.0) == 0.0 && n.value("max", -1.0) == max_a,
            "normalization must be {min: 0, max: max_activation}");
  }
}

nlohmann::json manifest_json(std::span<const ManifestEntry> entries, const nlohmann::json& meta) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& e : entries) {
    features.push_back({{"index", e.summary.feature},
                        {"mean_activation", e.summary.mean_activation},
                        {"firing_frequency", e.summary.firing_frequency},
                        {"max_activation", e.summary.max_activation},
                        {"label", to_string(e.summary.label)},
                        {"overlay", e.overlay}});
  }
  return {{"schema_version", kManifestSchemaVersion}, {"features", std::move(features)}, {"meta", meta}};
}

void validate_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir) {
  auto fail = [](const std::string& what) { throw FormatError("manifest schema: " + what); };
  if (!doc.is_object() || !doc.contains("schema_version") || doc["schema_version"] != kManifestSchemaVersion) {
    fail("schema_version must be " + std::to_string(kManifestSchemaVersion));
  }
  if (!doc.contains("features") || !doc["features"].is_array()) fail("features must be an array");
  for (const auto& f : doc["features"]) {
    if (!f.is_object() || !f.contains("index") || !is_count(f["index"])) fail("feature index must be an integer");
    for (const char* key : {"mean_activation", "firing_frequency", "max_activation"}) {
      if (!f.contains(key) || !f[key].is_number()) fail(std::string(key) + " must be a number");
    }
    const double freq = f["firing_frequency"];
    if (!(freq >= 0.0 && freq <= 1.0)) fail("firing_frequency must lie in [0, 1]");
    if (!f.contains("label") || !f["label"].is_string()) fail("label must be a string");
    try {
      parse_taxonomy(f["label"].get<std::string>());
    } catch (const ParameterError& e) {
      fail(e.what());
    }
    if (!f.contains("overlay") || !f["overlay"].is_string()) fail("overlay must be a path string");
    const auto overlay = read_json(base_dir / f["overlay"].get<std::string>());
    validate_overlay(overlay);
    if (overlay["feature"] != f["index"]) fail("overlay file belongs to a different feature");
  }
}

}  // namespace tspsae::analysis
