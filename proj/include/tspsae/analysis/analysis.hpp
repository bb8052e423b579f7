#pragma once

// Per-node SAE feature activations and what is built from them: per-instance
// mean activations, feature rankings, human taxonomy labels, and the
// ten-instance overlay exports read by the explorer.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tspsae/capture/activation_dataset.hpp"
#include "tspsae/policy/policy.hpp"
#include "tspsae/sae/sae.hpp"

namespace tspsae::analysis {

inline constexpr int kOverlaySchemaVersion = 1;
inline constexpr int kLabelSchemaVersion = 1;
inline constexpr int kManifestSchemaVersion = 1;

struct FeatureActivations {
  std::uint64_t instance_id = 0;
  Tensor z;  // [nodes, features], sparse codes

  std::size_t nodes() const { return z.rows(); }
  std::size_t features() const { return z.cols(); }
};

// Live path: encoder residuals of `instance` -> SAE codes.
// FormatError if the SAE input width differs from the policy's d_model.
FeatureActivations feature_activations(const sae::SaeModel<float>& sae, const policy::Policy<float>& policy,
                                       const tsp::Instance& instance, std::uint64_t instance_id = 0);
// Same, for many instances sharing n, batched through the encoder.
std::vector<FeatureActivations> feature_activations(const sae::SaeModel<float>& sae,
                                                    const policy::Policy<float>& policy,
                                                    std::span<const tsp::Instance> instances,
                                                    std::uint64_t first_id = 0, std::size_t threads = 1);
// Persisted path: codes for instance `index` of a captured dataset.
FeatureActivations feature_activations(const sae::SaeModel<float>& sae, const capture::ActivationDataset& data,
                                       std::uint64_t index);

// (1/N) sum_j z[j, i]. ParameterError if i is out of range.
double mean_activation(const FeatureActivations& fa, std::size_t feature);

enum class Taxonomy { boundary, spot, separator, unclear, unlabeled };
std::string_view to_string(Taxonomy t);
Taxonomy parse_taxonomy(std::string_view name);  // ParameterError on unknown names

struct FeatureSummary {
  std::size_t feature = 0;
  double mean_activation = 0.0;   // mu_i averaged over the instance set
  double firing_frequency = 0.0;  // fraction of nodes with z > 0
  double max_activation = 0.0;
  std::uint64_t instances = 0;
  Taxonomy label = Taxonomy::unlabeled;
};

// Streaming accumulation of summaries over instances.
class SummaryBuilder {
 public:
  explicit SummaryBuilder(std::size_t features);
  void add(const FeatureActivations& fa);
  void merge(const SummaryBuilder& other);
  std::vector<FeatureSummary> finish() const;

 private:
  std::vector<double> mu_sum_;
  std::vector<std::uint64_t> fired_;
  std::vector<double> max_;
  std::uint64_t instances_ = 0;
  std::uint64_t nodes_ = 0;
};

std::vector<FeatureSummary> summarize(std::span<const FeatureActivations> activations);
// Over instances [begin, end) of a dataset (default: all).
std::vector<FeatureSummary> summarize(const sae::SaeModel<float>& sae, const capture::ActivationDataset& data,
                                      std::uint64_t begin = 0, std::optional<std::uint64_t> end = {},
                                      std::size_t threads = 1);

enum class RankKey { mean, firing_frequency, max };
std::string_view to_string(RankKey k);
RankKey parse_rank_key(std::string_view name);

// Feature indices, descending by key, ties by ascending index.
std::vector<std::size_t> rank_features(std::span<const FeatureSummary> summaries, RankKey key);

using Labels = std::map<std::size_t, Taxonomy>;

// {"schema_version": 1, "labels": {"<feature>": "<category>"}}
void save_labels(const std::filesystem::path& path, const Labels& labels);
Labels load_labels(const std::filesystem::path& path);

// ParameterError if a label names a feature not among the summaries.
void apply_labels(std::vector<FeatureSummary>& summaries, const Labels& labels);

struct TaxonomyReport {
  std::map<Taxonomy, std::vector<std::size_t>> groups;  // every category present, possibly empty
  std::size_t count(Taxonomy t) const { return groups.at(t).size(); }
};
TaxonomyReport taxonomy_report(std::span<const FeatureSummary> summaries, const Labels& labels);
nlohmann::json to_json(const TaxonomyReport& report);

nlohmann::json to_json(const FeatureSummary& s);

// Marker tags cycled over overlay instances.
inline constexpr std::string_view kMarkers[] = {"circle",  "square", "triangle-up", "triangle-down", "diamond",
                                                "cross",   "x",      "star",        "pentagon",      "hexagon"};

struct OverlayRequest {
  std::vector<std::size_t> features;
  tsp::Distribution distribution = tsp::Distribution::uniform;
  std::size_t num_instances = 10;
  std::size_t n = 100;
  std::uint64_t seed = 0;  // instance i uses seed + i
  std::size_t threads = 1;
};

// Overlay document for one feature; activations are raw, the renderer
// normalises with [0, max_activation].
nlohmann::json overlay_json(std::size_t feature, std::span<const tsp::Instance> instances,
                            std::span<const FeatureActivations> activations, const nlohmann::json& meta);

// Writes <out_dir>/feature_<i>.json per requested feature and returns the
// paths in request order. ParameterError for unknown features.
std::vector<std::filesystem::path> export_overlay(const sae::SaeModel<float>& sae, const policy::Policy<float>& policy,
                                                  const OverlayRequest& request, const std::filesystem::path& out_dir,
                                                  const nlohmann::json& meta = nlohmann::json::object());

std::string overlay_file_name(std::size_t feature);

// Throws FormatError describing the first schema violation.
void validate_overlay(const nlohmann::json& doc);

struct ManifestEntry {
  FeatureSummary summary;
  std::string overlay;  // path relative to the manifest
};

nlohmann::json manifest_json(std::span<const ManifestEntry> entries, const nlohmann::json& meta);
// Throws FormatError; overlay files are resolved against `base_dir` and
// validated.
void validate_manifest(const nlohmann::json& doc, const std::filesystem::path& base_dir);

void write_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace tspsae::analysis
