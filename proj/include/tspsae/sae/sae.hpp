#pragma once

// Top-k sparse autoencoder:
//   z        = x W_enc^T + b                  (dense pre-activation, n latents)
//   z_sparse = TopK(z)                        (at most k nonzeros, nonnegative)
//   x_hat    = z_sparse W_dec + b_dec
// Decoder rows are kept at unit norm.

#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "tspsae/capture/activation_dataset.hpp"
#include "tspsae/numerics/adam.hpp"
#include "tspsae/numerics/ops.hpp"
#include "tspsae/rng.hpp"

namespace tspsae::sae {

// shifted: ReLU(z - tau) with tau the k-th largest entry (entries equal to
// tau map to zero). masked: keep the k largest entries where positive,
// lowest index first among ties.
enum class TopkMode { shifted, masked };

std::string_view to_string(TopkMode mode);
TopkMode parse_topk_mode(std::string_view name);

struct SaeConfig {
  std::size_t d = 0;  // input width, the policy's d_model
  std::size_t expansion = 4;
  double k_ratio = 0.1;
  double l1 = 1e-3;
  TopkMode mode = TopkMode::shifted;
  std::size_t batch_size = 256;
  std::size_t steps = 10000;
  AdamConfig adam{.lr = 1e-3};
  std::uint64_t seed = 0;
  std::size_t eval_every = 1000;  // 0: only at the end
  double holdout_fraction = 0.1;  // trailing instances held out for evaluation

  std::size_t latent() const { return expansion * d; }
  std::size_t k() const;
  void validate() const;
};

nlohmann::json to_json(const SaeConfig& config);
SaeConfig sae_config_from_json(const nlohmann::json& j);

template <class T>
struct SaeModel {
  ad::Parameter<T> w_enc;  // [n, d]
  ad::Parameter<T> b;      // [n]
  ad::Parameter<T> w_dec;  // [n, d], unit rows
  ad::Parameter<T> b_dec;  // [d]
  std::size_t k = 1;
  TopkMode mode = TopkMode::shifted;

  std::size_t d() const { return w_enc.value.cols(); }
  std::size_t latent() const { return w_enc.value.rows(); }
  std::vector<ad::Parameter<T>*> parameters() { return {&w_enc, &b, &w_dec, &b_dec}; }

  // Random unit decoder rows, W_enc = W_dec, b = 0, b_dec = `mean` (or 0).
  static SaeModel init(const SaeConfig& config, Rng& rng, const BasicTensor<T>* mean = nullptr);
  void normalize_decoder();
  template <class U>
  SaeModel<U> cast() const;
};

// Dense pre-activations for rows of x ([m, d] or a d-vector) -> [m, n].
template <class T>
BasicTensor<T> encode(const SaeModel<T>& model, const BasicTensor<T>& x);

void topk_sparsify(std::span<const float> z, std::size_t k, TopkMode mode, std::span<float> out);
void topk_sparsify(std::span<const double> z, std::size_t k, TopkMode mode, std::span<double> out);
// Row-wise over [m, n].
template <class T>
BasicTensor<T> topk_sparsify(const BasicTensor<T>& z, std::size_t k, TopkMode mode);

// [m, n] sparse codes -> [m, d].
template <class T>
BasicTensor<T> decode(const SaeModel<T>& model, const BasicTensor<T>& z_sparse);

// Sparse codes of x, i.e. topk_sparsify(encode(x)).
template <class T>
BasicTensor<T> features(const SaeModel<T>& model, const BasicTensor<T>& x);

// Differentiable top-k. Gradient follows the formula on the selected set:
// identity on kept entries, and in shifted mode minus their summed gradient
// on the threshold entry.
template <class T>
ad::Var<T> topk(const ad::Var<T>& z, std::size_t k, TopkMode mode);

struct LossParts {
  double total = 0.0;
  double reconstruction = 0.0;  // mean ||x - x_hat||^2
  double l1 = 0.0;              // mean ||z_sparse||_1
};

// mean(||x - x_hat||^2) + lambda * mean(||z_sparse||_1), recorded on the
// model's parameters (tracking tape) or as constants.
template <class T>
ad::Var<T> sae_loss(ad::Tape<T>& tape, SaeModel<T>& model, const BasicTensor<T>& batch, double lambda,
                    LossParts* parts = nullptr);

struct SaeMetrics {
  std::size_t step = 0;
  double reconstruction_error = 0.0;  // 1 - explained variance on the evaluation rows
  double mean_l0 = 0.0;
  std::size_t max_l0 = 0;
  double mean_l1 = 0.0;
  double train_loss = 0.0;
  std::size_t dead_features = 0;   // never among the top-k over the evaluation pass
  std::vector<double> firing_frequency;  // fraction of evaluation rows where each feature is nonzero
};
nlohmann::json to_json(const SaeMetrics& metrics, bool with_frequencies = false);

// Evaluation over rows [begin, end) of a dataset.
SaeMetrics evaluate(const SaeModel<float>& model, const capture::ActivationDataset& data, std::uint64_t begin,
                    std::uint64_t end);

struct SaeRun {
  SaeModel<float> model;
  std::vector<SaeMetrics> history;  // one entry per evaluation
  SaeMetrics final_metrics;
  std::uint64_t train_rows = 0;
  std::uint64_t heldout_begin = 0;  // evaluation rows are [heldout_begin, size)
};

// FormatError if the dataset's d_model differs from config.d. `log` (if
// set) receives one NDJSON line per evaluation.
SaeRun train_sae(const SaeConfig& config, const capture::ActivationDataset& data,
                 const std::optional<std::filesystem::path>& log = {});

// Container of kind "sae" with the config and the four tensors.
void save_sae(const std::filesystem::path& path, const SaeModel<float>& model, const SaeConfig& config,
              nlohmann::json extra_meta = nlohmann::json::object());
struct LoadedSae {
  SaeModel<float> model;
  SaeConfig config;
  nlohmann::json meta;
};
// FormatError when shapes disagree with the stored config or with
// `expected_d`.
LoadedSae load_sae(const std::filesystem::path& path, std::optional<std::size_t> expected_d = {});

}  // namespace tspsae::sae
