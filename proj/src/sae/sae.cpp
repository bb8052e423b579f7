#include "tspsae/sae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "tspsae/error.hpp"
#include "tspsae/io/container.hpp"
#include "tspsae/numerics/kernels.hpp"

namespace tspsae::sae {

std::string_view to_string(TopkMode mode) { return mode == TopkMode::shifted ? "shifted" : "masked"; }

TopkMode parse_topk_mode(std::string_view name) {
  if (name == "shifted") return TopkMode::shifted;
  if (name == "masked") return TopkMode::masked;
  throw ParameterError("unknown top-k mode '" + std::string(name) + "' (expected shifted|masked)");
}

std::size_t SaeConfig::k() const {
  const auto k = static_cast<std::size_t>(std::llround(k_ratio * double(latent())));
  return std::max<std::size_t>(1, k);
}

void SaeConfig::validate() const {
  if (d == 0) throw ParameterError("sae: input width d must be positive");
  if (expansion < 1) throw ParameterError("sae: expansion factor must be >= 1");
  if (!(k_ratio > 0.0 && k_ratio <= 1.0)) throw ParameterError("sae: k-ratio must be in (0, 1]");
  if (!(l1 >= 0.0)) throw ParameterError("sae: l1 coefficient must be >= 0");
  if (k() > latent()) throw ParameterError("sae: k exceeds the latent width");
  if (batch_size == 0) throw ParameterError("sae: batch size must be positive");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ParameterError("sae: holdout fraction in [0, 1)");
}

nlohmann::json to_json(const SaeConfig& c) {
  return {{"d", c.d},
          {"expansion", c.expansion},
          {"k_ratio", c.k_ratio},
          {"l1", c.l1},
          {"mode", std::string(to_string(c.mode))},
          {"batch_size", c.batch_size},
          {"steps", c.steps},
          {"lr", c.adam.lr},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"eps", c.adam.eps},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"holdout_fraction", c.holdout_fraction}};
}

SaeConfig sae_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw FormatError("sae config: expected an object");
  SaeConfig c;
  const auto defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw FormatError("sae config: unknown field '" + key + "'");
  }
  try {
    c.d = j.value("d", c.d);
    c.expansion = j.value("expansion", c.expansion);
    c.k_ratio = j.value("k_ratio", c.k_ratio);
    c.l1 = j.value("l1", c.l1);
    if (j.contains("mode")) c.mode = parse_topk_mode(j["mode"].get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.adam.lr = j.value("lr", c.adam.lr);
    c.adam.beta1 = j.value("beta1", c.adam.beta1);
    c.adam.beta2 = j.value("beta2", c.adam.beta2);
    c.adam.eps = j.value("eps", c.adam.eps);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("sae config: ") + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(std::string("sae config: ") + e.what());
  }
  return c;
}

template <class T>
SaeModel<T> SaeModel<T>::init(const SaeConfig& config, Rng& rng, const BasicTensor<T>* mean) {
  config.validate();
  const std::size_t n = config.latent(), d = config.d;
  BasicTensor<T> dec(Shape{n, d});
  for (auto& v : dec.values()) v = static_cast<T>(rng.normal(0.0, 1.0));
  SaeModel<T> m;
  m.w_dec = ad::Parameter<T>("w_dec", std::move(dec));
  m.normalize_decoder();
  m.w_enc = ad::Parameter<T>("w_enc", m.w_dec.value);
  m.b = ad::Parameter<T>("b", BasicTensor<T>(Shape{n}));
  if (mean && mean->size() != d) throw DimensionError("sae: mean has the wrong width");
  m.b_dec = ad::Parameter<T>("b_dec", mean ? mean->reshaped(Shape{d}) : BasicTensor<T>(Shape{d}));
  m.k = config.k();
  m.mode = config.mode;
  return m;
}

template <class T>
void SaeModel<T>::normalize_decoder() {
  auto& w = w_dec.value;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    auto row = w.row(i);
    double norm = 0.0;
    for (T v : row) norm += double(v) * double(v);
    norm = std::sqrt(norm);
    if (norm == 0.0) throw NumericalError("sae: decoder row " + std::to_string(i) + " has zero norm");
    for (T& v : row) v = static_cast<T>(double(v) / norm);
  }
}

template <class T>
template <class U>
SaeModel<U> SaeModel<T>::cast() const {
  SaeModel<U> m;
  m.w_enc = ad::Parameter<U>("w_enc", w_enc.value.template cast<U>());
  m.b = ad::Parameter<U>("b", b.value.template cast<U>());
  m.w_dec = ad::Parameter<U>("w_dec", w_dec.value.template cast<U>());
  m.b_dec = ad::Parameter<U>("b_dec", b_dec.value.template cast<U>());
  m.k = k;
  m.mode = mode;
  return m;
}

namespace {

template <class T>
BasicTensor<T> as_rows(const BasicTensor<T>& x, std::size_t d, const char* what) {
  if (x.cols() != d || x.rank() > 2 || x.size() == 0) {
    throw DimensionError(std::string("sae: ") + what + " " + shape_string(x.shape()) + ", expected width " +
                         std::to_string(d));
  }
  return x.rank() == 2 ? x : x.reshaped(Shape{1, d});
}

// Indices of the k largest entries, by value then lowest index.
template <class T>
void select_topk(std::span<const T> z, std::size_t k, std::vector<std::size_t>& idx) {
  idx.resize(z.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto before = [&](std::size_t a, std::size_t b) { return z[a] > z[b] || (z[a] == z[b] && a < b); };
  std::nth_element(idx.begin(), idx.begin() + static_cast<long>(k - 1), idx.end(), before);
  std::sort(idx.begin(), idx.begin() + static_cast<long>(k), before);
  idx.resize(k);
}

template <class T>
void sparsify_row(std::span<const T> z, std::size_t k, TopkMode mode, std::span<T> out,
                  std::vector<std::size_t>& idx) {
  if (k < 1 || k > z.size()) {
    throw ParameterError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(z.size()) + "]");
  }
  if (out.size() != z.size()) throw DimensionError("topk: output length differs from input");
  select_topk(z, k, idx);
  std::fill(out.begin(), out.end(), T(0));
  if (mode == TopkMode::shifted) {
    const T tau = z[idx.back()];
    for (std::size_t i : idx) out[i] = z[i] > tau ? z[i] - tau : T(0);
  } else {
    for (std::size_t i : idx) out[i] = z[i] > T(0) ? z[i] : T(0);
  }
}

}  // namespace

void topk_sparsify(std::span<const float> z, std::size_t k, TopkMode mode, std::span<float> out) {
  std::vector<std::size_t> idx;
  sparsify_row(z, k, mode, out, idx);
}

void topk_sparsify(std::span<const double> z, std::size_t k, TopkMode mode, std::span<double> out) {
  std::vector<std::size_t> idx;
  sparsify_row(z, k, mode, out, idx);
}

template <class T>
BasicTensor<T> topk_sparsify(const BasicTensor<T>& z, std::size_t k, TopkMode mode) {
  BasicTensor<T> out(z.shape());
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < z.rows(); ++r) sparsify_row(z.row(r), k, mode, out.row(r), idx);
  return out;
}

template <class T>
BasicTensor<T> encode(const SaeModel<T>& model, const BasicTensor<T>& x) {
  const auto rows = as_rows(x, model.d(), "encode input");
  const std::size_t m = rows.rows(), n = model.latent();
  BasicTensor<T> z(Shape{m, n});
  kernels::gemm_nt(m, model.d(), n, rows.data(), model.w_enc.value.data(), z.data());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t i = 0; i < n; ++i) z(r, i) += model.b.value[i];
  }
  return z;
}

template <class T>
BasicTensor<T> decode(const SaeModel<T>& model, const BasicTensor<T>& z_sparse) {
  const auto rows = as_rows(z_sparse, model.latent(), "decode input");
  const std::size_t m = rows.rows(), d = model.d();
  BasicTensor<T> out(Shape{m, d});
  for (std::size_t r = 0; r < m; ++r) {
    T* dst = out.data() + r * d;
    std::copy(model.b_dec.value.data(), model.b_dec.value.data() + d, dst);
    const auto zr = rows.row(r);
    // Codes are sparse: accumulate only the active decoder rows.
    for (std::size_t i = 0; i < zr.size(); ++i) {
      if (zr[i] != T(0)) kernels::axpy(d, zr[i], model.w_dec.value.data() + i * d, dst);
    }
  }
  return out;
}

template <class T>
BasicTensor<T> features(const SaeModel<T>& model, const BasicTensor<T>& x) {
  return topk_sparsify(encode(model, x), model.k, model.mode);
}

template <class T>
ad::Var<T> topk(const ad::Var<T>& z, std::size_t k, TopkMode mode) {
  const auto& zv = z.value();
  const std::size_t m = zv.rows(), n = zv.cols();
  BasicTensor<T> out(zv.shape());
  // Per row: kept entries, then the threshold index (shifted mode).
  auto kept = std::make_shared<std::vector<std::vector<std::size_t>>>(m);
  auto thresholds = std::make_shared<std::vector<std::size_t>>(m);
  std::vector<std::size_t> idx;
  for (std::size_t r = 0; r < m; ++r) {
    sparsify_row(zv.row(r), k, mode, out.row(r), idx);
    (*thresholds)[r] = idx.back();
    for (std::size_t i : idx) {
      if (out(r, i) != T(0)) (*kept)[r].push_back(i);
    }
  }
  return z.tape()->record(std::move(out), {z}, [z, kept, thresholds, mode, n](ad::Tape<T>& t, const BasicTensor<T>& g) {
    auto& slot = t.grad_slot(z.id());
    for (std::size_t r = 0; r < kept->size(); ++r) {
      double total = 0.0;
      for (std::size_t i : (*kept)[r]) {
        slot[r * n + i] += g[r * n + i];
        total += double(g[r * n + i]);
      }
      if (mode == TopkMode::shifted) slot[r * n + (*thresholds)[r]] -= static_cast<T>(total);
    }
  });
}

template <class T>
ad::Var<T> sae_loss(ad::Tape<T>& tape, SaeModel<T>& model, const BasicTensor<T>& batch, double lambda,
                    LossParts* parts) {
  using namespace ad;
  const auto rows = as_rows(batch, model.d(), "batch");
  const double inv_m = 1.0 / double(rows.rows());
  auto bind = [&](Parameter<T>& p) { return tape.tracking() ? tape.parameter(p) : tape.view(p.value); };
  Var<T> x = tape.constant(rows);
  Var<T> z = add_row(matmul_nt(x, bind(model.w_enc)), bind(model.b));
  Var<T> zs = topk(z, model.k, model.mode);
  Var<T> x_hat = add_row(matmul(zs, bind(model.w_dec)), bind(model.b_dec));
  Var<T> recon = scale(sum_squares(sub(x, x_hat)), inv_m);
  Var<T> sparsity = scale(l1(zs), inv_m);
  Var<T> total = lambda == 0.0 ? recon : add(recon, scale(sparsity, lambda));
  if (parts) *parts = {double(total.value().item()), double(recon.value().item()), double(sparsity.value().item())};
  return total;
}

nlohmann::json to_json(const SaeMetrics& m, bool with_frequencies) {
  nlohmann::json j{{"step", m.step},
                   {"reconstruction_error", m.reconstruction_error},
                   {"mean_l0", m.mean_l0},
                   {"max_l0", m.max_l0},
                   {"mean_l1", m.mean_l1},
                   {"train_loss", m.train_loss},
                   {"dead_features", m.dead_features}};
  if (with_frequencies) j["firing_frequency"] = m.firing_frequency;
  return j;
}

SaeMetrics evaluate(const SaeModel<float>& model, const capture::ActivationDataset& data, std::uint64_t begin,
                    std::uint64_t end) {
  if (begin >= end || end > data.size()) throw ContractError("sae: empty or out-of-range evaluation rows");
  const std::size_t d = model.d(), n = model.latent();
  if (data.d_model() != d) throw FormatError("sae: dataset d_model differs from the model");
  const double count = double(end - begin);

  std::vector<double> mean(d, 0.0);
  for (std::uint64_t r = begin; r < end; ++r) {
    const auto rec = data.record(r);
    for (std::size_t c = 0; c < d; ++c) mean[c] += rec[c];
  }
  for (auto& v : mean) v /= count;

  SaeMetrics m;
  std::vector<std::uint64_t> fired(n, 0);
  std::vector<bool> selected(n, false);
  std::vector<std::size_t> idx;
  double sse = 0.0, sst = 0.0, l0 = 0.0, l1 = 0.0;
  auto batches = data.batches(4096, begin, end);
  for (Tensor x; batches.next(x);) {
    const Tensor z = encode(model, x);
    Tensor zs(z.shape());
    for (std::size_t r = 0; r < z.rows(); ++r) {
      sparsify_row<float>(z.row(r), model.k, model.mode, zs.row(r), idx);
      for (std::size_t i : idx) selected[i] = true;
    }
    const Tensor x_hat = decode(model, zs);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        const double e = double(x(r, c)) - double(x_hat(r, c));
        const double v = double(x(r, c)) - mean[c];
        sse += e * e;
        sst += v * v;
      }
      std::size_t nz = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const float a = zs(r, i);
        if (a != 0.0f) {
          ++nz;
          ++fired[i];
          l1 += a;
        }
      }
      l0 += double(nz);
      m.max_l0 = std::max(m.max_l0, nz);
    }
  }
  m.reconstruction_error = sst > 0.0 ? sse / sst : (sse > 0.0 ? INFINITY : 0.0);
  m.mean_l0 = l0 / count;
  m.mean_l1 = l1 / count;
  m.firing_frequency.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    m.firing_frequency[i] = double(fired[i]) / count;
    if (!selected[i]) ++m.dead_features;
  }
  return m;
}

SaeRun train_sae(const SaeConfig& config, const capture::ActivationDataset& data,
                 const std::optional<std::filesystem::path>& log_path) {
  config.validate();
  if (data.d_model() != config.d) {
    throw FormatError("sae: dataset " + data.path().string() + " has d_model " + std::to_string(data.d_model()) +
                      ", config expects " + std::to_string(config.d));
  }
  const auto& h = data.header();
  const std::uint64_t instances = h.instance_count;
  std::uint64_t held = static_cast<std::uint64_t>(std::llround(config.holdout_fraction * double(instances)));
  if (config.holdout_fraction > 0.0 && instances > 1) held = std::clamp<std::uint64_t>(held, 1, instances - 1);
  else held = 0;

  SaeRun run{};
  run.heldout_begin = (instances - held) * h.nodes_per_instance;
  run.train_rows = run.heldout_begin;
  const std::uint64_t eval_begin = held > 0 ? run.heldout_begin : 0;
  const std::uint64_t eval_end = held > 0 ? data.size() : run.train_rows;

  // b_dec starts at the training mean.
  TensorD mean_d(Shape{config.d});
  for (std::uint64_t r = 0; r < run.train_rows; ++r) {
    const auto rec = data.record(r);
    for (std::size_t c = 0; c < config.d; ++c) mean_d[c] += rec[c];
  }
  for (auto& v : mean_d.values()) v /= double(run.train_rows);
  const Tensor mean = mean_d.cast<float>();

  Rng rng(config.seed);
  Rng init = rng.split(0);
  run.model = SaeModel<float>::init(config, init, &mean);
  auto params = run.model.parameters();
  Adam<float> optimizer(params, config.adam);

  std::ofstream log;
  if (log_path) {
    log.open(*log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open SAE log " + log_path->string());
  }
  auto record = [&](std::size_t step, double train_loss) {
    SaeMetrics m = evaluate(run.model, data, eval_begin, eval_end);
    m.step = step;
    m.train_loss = train_loss;
    if (log.is_open()) {
      log << to_json(m).dump() << '\n';
      log.flush();
      if (!log) throw std::runtime_error("write failed: " + log_path->string());
    }
    run.history.push_back(m);
  };

  Rng sampler = rng.split(1);
  Tensor batch(Shape{config.batch_size, config.d});
  double loss_value = 0.0;
  for (std::size_t step = 0; step < config.steps; ++step) {
    for (std::size_t r = 0; r < config.batch_size; ++r) {
      const auto rec = data.record(sampler.below(run.train_rows));
      std::copy(rec.begin(), rec.end(), batch.row(r).begin());
    }
    ad::Tape<float> tape;
    optimizer.zero_grad();
    const auto loss = sae_loss(tape, run.model, batch, config.l1);
    loss_value = loss.value().item();
    if (!std::isfinite(loss_value)) {
      throw NumericalError("sae: non-finite loss at step " + std::to_string(step) + " (seed " +
                           std::to_string(config.seed) + ")");
    }
    tape.backward(loss);
    optimizer.step();
    run.model.normalize_decoder();
    const std::size_t done = step + 1;
    if (config.eval_every > 0 && done % config.eval_every == 0 && done != config.steps) record(done, loss_value);
  }
  record(config.steps, loss_value);
  run.final_metrics = run.history.back();
  return run;
}

void save_sae(const std::filesystem::path& path, const SaeModel<float>& model, const SaeConfig& config,
              nlohmann::json extra_meta) {
  io::Container c;
  c.kind = "sae";
  c.meta = std::move(extra_meta);
  c.meta["config"] = to_json(config);
  c.meta["k"] = model.k;
  c.tensors = {{"w_enc", model.w_enc.value}, {"b", model.b.value}, {"w_dec", model.w_dec.value},
               {"b_dec", model.b_dec.value}};
  io::write_container(path, c);
}

LoadedSae load_sae(const std::filesystem::path& path, std::optional<std::size_t> expected_d) {
  const auto c = io::read_container(path);
  if (c.kind != "sae") throw FormatError(path.string() + ": expected an SAE checkpoint, found '" + c.kind + "'");
  LoadedSae out;
  try {
    out.config = sae_config_from_json(c.meta.at("config"));
    out.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad SAE config: " + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(path.string() + ": bad SAE config: " + e.what());
  }
  if (expected_d && *expected_d != out.config.d) {
    throw FormatError(path.string() + ": SAE input width " + std::to_string(out.config.d) + " does not match d_model " +
                      std::to_string(*expected_d));
  }
  const std::size_t n = out.config.latent(), d = out.config.d;
  auto take = [&](const char* name, const Shape& shape) {
    const Tensor& t = c.tensor(name);
    if (t.shape() != shape) {
      throw FormatError(path.string() + ": tensor '" + name + "' has shape " + shape_string(t.shape()) +
                        ", expected " + shape_string(shape));
    }
    return ad::Parameter<float>(name, t);
  };
  out.model.w_enc = take("w_enc", {n, d});
  out.model.b = take("b", {n});
  out.model.w_dec = take("w_dec", {n, d});
  out.model.b_dec = take("b_dec", {d});
  out.model.k = out.config.k();
  out.model.mode = out.config.mode;
  out.meta = c.meta;
  return out;
}

#define TSPSAE_SAE_INSTANTIATE(T)                                                                   \
  template struct SaeModel<T>;                                                                      \
  template BasicTensor<T> encode(const SaeModel<T>&, const BasicTensor<T>&);                        \
  template BasicTensor<T> topk_sparsify(const BasicTensor<T>&, std::size_t, TopkMode);              \
  template BasicTensor<T> decode(const SaeModel<T>&, const BasicTensor<T>&);                        \
  template BasicTensor<T> features(const SaeModel<T>&, const BasicTensor<T>&);                      \
  template ad::Var<T> topk(const ad::Var<T>&, std::size_t, TopkMode);                               \
  template ad::Var<T> sae_loss(ad::Tape<T>&, SaeModel<T>&, const BasicTensor<T>&, double, LossParts*);
TSPSAE_SAE_INSTANTIATE(float)
TSPSAE_SAE_INSTANTIATE(double)
#undef TSPSAE_SAE_INSTANTIATE
template SaeModel<double> SaeModel<float>::cast<double>() const;
template SaeModel<float> SaeModel<double>::cast<float>() const;

}  // namespace tspsae::sae
