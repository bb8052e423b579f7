#include "tspsae/policy/policy.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>
#include <thread>

#include "tspsae/error.hpp"

namespace tspsae::policy {

void PolicyConfig::validate() const {
  if (d_model == 0 || layers == 0 || heads == 0 || ff_width == 0) {
    throw ParameterError("policy: d_model, layers, heads and ff_width must be positive");
  }
  if (d_model % heads != 0) {
    throw ParameterError("policy: d_model " + std::to_string(d_model) + " not divisible by heads " +
                         std::to_string(heads));
  }
  if (!(logit_clip > 0.0)) throw ParameterError("policy: logit_clip must be > 0");
}

std::vector<NodeInput> initial_node_inputs(const tsp::Instance& instance) {
  std::vector<NodeInput> out(instance.n);
  for (std::size_t i = 0; i < instance.n; ++i) {
    out[i].x = instance.coords[i][0];
    out[i].y = instance.coords[i][1];
  }
  return out;
}

void DecoderState::visit(std::size_t node) {
  if (node >= visited_.size()) {
    throw ContractError("decoder: node " + std::to_string(node) + " out of range for n=" +
                        std::to_string(visited_.size()));
  }
  if (visited_[node]) throw ContractError("decoder: node " + std::to_string(node) + " already visited");
  visited_[node] = true;
  current_ = node;
  order_.push_back(node);
}

namespace {

// Parameter layout; the order is also the checkpoint order.
struct Slot {
  std::string name;
  Shape shape;
  std::size_t fan_in;
  enum class Init { uniform, ones, zeros } init;
};

std::vector<Slot> layout(const PolicyConfig& c) {
  const std::size_t d = c.d_model;
  std::vector<Slot> s;
  s.push_back({"embed.weight", {kNodeFeatures, d}, kNodeFeatures, Slot::Init::uniform});
  s.push_back({"embed.bias", {d}, kNodeFeatures, Slot::Init::uniform});
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    for (const char* w : {"wq", "wk", "wv", "wo"}) s.push_back({p + w, {d, d}, d, Slot::Init::uniform});
    s.push_back({p + "norm1.gain", {d}, 0, Slot::Init::ones});
    s.push_back({p + "norm1.bias", {d}, 0, Slot::Init::zeros});
    s.push_back({p + "ff1.weight", {d, c.ff_width}, d, Slot::Init::uniform});
    s.push_back({p + "ff1.bias", {c.ff_width}, d, Slot::Init::uniform});
    s.push_back({p + "ff2.weight", {c.ff_width, d}, c.ff_width, Slot::Init::uniform});
    s.push_back({p + "ff2.bias", {d}, c.ff_width, Slot::Init::uniform});
    s.push_back({p + "norm2.gain", {d}, 0, Slot::Init::ones});
    s.push_back({p + "norm2.bias", {d}, 0, Slot::Init::zeros});
  }
  s.push_back({"dec.placeholder", {d}, d, Slot::Init::uniform});
  s.push_back({"dec.context", {2 * d, d}, 2 * d, Slot::Init::uniform});
  for (const char* w : {"dec.glimpse_k", "dec.glimpse_v", "dec.glimpse_out", "dec.logit_k"}) {
    s.push_back({w, {d, d}, d, Slot::Init::uniform});
  }
  return s;
}

// Indices into params_ for the fixed layout above.
constexpr std::size_t kEncoderBase = 2;
constexpr std::size_t kPerLayer = 12;

}  // namespace

template <class T>
Policy<T>::Policy(const PolicyConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  build(&rng);
}

template <class T>
Policy<T>::Policy(const PolicyConfig& config) : config_(config) {
  config_.validate();
  build(nullptr);
}

template <class T>
void Policy<T>::build(Rng* rng) {
  for (const auto& slot : layout(config_)) {
    BasicTensor<T> value(slot.shape);
    if (slot.init == Slot::Init::ones) {
      value.fill(T(1));
    } else if (slot.init == Slot::Init::uniform && rng) {
      const double bound = 1.0 / std::sqrt(double(slot.fan_in));
      for (auto& v : value.values()) v = static_cast<T>(rng->uniform(-bound, bound));
    }
    params_.push_back(std::make_unique<ad::Parameter<T>>(slot.name, std::move(value)));
  }
}

template <class T>
template <class U>
Policy<U> Policy<T>::cast() const {
  Policy<U> out(config_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.params_[i]->value = params_[i]->value.template cast<U>();
  }
  return out;
}

template <class T>
std::vector<ad::Parameter<T>*> Policy<T>::parameters() {
  std::vector<ad::Parameter<T>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <class T>
std::vector<const ad::Parameter<T>*> Policy<T>::parameters() const {
  std::vector<const ad::Parameter<T>*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

template <class T>
ad::Parameter<T>& Policy<T>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw ParameterError("policy: no parameter named '" + name + "'");
}

template <class T>
Encoding<T> Policy<T>::encode(ad::Tape<T>& tape, std::span<const tsp::Instance> instances) {
  // `this` is non-const here, so handing out mutable parameters is sound.
  return encode_with(tape, instances, [&tape](const ad::Parameter<T>& p) {
    return tape.tracking() ? tape.parameter(const_cast<ad::Parameter<T>&>(p)) : tape.view(p.value);
  });
}

template <class T>
Encoding<T> Policy<T>::encode(ad::Tape<T>& tape, std::span<const tsp::Instance> instances) const {
  if (tape.tracking()) throw ContractError("policy: a const policy cannot be bound to a tracking tape");
  return encode_with(tape, instances, [&tape](const ad::Parameter<T>& p) { return tape.view(p.value); });
}

template <class T>
Encoding<T> Policy<T>::encode_with(ad::Tape<T>& tape, std::span<const tsp::Instance> instances,
                                   const std::function<ad::Var<T>(const ad::Parameter<T>&)>& bind) const {
  using namespace ad;
  if (instances.empty()) throw ContractError("policy: empty batch");
  const std::size_t n = instances.front().n;
  const std::size_t batch = instances.size();
  BasicTensor<T> features(Shape{batch * n, kNodeFeatures});
  for (std::size_t b = 0; b < batch; ++b) {
    if (instances[b].n != n) throw DimensionError("policy: batch mixes instance sizes");
    const auto inputs = initial_node_inputs(instances[b]);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = features.row(b * n + i);
      row[0] = static_cast<T>(inputs[i].x);
      row[1] = static_cast<T>(inputs[i].y);
      row[2] = T(inputs[i].is_current);
      row[3] = T(inputs[i].is_terminal);
      row[4] = T(inputs[i].is_visited);
    }
  }

  auto p = [&](std::size_t i) { return bind(*params_[i]); };
  Var<T> h = add_row(matmul(tape.constant(std::move(features)), p(0)), p(1));
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const std::size_t at = kEncoderBase + l * kPerLayer;
    Var<T> att = attention(matmul(h, p(at)), matmul(h, p(at + 1)), matmul(h, p(at + 2)), config_.heads, batch);
    h = layer_norm(add(h, matmul(att, p(at + 3))), p(at + 4), p(at + 5));
    Var<T> ff = add_row(matmul(relu(add_row(matmul(h, p(at + 6)), p(at + 7))), p(at + 8)), p(at + 9));
    h = layer_norm(add(h, ff), p(at + 10), p(at + 11));
  }

  const std::size_t dec = kEncoderBase + config_.layers * kPerLayer;
  Encoding<T> enc;
  enc.nodes = h;
  enc.graph = group_mean(h, batch);
  enc.glimpse_keys = matmul(h, p(dec + 2));
  enc.glimpse_values = matmul(h, p(dec + 3));
  enc.logit_keys = matmul(h, p(dec + 5));
  enc.placeholder = p(dec);
  enc.context_weight = p(dec + 1);
  enc.glimpse_out = p(dec + 4);
  enc.instances.assign(instances.begin(), instances.end());
  enc.batch = batch;
  enc.n = n;
  return enc;
}

template <class T>
ad::Var<T> Policy<T>::step_logits(ad::Tape<T>& tape, const Encoding<T>& enc, std::span<const std::size_t> current,
                                  const ad::Mask& visited) const {
  using namespace ad;
  if (visited.size() != enc.batch * enc.n) throw DimensionError("policy: visited mask size");
  if (enc.nodes.tape() != &tape) throw ContractError("policy: encoding recorded on a different tape");

  Var<T> here;
  if (current.empty()) {
    here = broadcast_rows(enc.placeholder, enc.batch);
  } else {
    if (current.size() != enc.batch) throw DimensionError("policy: one current node per instance");
    std::vector<std::size_t> rows(enc.batch);
    for (std::size_t b = 0; b < enc.batch; ++b) {
      if (current[b] >= enc.n) throw ContractError("policy: current node out of range");
      rows[b] = b * enc.n + current[b];
    }
    here = gather_rows(enc.nodes, rows);
  }
  Var<T> q = matmul(concat_cols(enc.graph, here), enc.context_weight);
  Var<T> glimpse =
      matmul(attention(q, enc.glimpse_keys, enc.glimpse_values, config_.heads, enc.batch, &visited), enc.glimpse_out);
  Var<T> compat = scale(group_rowdot(glimpse, enc.logit_keys), 1.0 / std::sqrt(double(config_.d_model)));
  return scale(ad::tanh(compat), config_.logit_clip);
}

template <class T>
Rollout<T> Policy<T>::decode(ad::Tape<T>& tape, const Encoding<T>& enc, double temperature,
                             const Chooser& choose) const {
  using namespace ad;
  const std::size_t batch = enc.batch, n = enc.n;
  Mask visited(batch * n, 0);
  std::vector<std::size_t> current;
  std::vector<std::vector<std::size_t>> orders(batch);
  Rollout<T> out;
  out.step_log_probs.assign(batch, {});

  for (std::size_t step = 0; step < n; ++step) {
    Var<T> logits = step_logits(tape, enc, current, visited);
    Var<T> logp = log_softmax(logits, &visited, temperature);
    std::vector<std::size_t> chosen(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::span<const T> lp = logp.value().row(b);
      const std::span<const T> lg = logits.value().row(b);
      const std::size_t j = choose(b, step, lp, lg);
      if (j >= n || visited[b * n + j]) throw ContractError("policy: chooser picked an unavailable node");
      chosen[b] = j;
      out.step_log_probs[b].push_back(double(lp[j]));
      visited[b * n + j] = 1;
      orders[b].push_back(j);
    }
    if (tape.tracking()) {
      Var<T> picked = pick(logp, chosen);
      out.total_log_prob = out.total_log_prob.valid() ? add(out.total_log_prob, picked) : picked;
    }
    current = std::move(chosen);
  }
  for (std::size_t b = 0; b < batch; ++b) out.tours.push_back(tsp::make_tour(enc.instances[b], orders[b]));
  return out;
}

template <class T>
Rollout<T> Policy<T>::rollout(ad::Tape<T>& tape, const Encoding<T>& enc, DecodeMode mode, Rng* rng) const {
  if (mode.kind == DecodeMode::Kind::greedy) {
    auto pick_max = [](std::size_t, std::size_t, std::span<const T> lp, std::span<const T>) {
      std::size_t best = lp.size();
      for (std::size_t j = 0; j < lp.size(); ++j) {
        if (std::isinf(lp[j]) && lp[j] < 0) continue;
        if (best == lp.size() || lp[j] > lp[best]) best = j;
      }
      return best;
    };
    return decode(tape, enc, 1.0, pick_max);
  }
  if (!rng) throw ContractError("policy: sampling needs an Rng");
  if (!(mode.temperature > 0.0)) throw ParameterError("policy: temperature must be > 0");
  auto draw = [rng](std::size_t, std::size_t, std::span<const T> lp, std::span<const T>) {
    const double u = rng->uniform();
    double cum = 0.0;
    std::size_t last = lp.size();
    for (std::size_t j = 0; j < lp.size(); ++j) {
      if (std::isinf(lp[j]) && lp[j] < 0) continue;
      last = j;
      cum += std::exp(double(lp[j]));
      if (u < cum) return j;
    }
    return last;  // rounding left u above the total mass
  };
  return decode(tape, enc, mode.temperature, draw);
}

template <class T>
Rollout<T> Policy<T>::replay(ad::Tape<T>& tape, const Encoding<T>& enc, std::span<const tsp::Tour> tours,
                             double temperature) const {
  if (tours.size() != enc.batch) throw DimensionError("policy: one tour per instance");
  for (const auto& t : tours) {
    if (!tsp::is_permutation_of_n(t.order, enc.n)) throw ContractError("policy: replayed order is not a tour");
  }
  auto forced = [tours](std::size_t b, std::size_t step, std::span<const T>, std::span<const T>) {
    return tours[b].order[step];
  };
  return decode(tape, enc, temperature, forced);
}

template class Policy<float>;
template class Policy<double>;
template Policy<double> Policy<float>::cast<double>() const;
template Policy<float> Policy<double>::cast<float>() const;
template Policy<float> Policy<float>::cast<float>() const;
template Policy<double> Policy<double>::cast<double>() const;

template <class T>
BasicTensor<T> EncodedInstance<T>::graph_embedding() const {
  const auto& g = encoding.graph.value();
  return BasicTensor<T>(Shape{g.cols()}, std::vector<T>(g.values().begin(), g.values().end()));
}

template <class T>
EncodedInstance<T> encode(const Policy<T>& policy, const tsp::Instance& instance) {
  EncodedInstance<T> out;
  out.tape = std::make_unique<ad::Tape<T>>(false);
  out.encoding = policy.encode(*out.tape, std::span<const tsp::Instance>(&instance, 1));
  return out;
}

template <class T>
std::vector<double> decode_step(const Policy<T>& policy, const EncodedInstance<T>& encoded, const DecoderState& state) {
  const std::size_t n = encoded.encoding.n;
  if (state.size() != n) throw DimensionError("decode_step: state size differs from instance size");
  if (state.complete()) throw ContractError("decode_step: every node is already visited");
  ad::Mask visited(n, 0);
  for (std::size_t j = 0; j < n; ++j) visited[j] = state.visited()[j] ? 1 : 0;
  std::vector<std::size_t> current;
  if (state.current()) current.push_back(*state.current());
  const auto logits = policy.step_logits(*encoded.tape, encoded.encoding, current, visited);
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = visited[j] ? -std::numeric_limits<double>::infinity() : double(logits.value()[j]);
  }
  return out;
}

template <class T>
RolloutResult rollout(const Policy<T>& policy, const tsp::Instance& instance, DecodeMode mode, Rng* rng) {
  ad::Tape<T> tape(false);
  const auto enc = policy.encode(tape, std::span<const tsp::Instance>(&instance, 1));
  auto r = policy.rollout(tape, enc, mode, rng);
  return {std::move(r.tours.front()), std::move(r.step_log_probs.front())};
}

template <class T>
std::vector<tsp::Tour> greedy_tours(const Policy<T>& policy, std::span<const tsp::Instance> instances,
                                    std::size_t batch_size, std::size_t threads) {
  if (batch_size == 0) throw ParameterError("greedy_tours: batch_size must be positive");
  std::vector<tsp::Tour> out(instances.size());
  // Chunks break wherever the instance size changes, so mixed sizes work.
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  for (std::size_t begin = 0; begin < instances.size();) {
    std::size_t end = begin + 1;
    while (end < instances.size() && end - begin < batch_size && instances[end].n == instances[begin].n) ++end;
    chunks.emplace_back(begin, end);
    begin = end;
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t c; (c = next.fetch_add(1)) < chunks.size();) {
      const auto [begin, end] = chunks[c];
      ad::Tape<T> tape(false);
      const auto enc = policy.encode(tape, instances.subspan(begin, end - begin));
      auto r = policy.rollout(tape, enc, DecodeMode::greedy(), nullptr);
      for (std::size_t i = begin; i < end; ++i) out[i] = std::move(r.tours[i - begin]);
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, chunks.size()));
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return out;
}

#define TSPSAE_POLICY_INSTANTIATE(T)                                                                        \
  template struct EncodedInstance<T>;                                                                       \
  template EncodedInstance<T> encode(const Policy<T>&, const tsp::Instance&);                               \
  template std::vector<double> decode_step(const Policy<T>&, const EncodedInstance<T>&, const DecoderState&); \
  template RolloutResult rollout(const Policy<T>&, const tsp::Instance&, DecodeMode, Rng*);                 \
  template std::vector<tsp::Tour> greedy_tours(const Policy<T>&, std::span<const tsp::Instance>, std::size_t, \
                                               std::size_t);
TSPSAE_POLICY_INSTANTIATE(float)
TSPSAE_POLICY_INSTANTIATE(double)
#undef TSPSAE_POLICY_INSTANTIATE

}  // namespace tspsae::policy
