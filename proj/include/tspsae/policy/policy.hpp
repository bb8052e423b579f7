#pragma once

// Attention encoder / pointer decoder for tour construction.
//
// The encoder embeds every node once per instance (dynamic flags zero) and
// runs `layers` blocks of multi-head self-attention and feed-forward, each
// followed by a residual add and layer normalisation. Its final residual
// stream is what the capture stage records.
//
// Each decode step builds a context from the graph embedding (mean node
// embedding) and the current node's embedding, or a learned placeholder
// before the first choice, attends once over unvisited nodes (glimpse) and
// scores every node with a tanh-clipped scaled dot product.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "tspsae/numerics/ops.hpp"
#include "tspsae/rng.hpp"
#include "tspsae/tsp/solvers.hpp"

namespace tspsae::policy {

struct PolicyConfig {
  std::size_t d_model = 128;
  std::size_t layers = 3;
  std::size_t heads = 8;
  std::size_t ff_width = 512;
  double logit_clip = 10.0;

  void validate() const;
  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

inline constexpr std::size_t kNodeFeatures = 5;

/// Per-node encoder input: coordinates plus decoder-state flags.
struct NodeInput {
  double x = 0.0;
  double y = 0.0;
  bool is_current = false;
  bool is_terminal = false;
  bool is_visited = false;
};

// Inputs for the single encoder pass: all flags zero.
std::vector<NodeInput> initial_node_inputs(const tsp::Instance& instance);

/// Partial tour under construction for one instance.
class DecoderState {
 public:
  explicit DecoderState(std::size_t n) : visited_(n, false) {}

  std::size_t size() const { return visited_.size(); }
  const std::vector<bool>& visited() const { return visited_; }
  std::optional<std::size_t> current() const { return current_; }
  const std::vector<std::size_t>& partial_order() const { return order_; }
  std::size_t remaining() const { return visited_.size() - order_.size(); }
  bool complete() const { return remaining() == 0; }

  // ContractError if `node` is out of range or already visited.
  void visit(std::size_t node);

 private:
  std::vector<bool> visited_;
  std::optional<std::size_t> current_;
  std::vector<std::size_t> order_;
};

struct DecodeMode {
  enum class Kind { greedy, sample };
  Kind kind = Kind::greedy;
  double temperature = 1.0;

  static DecodeMode greedy() { return {}; }
  static DecodeMode sample(double temperature) { return {Kind::sample, temperature}; }
};

/// Encoder output for a batch of equally sized instances, plus the
/// decoder-side projections computed once per rollout.
template <class T>
struct Encoding {
  ad::Var<T> nodes;  // [batch * n, d_model], final residual stream
  ad::Var<T> graph;  // [batch, d_model]
  ad::Var<T> glimpse_keys;
  ad::Var<T> glimpse_values;
  ad::Var<T> logit_keys;
  // Decoder parameters, bound once per encoding.
  ad::Var<T> placeholder;
  ad::Var<T> context_weight;
  ad::Var<T> glimpse_out;
  std::vector<tsp::Instance> instances;
  std::size_t batch = 0;
  std::size_t n = 0;
};

template <class T>
struct Rollout {
  std::vector<tsp::Tour> tours;
  std::vector<std::vector<double>> step_log_probs;  // [batch][n]
  ad::Var<T> total_log_prob;                        // [batch]; only on tracking tapes
};

template <class T>
class Policy {
 public:
  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, unit norm gains.
  Policy(const PolicyConfig& config, Rng& rng);
  // Zero weights; used before loading a checkpoint.
  explicit Policy(const PolicyConfig& config);

  template <class U>
  Policy<U> cast() const;

  const PolicyConfig& config() const { return config_; }
  std::vector<ad::Parameter<T>*> parameters();
  std::vector<const ad::Parameter<T>*> parameters() const;
  ad::Parameter<T>& parameter(const std::string& name);

  // Batched encoder. All instances must share n. On a tracking tape the
  // policy's parameters become gradient leaves; a const policy only
  // accepts non-tracking tapes.
  Encoding<T> encode(ad::Tape<T>& tape, std::span<const tsp::Instance> instances);
  Encoding<T> encode(ad::Tape<T>& tape, std::span<const tsp::Instance> instances) const;

  // Clipped pointer logits [batch, n] for one step; visited nodes are not
  // masked here (decode_step does that). `current` is empty before the first
  // selection, otherwise one node index per instance. `visited` has
  // batch * n bytes.
  ad::Var<T> step_logits(ad::Tape<T>& tape, const Encoding<T>& enc, std::span<const std::size_t> current,
                         const ad::Mask& visited) const;

  // Full construction. Sampling draws from softmax(logits / T); greedy takes
  // the highest logit (lowest index on ties). Step log-probabilities are
  // under the decode temperature (1 for greedy).
  Rollout<T> rollout(ad::Tape<T>& tape, const Encoding<T>& enc, DecodeMode mode, Rng* rng) const;

  // Log-likelihood of given tours, decoded with teacher forcing.
  Rollout<T> replay(ad::Tape<T>& tape, const Encoding<T>& enc, std::span<const tsp::Tour> tours,
                    double temperature) const;

 private:
  using Chooser = std::function<std::size_t(std::size_t instance, std::size_t step, std::span<const T> log_probs,
                                            std::span<const T> logits)>;
  Rollout<T> decode(ad::Tape<T>& tape, const Encoding<T>& enc, double temperature, const Chooser& choose) const;
  Encoding<T> encode_with(ad::Tape<T>& tape, std::span<const tsp::Instance> instances,
                          const std::function<ad::Var<T>(const ad::Parameter<T>&)>& bind) const;
  void build(Rng* rng);

  template <class U>
  friend class Policy;

  PolicyConfig config_;
  // Stable addresses: tapes hold pointers into this list.
  std::vector<std::unique_ptr<ad::Parameter<T>>> params_;
};

/// Single-instance views of the batched API.
template <class T>
struct EncodedInstance {
  std::unique_ptr<ad::Tape<T>> tape;
  Encoding<T> encoding;

  BasicTensor<T> node_embeddings() const { return encoding.nodes.value(); }  // [n, d_model]
  BasicTensor<T> graph_embedding() const;                                       // [d_model]
};

template <class T>
EncodedInstance<T> encode(const Policy<T>& policy, const tsp::Instance& instance);

// Logits over nodes for the next choice, -inf on visited nodes.
// ContractError when every node is already visited.
template <class T>
std::vector<double> decode_step(const Policy<T>& policy, const EncodedInstance<T>& encoded, const DecoderState& state);

struct RolloutResult {
  tsp::Tour tour;
  std::vector<double> step_log_probs;
};

template <class T>
RolloutResult rollout(const Policy<T>& policy, const tsp::Instance& instance, DecodeMode mode, Rng* rng = nullptr);

// Greedy tours for many instances, batched; splits the work over
// `threads` workers with independent tapes.
template <class T>
std::vector<tsp::Tour> greedy_tours(const Policy<T>& policy, std::span<const tsp::Instance> instances,
                                    std::size_t batch_size = 64, std::size_t threads = 1);

}  // namespace tspsae::policy
