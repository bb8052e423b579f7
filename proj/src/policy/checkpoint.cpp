#include "tspsae/policy/checkpoint.hpp"

#include "tspsae/error.hpp"

namespace tspsae::policy {

nlohmann::json config_to_json(const PolicyConfig& c) {
  return {{"d_model", c.d_model}, {"layers", c.layers}, {"heads", c.heads}, {"ff_width", c.ff_width},
          {"logit_clip", c.logit_clip}};
}

PolicyConfig config_from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ff_width = j.value("ff_width", c.ff_width);
  c.logit_clip = j.value("logit_clip", c.logit_clip);
  return c;
}

io::Container to_container(const Policy<float>& policy, nlohmann::json extra_meta) {
  io::Container c;
  c.kind = "policy";
  c.meta = std::move(extra_meta);
  c.meta["config"] = config_to_json(policy.config());
  for (const auto* p : policy.parameters()) c.tensors.push_back({p->name, p->value});
  return c;
}

Policy<float> from_container(const io::Container& container, const PolicyConfig* expected) {
  if (container.kind != "policy") throw FormatError("checkpoint: expected a policy, found '" + container.kind + "'");
  PolicyConfig config;
  try {
    config = config_from_json(container.meta.at("config"));
    config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad policy config: ") + e.what());
  } catch (const ParameterError& e) {
    throw FormatError(std::string("checkpoint: bad policy config: ") + e.what());
  }
  if (expected && !(*expected == config)) {
    throw FormatError("checkpoint: policy config " + config_to_json(config).dump() + " does not match expected " +
                      config_to_json(*expected).dump());
  }
  Policy<float> policy(config);
  const auto params = policy.parameters();
  // Training checkpoints carry optimiser state under "adam."; anything
  // else beyond the parameters is foreign.
  std::size_t own = 0;
  for (const auto& t : container.tensors) own += t.name.rfind("adam.", 0) != 0;
  if (own != params.size()) {
    throw FormatError("checkpoint: " + std::to_string(own) + " tensors, policy has " + std::to_string(params.size()));
  }
  for (auto* p : params) {
    const Tensor& t = container.tensor(p->name);
    if (t.shape() != p->value.shape()) {
      throw FormatError("checkpoint: tensor '" + p->name + "' has shape " + shape_string(t.shape()) + ", expected " +
                        shape_string(p->value.shape()));
    }
    p->value = t;
  }
  return policy;
}

void save_policy(const std::filesystem::path& path, const Policy<float>& policy, nlohmann::json extra_meta) {
  io::write_container(path, to_container(policy, std::move(extra_meta)));
}

Policy<float> load_policy(const std::filesystem::path& path, const PolicyConfig* expected) {
  return from_container(io::read_container(path), expected);
}

}  // namespace tspsae::policy
