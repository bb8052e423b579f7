#pragma once

#include <filesystem>

#include "tspsae/io/container.hpp"
#include "tspsae/policy/policy.hpp"

namespace tspsae::policy {

nlohmann::json config_to_json(const PolicyConfig& config);
PolicyConfig config_from_json(const nlohmann::json& j);

// Container of kind "policy": meta.config plus one tensor per parameter.
io::Container to_container(const Policy<float>& policy, nlohmann::json extra_meta = nlohmann::json::object());

// FormatError if the kind, a tensor name or a tensor shape disagrees with the
// configuration recorded in the container (or with `expected`, if given).
Policy<float> from_container(const io::Container& container, const PolicyConfig* expected = nullptr);

void save_policy(const std::filesystem::path& path, const Policy<float>& policy,
                 nlohmann::json extra_meta = nlohmann::json::object());
Policy<float> load_policy(const std::filesystem::path& path, const PolicyConfig* expected = nullptr);

}  // namespace tspsae::policy
