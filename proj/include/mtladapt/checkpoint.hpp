#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "mtladapt/adapters.hpp"

namespace mtladapt {

// Checkpoint = JSON manifest (config + ordered parameter directory with
// shapes and byte offsets) + raw little-endian f64 blob. Parameter order in
// the manifest is the order of `params` and must be deterministic.
void save_checkpoint(const std::string& json_path, const std::string& bin_path,
                     const std::vector<NamedParam>& params, const nlohmann::json& config_meta);

// Loads blob values into the given tensors, matching manifest entries by name
// and shape. Throws on any mismatch.
void load_checkpoint(const std::string& json_path, const std::string& bin_path,
                     std::vector<NamedParam>& params);

nlohmann::json read_checkpoint_manifest(const std::string& json_path);

}  // namespace mtladapt
