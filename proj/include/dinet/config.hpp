#pragma once

// Run configuration: one JSON document covering data generation, model
// shape and training, with dotted-key overrides.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dinet/data.hpp"
#include "dinet/model.hpp"
#include "dinet/train.hpp"

namespace dinet {

struct RunConfig {
  std::uint64_t seed = 1;
  SyntheticConfig data;
  ModelConfig model = ModelConfig::desk_default();
  TrainConfig train;

  // Pushes the global seed and the data shape/class count into the sections
  // that depend on them, then validates everything.
  void finalize();

  std::string to_json(int indent = 2) const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::filesystem::path& path);

  // key=value with a dotted key, e.g. train.epochs=3 or data.night.gain=0.2.
  // The value is parsed as JSON when possible, otherwise taken as a string.
  void apply_override(const std::string& assignment);

  // FNV-1a of the compact JSON form.
  std::uint64_t hash() const;
};

// Freshly initialized model for a finalized run configuration.
DiNetModel<float> build_model(const RunConfig& config);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace dinet
