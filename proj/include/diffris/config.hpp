#pragma once

// Run configuration: one JSON document with sections backbones, cp_adapter,
// pcmrd, training, data and eval. Every key is optional and defaults to the
// value in the corresponding C++ struct; unknown keys are rejected.

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffris/model.hpp"
#include "diffris/synthdata.hpp"
#include "diffris/training.hpp"

namespace diffris {

struct EvalConfig {
  std::vector<double> thresholds = metrics::kDefaultThresholds;
  double binarize_threshold = 0.0;
};

struct RunConfig {
  ModelConfig model;
  training::Config training;
  synthdata::Config data;
  EvalConfig eval;

  // Cross-section checks (vocabulary size, token length, canvas vs.
  // downsampling) on top of each module's own validation.
  void validate() const;
};

// Throws ParameterError naming the offending key.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig load_config(const std::filesystem::path& path);

// Applies "section.key=value" where value is parsed as JSON, falling back to
// a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

}  // namespace diffris
