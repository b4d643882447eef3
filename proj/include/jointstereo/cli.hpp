#pragma once

// Command-line surface: make-toy, train, eval, translate.

#include <iosfwd>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "jointstereo/evaluation.hpp"
#include "jointstereo/training.hpp"

namespace jointstereo {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitConfig = 3,
  kExitData = 4,
  kExitNumerical = 5,
};

// Everything a training run needs. Serialized as one flat JSON object; the
// training keys are those of TrainingConfig. Relative paths are resolved
// against the directory of the config file.
struct RunConfig {
  std::string synthetic_manifest;
  std::string real_manifest;
  std::string eval_manifest;  // defaults to real_manifest
  std::string output_dir = "run";
  D1Combine d1_combine = D1Combine::kAnd;
  TrainingConfig training;

  void validate() const;
  // Throws IoError when unreadable, ConfigError on bad or unknown keys.
  static RunConfig load(const std::string& path);
};

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j, const std::string& base_dir = "");

// Runs one command; returns the process exit code. Errors are reported on
// `err` as a single JSON object line.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace jointstereo
