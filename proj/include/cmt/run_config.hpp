#pragma once

#include <stdexcept>
#include <string>

#include "cmt/data.hpp"
#include "cmt/model.hpp"

// key=value run configuration files: '#' comments, blank lines ignored,
// unknown keys rejected with the offending line number.

namespace cmt {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  GenConfig gen;
  int64_t gen_count = 128;
  std::string merge = "argmax";    // or "maskwise"
  double conf_threshold = 0.7;     // argmax: min class confidence
  double object_threshold = 0.7;   // maskwise: min class confidence
  double overlap_threshold = 0.5;  // maskwise: retained/owned area ratio
};

// `context` prefixes error messages (file name or "--set").
void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value,
                     const std::string& context);

RunConfig parse_config_file(const std::string& path);

}  // namespace cmt
