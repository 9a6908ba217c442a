#pragma once

// Run configuration for the command-line tools: model dimensions, optimizer
// settings, paths, and run control, loadable from a simple key=value file
// ('#' starts a comment, blank lines are ignored, unknown keys are errors).
//
// dump() renders the effective configuration in a fixed canonical order; the
// tools write that text next to their outputs and hash it, so two runs with
// the same effective configuration produce byte-identical artifacts.

#include <cstdint>
#include <string>

#include "stfusion/aggregation.hpp"
#include "stfusion/model.hpp"
#include "stfusion/objective.hpp"
#include "stfusion/retrieval.hpp"

namespace stf {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  double sigma_init = 0.07;

  uint64_t seed = 1;
  int steps = 200;
  int batch_size = 4;

  std::string corpus;      // input corpus path (JSON lines)
  std::string out_dir;     // artifact directory
  std::string checkpoint;  // checkpoint to load for eval/embed
  std::string resume;      // checkpoint to resume training from

  EvalMode eval_mode = EvalMode::scene_text_aware;
  FusionStrategy strategy = FusionStrategy::fusion_token;

  void validate() const;  // throws ConfigError

  // Canonical text: every key exactly once, fixed order, '=' separated.
  std::string dump() const;

  // Hash of dump(), 16 hex digits.
  std::string hash() const;

  // Applies "key=value" to this config; throws ConfigError on unknown keys or
  // unparseable values.
  void set(const std::string& key, const std::string& value);

  static RunConfig from_file(const std::string& path);
};

}  // namespace stf
