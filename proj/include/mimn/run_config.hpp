#pragma once

// Run configuration for the command-line tool: model + training settings
// plus file paths. Loaded from a flat-key JSON file; command-line overrides
// win over file values.

#include <optional>
#include <string>
#include <vector>

#include "mimn/model.hpp"
#include "mimn/trainer.hpp"

namespace mimn {

struct RunConfig {
  ModelConfig model;
  TrainConfig train_cfg;
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  std::string embeddings_path;
  std::string checkpoint_path;
  std::vector<std::string> ensemble_paths;
  std::string out_dir = ".";
  std::string format = "unified_jsonl";
  std::string precision = "f32";  // f32 | f64
};

// Optional values collected from command-line flags; unset fields defer to
// the config file (which defers to defaults).
struct RunOverrides {
  std::optional<Index> embed_dim, hidden, mlp_hidden;
  std::optional<int> turns, patience, max_epochs, num_labels;
  std::optional<double> dropout, l2, lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> batch_size;
  std::optional<std::string> variant, train_path, valid_path, test_path, embeddings_path,
      checkpoint_path, out_dir, format, precision;
  std::optional<std::vector<std::string>> ensemble_paths;
};

// defaults <- file (if path nonempty) <- overrides
RunConfig resolve_run_config(const std::string& config_path, const RunOverrides& overrides);

void validate_precision(const std::string& precision);

}  // namespace mimn
