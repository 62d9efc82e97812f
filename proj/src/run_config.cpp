#include "mimn/run_config.hpp"

#include <json.hpp>

#include <fstream>
#include <unordered_set>

namespace mimn {

using json = nlohmann::json;

void validate_precision(const std::string& precision) {
  if (precision != "f32" && precision != "f64") {
    throw ConfigError("precision must be f32 or f64, got " + precision);
  }
}

namespace {

const std::unordered_set<std::string> kKnownKeys = {
    "embed_dim", "hidden",     "turns",    "variant",   "mlp_hidden", "dropout",
    "labels",    "num_labels", "batch_size", "l2",      "lr",         "patience",
    "max_epochs", "seed",      "train",    "valid",     "test",       "embeddings",
    "checkpoint", "out_dir",   "format",   "precision"};

void apply_file(RunConfig& cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw ConfigError("config file is not a JSON object: " + path);

  for (const auto& [key, value] : j.items()) {
    if (!kKnownKeys.count(key)) throw ConfigError("unknown config key: " + key);
    (void)value;
  }

  bool labels_given = false;
  if (j.contains("labels")) {
    cfg.model.labels = j["labels"].get<std::vector<std::string>>();
    labels_given = true;
  }
  if (j.contains("num_labels")) {
    const int n = j["num_labels"].get<int>();
    if (labels_given) {
      if (static_cast<int>(cfg.model.labels.size()) != n) {
        throw ConfigError("num_labels disagrees with the labels list");
      }
    } else if (n == 2) {
      cfg.model.labels = {"neutral", "entails"};
    } else if (n == 3) {
      cfg.model.labels = {"neutral", "entailment", "contradiction"};
    } else {
      throw ConfigError("num_labels must be 2 or 3");
    }
  }
  if (j.contains("embed_dim")) cfg.model.embed_dim = j["embed_dim"].get<Index>();
  if (j.contains("hidden")) cfg.model.hidden = j["hidden"].get<Index>();
  if (j.contains("turns")) cfg.model.turns = j["turns"].get<int>();
  if (j.contains("variant")) cfg.model.variant = parse_variant(j["variant"].get<std::string>());
  if (j.contains("mlp_hidden")) cfg.model.mlp_hidden = j["mlp_hidden"].get<Index>();
  if (j.contains("dropout")) cfg.model.dropout = j["dropout"].get<double>();
  if (j.contains("batch_size")) cfg.train_cfg.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("l2")) cfg.train_cfg.l2 = j["l2"].get<double>();
  if (j.contains("lr")) cfg.train_cfg.lr = j["lr"].get<double>();
  if (j.contains("patience")) cfg.train_cfg.patience = j["patience"].get<int>();
  if (j.contains("max_epochs")) cfg.train_cfg.max_epochs = j["max_epochs"].get<int>();
  if (j.contains("seed")) cfg.train_cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("train")) cfg.train_path = j["train"].get<std::string>();
  if (j.contains("valid")) cfg.valid_path = j["valid"].get<std::string>();
  if (j.contains("test")) cfg.test_path = j["test"].get<std::string>();
  if (j.contains("embeddings")) cfg.embeddings_path = j["embeddings"].get<std::string>();
  if (j.contains("checkpoint")) cfg.checkpoint_path = j["checkpoint"].get<std::string>();
  if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("format")) cfg.format = j["format"].get<std::string>();
  if (j.contains("precision")) cfg.precision = j["precision"].get<std::string>();
}

void apply_overrides(RunConfig& cfg, const RunOverrides& o) {
  if (o.num_labels) {
    if (*o.num_labels == 2) {
      cfg.model.labels = {"neutral", "entails"};
    } else if (*o.num_labels == 3) {
      cfg.model.labels = {"neutral", "entailment", "contradiction"};
    } else {
      throw ConfigError("num_labels must be 2 or 3");
    }
  }
  if (o.embed_dim) cfg.model.embed_dim = *o.embed_dim;
  if (o.hidden) cfg.model.hidden = *o.hidden;
  if (o.mlp_hidden) cfg.model.mlp_hidden = *o.mlp_hidden;
  if (o.turns) cfg.model.turns = *o.turns;
  if (o.variant) cfg.model.variant = parse_variant(*o.variant);
  if (o.dropout) cfg.model.dropout = *o.dropout;
  if (o.batch_size) cfg.train_cfg.batch_size = *o.batch_size;
  if (o.l2) cfg.train_cfg.l2 = *o.l2;
  if (o.lr) cfg.train_cfg.lr = *o.lr;
  if (o.patience) cfg.train_cfg.patience = *o.patience;
  if (o.max_epochs) cfg.train_cfg.max_epochs = *o.max_epochs;
  if (o.seed) cfg.train_cfg.seed = *o.seed;
  if (o.train_path) cfg.train_path = *o.train_path;
  if (o.valid_path) cfg.valid_path = *o.valid_path;
  if (o.test_path) cfg.test_path = *o.test_path;
  if (o.embeddings_path) cfg.embeddings_path = *o.embeddings_path;
  if (o.checkpoint_path) cfg.checkpoint_path = *o.checkpoint_path;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.format) cfg.format = *o.format;
  if (o.precision) cfg.precision = *o.precision;
  if (o.ensemble_paths) cfg.ensemble_paths = *o.ensemble_paths;
}

}  // namespace

RunConfig resolve_run_config(const std::string& config_path, const RunOverrides& overrides) {
  RunConfig cfg;
  if (!config_path.empty()) apply_file(cfg, config_path);
  apply_overrides(cfg, overrides);
  validate_precision(cfg.precision);
  parse_data_format(cfg.format);
  cfg.model.validate();
  cfg.train_cfg.validate();
  return cfg;
}

}  // namespace mimn
