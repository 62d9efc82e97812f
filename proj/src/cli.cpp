#include "mimn/cli.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>

#include "mimn/trainer.hpp"
#include "mimn/verification.hpp"

namespace mimn {

using json = nlohmann::json;

namespace {

// Scale of the fixed random embedding table used when no embedding file is
// configured (toy runs). Uniform entries this size give small-width tables
// self-similarity scores comparable to pretrained 300-D vectors, which the
// alignment layer needs to tell identical tokens from different ones.
constexpr double kRandomEmbedScale = 2.0;

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string(what) + " path not set");
  if (!std::filesystem::exists(path)) {
    throw ConfigError(std::string(what) + " path does not exist: " + path);
  }
}

json eval_to_json(const EvalResult& res, const std::vector<std::string>& labels) {
  json per_label = json::object();
  for (size_t c = 0; c < labels.size(); ++c) {
    per_label[labels[c]] = {{"accuracy", res.per_label_accuracy[c]},
                            {"correct", res.per_label_correct[c]},
                            {"total", res.per_label_total[c]}};
  }
  return json{{"accuracy", res.accuracy},
              {"correct", res.correct},
              {"total", res.total},
              {"per_label", per_label}};
}

struct LoadedData {
  Vocabulary vocab;
  std::vector<Example> train, valid;
};

template <typename S>
int run_train(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.train_path, "train data");
  require_file(cfg.valid_path, "valid data");
  const DataFormat format = parse_data_format(cfg.format);

  LoadedData data;
  data.train = to_examples(load_raw_dataset(cfg.train_path, format), data.vocab, cfg.model.labels,
                           /*grow_vocab=*/true);
  data.valid = to_examples(load_raw_dataset(cfg.valid_path, format), data.vocab, cfg.model.labels,
                           /*grow_vocab=*/false);

  ModelParams<S> params = init_params<S>(cfg.model, data.vocab.size(), cfg.train_cfg.seed);
  EmbeddingReport emb_report;
  if (!cfg.embeddings_path.empty()) {
    require_file(cfg.embeddings_path, "embeddings");
    params.embedding->value = load_embeddings<S>(cfg.embeddings_path, data.vocab, cfg.model.embed_dim,
                                                 cfg.train_cfg.seed + 101, &emb_report);
  } else {
    params.embedding->value =
        random_embeddings<S>(data.vocab, cfg.model.embed_dim, cfg.train_cfg.seed + 101, kRandomEmbedScale);
  }

  TrainResult result = train(params, cfg.model, data.train, data.valid, cfg.train_cfg);

  std::filesystem::create_directories(cfg.out_dir);
  const std::string ckpt_path =
      cfg.checkpoint_path.empty() ? cfg.out_dir + "/checkpoint.mimn" : cfg.checkpoint_path;
  save_checkpoint(params, cfg.model, data.vocab, ckpt_path);

  json history = json::array();
  for (const EpochRecord& rec : result.history) {
    history.push_back({{"epoch", rec.epoch},
                       {"train_loss", rec.train_loss},
                       {"valid_accuracy", rec.valid_accuracy}});
  }
  json report{{"config", config_to_json(cfg.model)},
              {"train_config",
               {{"batch_size", cfg.train_cfg.batch_size},
                {"l2", cfg.train_cfg.l2},
                {"lr", cfg.train_cfg.lr},
                {"patience", cfg.train_cfg.patience},
                {"max_epochs", cfg.train_cfg.max_epochs},
                {"seed", cfg.train_cfg.seed},
                {"precision", cfg.precision}}},
              {"vocab_size", data.vocab.size()},
              {"oov", emb_report.oov},
              {"history", history},
              {"best_epoch", result.best_epoch},
              {"best_valid_accuracy", result.best_valid_accuracy},
              {"checkpoint", ckpt_path}};
  const std::string history_path = cfg.out_dir + "/history.json";
  std::ofstream hist_out(history_path);
  hist_out << report.dump(2) << "\n";

  out << json{{"best_epoch", result.best_epoch},
              {"best_valid_accuracy", result.best_valid_accuracy},
              {"epochs_run", result.history.size()},
              {"checkpoint", ckpt_path},
              {"history", history_path}}
             .dump()
      << "\n";
  return kExitOk;
}

template <typename S>
int run_eval(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.test_path, "eval data");
  std::vector<std::string> paths = cfg.ensemble_paths;
  if (paths.empty()) {
    require_file(cfg.checkpoint_path, "checkpoint");
    paths = {cfg.checkpoint_path};
  }
  std::vector<Checkpoint<S>> members;
  members.reserve(paths.size());
  for (const std::string& p : paths) {
    require_file(p, "checkpoint");
    members.push_back(load_checkpoint<S>(p));
  }

  const DataFormat format = parse_data_format(cfg.format);
  std::vector<Example> examples = to_examples(load_raw_dataset(cfg.test_path, format), members[0].vocab,
                                              members[0].config.labels, /*grow_vocab=*/false);
  EvalResult res = ensemble_eval(members, examples);
  json report = eval_to_json(res, members[0].config.labels);
  report["members"] = paths.size();
  out << report.dump() << "\n";
  return kExitOk;
}

template <typename S>
int run_predict(const RunConfig& cfg, const std::string& premise, const std::string& hypothesis,
                std::ostream& out) {
  require_file(cfg.checkpoint_path, "checkpoint");
  Checkpoint<S> ckpt = load_checkpoint<S>(cfg.checkpoint_path);

  Example ex;
  for (const std::string& t : tokenize(premise)) ex.premise.push_back(ckpt.vocab.lookup(t));
  for (const std::string& t : tokenize(hypothesis)) ex.hypothesis.push_back(ckpt.vocab.lookup(t));
  if (ex.premise.empty() || ex.hypothesis.empty()) {
    throw ConfigError("empty input sentence after tokenization");
  }

  Array<S> probs;
  const int pred = predict_label(ckpt.params, ckpt.config, ex, &probs);
  json dist = json::object();
  json plist = json::array();
  for (size_t c = 0; c < ckpt.config.labels.size(); ++c) {
    dist[ckpt.config.labels[c]] = static_cast<double>(probs[static_cast<Index>(c)]);
    plist.push_back(static_cast<double>(probs[static_cast<Index>(c)]));
  }
  out << json{{"label", ckpt.config.labels[static_cast<size_t>(pred)]},
              {"labels", ckpt.config.labels},
              {"probs", plist},
              {"distribution", dist}}
             .dump()
      << "\n";
  return kExitOk;
}

}  // namespace

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  return cfg.precision == "f64" ? run_train<double>(cfg, out) : run_train<float>(cfg, out);
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  return cfg.precision == "f64" ? run_eval<double>(cfg, out) : run_eval<float>(cfg, out);
}

int cmd_predict(const RunConfig& cfg, const std::string& premise, const std::string& hypothesis,
                std::ostream& out) {
  return cfg.precision == "f64" ? run_predict<double>(cfg, premise, hypothesis, out)
                                : run_predict<float>(cfg, premise, hypothesis, out);
}

int cmd_gradcheck(const RunConfig& cfg, std::optional<std::uint64_t> seed, double tolerance,
                  bool corrupt, std::ostream& out) {
  GradCheckOptions opts;
  opts.seed = seed.value_or(kDefaultGradcheckSeed);
  opts.tolerance = tolerance;
  opts.corrupt_backward = corrupt;

  ModelConfig cfg_tiny = verification_config(cfg.model.variant);
  GradCheckReport report = gradcheck(cfg_tiny, opts);

  json tensors = json::array();
  for (const TensorCheck& t : report.tensors) {
    tensors.push_back({{"name", t.name},
                       {"components_checked", t.components_checked},
                       {"max_rel_err", t.max_rel_err},
                       {"max_abs_err", t.max_abs_err},
                       {"pass", t.pass}});
  }
  out << json{{"variant", variant_name(cfg_tiny.variant)},
              {"pass", report.pass},
              {"tolerance", report.tolerance},
              {"seed", opts.seed},
              {"worst_tensor", report.worst_tensor},
              {"worst_rel_err", report.worst_rel_err},
              {"tensors", tensors}}
             .dump()
      << "\n";
  return report.pass ? kExitOk : kExitFailure;
}

int cmd_params(const RunConfig& cfg, std::ostream& out) {
  ParamCountReport report = count_params(cfg.model);
  json tensors = json::array();
  for (const ParamCount& t : report.per_tensor) {
    tensors.push_back({{"name", t.name}, {"shape", t.shape}, {"count", t.count}});
  }
  out << json{{"variant", variant_name(cfg.model.variant)},
              {"total", report.total},
              {"millions", static_cast<double>(report.total) / 1e6},
              {"per_tensor", tensors}}
             .dump()
      << "\n";
  return kExitOk;
}

int cmd_gen_toy(const RunConfig& cfg, std::size_t size, std::ostream& out) {
  ToyCorpus corpus = generate_toy_corpus(cfg.train_cfg.seed, size);
  std::filesystem::create_directories(cfg.out_dir);
  const std::string train_path = cfg.out_dir + "/toy_train.jsonl";
  const std::string valid_path = cfg.out_dir + "/toy_valid.jsonl";
  const std::string test_path = cfg.out_dir + "/toy_test.jsonl";
  write_unified_jsonl(train_path, corpus.train);
  write_unified_jsonl(valid_path, corpus.valid);
  write_unified_jsonl(test_path, corpus.test);
  out << json{{"train", corpus.train.size()},
              {"valid", corpus.valid.size()},
              {"test", corpus.test.size()},
              {"paths", {{"train", train_path}, {"valid", valid_path}, {"test", test_path}}}}
             .dump()
      << "\n";
  return kExitOk;
}

int run_guarded(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DegenerateInputError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace mimn
