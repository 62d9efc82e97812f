#pragma once

// Optimization loop: Adam, L2 regularization, early stopping on validation
// accuracy, evaluation, probability-averaging ensembles, and binary
// checkpoints.

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mimn/data.hpp"
#include "mimn/model.hpp"

namespace mimn {

struct TrainConfig {
  size_t batch_size = 32;
  double l2 = 0.0003;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int patience = 10;
  int max_epochs = 100;
  std::uint64_t seed = 0;
  bool record_train_accuracy = false;  // adds a per-epoch pass over the train set

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (lr <= 0) throw ConfigError("learning rate must be positive");
    if (l2 < 0) throw ConfigError("l2 coefficient must be nonnegative");
  }
};

// ---- Adam ----

template <typename S>
struct AdamState {
  std::vector<Array<S>> m, v;  // aligned with ParameterSet order; empty for frozen tensors
  std::int64_t step = 0;
  double lr, beta1, beta2, epsilon;
};

template <typename S>
AdamState<S> init_adam(const ParameterSet<S>& params, const TrainConfig& cfg) {
  AdamState<S> state;
  state.lr = cfg.lr;
  state.beta1 = cfg.beta1;
  state.beta2 = cfg.beta2;
  state.epsilon = cfg.epsilon;
  state.m.resize(params.size());
  state.v.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    if (params[i].trainable) {
      state.m[i] = Array<S>(params[i].value.shape());
      state.v[i] = Array<S>(params[i].value.shape());
    }
  }
  return state;
}

// One bias-corrected update from the gradients currently held by the
// parameters. Frozen tensors (embeddings) are never touched.
template <typename S>
void adam_step(ParameterSet<S>& params, AdamState<S>& state) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t t = 0; t < params.size(); ++t) {
    Parameter<S>& p = params[t];
    if (!p.trainable) continue;
    Array<S>& m = state.m[t];
    Array<S>& v = state.v[t];
    for (Index i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * g;
      const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * g * g;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      const double update = state.lr * (mi / bc1) / (std::sqrt(vi / bc2) + state.epsilon);
      p.value[i] = static_cast<S>(static_cast<double>(p.value[i]) - update);
    }
  }
}

// batch_loss + l2 * sum of squared weight-matrix entries (biases and the
// frozen embedding table excluded). The penalty participates in the graph,
// so its gradient flows with everything else.
template <typename S>
Tensor<S> regularized_loss(Graph<S>& g, Tensor<S> batch_loss, ModelParams<S>& params, double l2) {
  if (l2 == 0.0) return batch_loss;
  std::vector<Tensor<S>> terms;
  for (size_t i = 0; i < params.set.size(); ++i) {
    Parameter<S>& p = params.set[i];
    if (!p.trainable || p.value.rank() != 2) continue;
    Tensor<S> w = g.param(p);
    terms.push_back(g.sum_all(g.mul(w, w)));
  }
  return g.add(batch_loss, g.scale(g.add_n(terms), static_cast<S>(l2)));
}

// ---- evaluation ----

struct EvalResult {
  double accuracy = 0.0;
  size_t correct = 0;
  size_t total = 0;
  std::vector<size_t> per_label_total;
  std::vector<size_t> per_label_correct;
  std::vector<double> per_label_accuracy;
};

template <typename S>
int predict_label(ModelParams<S>& params, const ModelConfig& cfg, const Example& ex,
                  Array<S>* probs_out = nullptr) {
  Graph<S> g;
  ForwardOut<S> out = forward(g, SentenceInput::dense(ex.premise), SentenceInput::dense(ex.hypothesis),
                              params, cfg, false, nullptr);
  if (probs_out) *probs_out = out.probs.value();
  return out.predicted;
}

template <typename S>
EvalResult evaluate(ModelParams<S>& params, const ModelConfig& cfg,
                    const std::vector<Example>& examples) {
  if (examples.empty()) throw ContractError("evaluate: empty example set");
  EvalResult res;
  const size_t n_labels = static_cast<size_t>(cfg.num_labels());
  res.per_label_total.assign(n_labels, 0);
  res.per_label_correct.assign(n_labels, 0);
  for (const Example& ex : examples) {
    const int pred = predict_label(params, cfg, ex);
    res.total += 1;
    res.per_label_total[static_cast<size_t>(ex.label)] += 1;
    if (pred == ex.label) {
      res.correct += 1;
      res.per_label_correct[static_cast<size_t>(ex.label)] += 1;
    }
  }
  res.accuracy = static_cast<double>(res.correct) / static_cast<double>(res.total);
  res.per_label_accuracy.assign(n_labels, 0.0);
  for (size_t c = 0; c < n_labels; ++c) {
    if (res.per_label_total[c] > 0) {
      res.per_label_accuracy[c] =
          static_cast<double>(res.per_label_correct[c]) / static_cast<double>(res.per_label_total[c]);
    }
  }
  return res;
}

// ---- checkpoints ----

template <typename S>
struct Checkpoint {
  ModelConfig config;
  Vocabulary vocab;
  ModelParams<S> params;
};

inline nlohmann::json config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"embed_dim", cfg.embed_dim}, {"hidden", cfg.hidden},
                        {"turns", cfg.turns},         {"variant", variant_name(cfg.variant)},
                        {"mlp_hidden", cfg.mlp_hidden}, {"dropout", cfg.dropout},
                        {"labels", cfg.labels}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.embed_dim = j.at("embed_dim").get<Index>();
  cfg.hidden = j.at("hidden").get<Index>();
  cfg.turns = j.at("turns").get<int>();
  cfg.variant = parse_variant(j.at("variant").get<std::string>());
  cfg.mlp_hidden = j.at("mlp_hidden").get<Index>();
  cfg.dropout = j.at("dropout").get<double>();
  cfg.labels = j.at("labels").get<std::vector<std::string>>();
  cfg.validate();
  return cfg;
}

inline constexpr char kCheckpointMagic[4] = {'M', 'I', 'M', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: magic "MIMN", u32 version, u32 header length, UTF-8 JSON header
// (config, vocab, tensor name/shape/offset table), then raw little-endian
// f32 payloads in table order.
template <typename S>
void save_checkpoint(const ModelParams<S>& params, const ModelConfig& cfg, const Vocabulary& vocab,
                     const std::string& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes little-endian");
  nlohmann::json header;
  header["config"] = config_to_json(cfg);
  header["vocab"] = vocab.tokens();
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (size_t i = 0; i < params.set.size(); ++i) {
    const Parameter<S>& p = params.set[i];
    table.push_back({{"name", p.name},
                     {"shape", p.value.shape()},
                     {"offset", offset},
                     {"trainable", p.trainable}});
    offset += static_cast<std::uint64_t>(p.value.size()) * sizeof(float);
  }
  header["tensors"] = std::move(table);
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 4);
  const std::uint32_t version = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint32_t header_len = static_cast<std::uint32_t>(header_str.size());
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  std::vector<float> buf;
  for (size_t i = 0; i < params.set.size(); ++i) {
    const Parameter<S>& p = params.set[i];
    buf.resize(static_cast<size_t>(p.value.size()));
    for (Index j = 0; j < p.value.size(); ++j) buf[static_cast<size_t>(j)] = static_cast<float>(p.value[j]);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw FormatError("failed writing checkpoint: " + path);
}

template <typename S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoint reader assumes little-endian");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw FormatError("bad checkpoint magic in " + path);
  }
  std::uint32_t version = 0, header_len = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) throw FormatError("truncated checkpoint header: " + path);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), header_len);
  if (!in) throw FormatError("truncated checkpoint header: " + path);
  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
  if (header.is_discarded()) throw FormatError("corrupt checkpoint header JSON: " + path);

  Checkpoint<S> ckpt;
  ckpt.config = config_from_json(header.at("config"));
  const auto tokens = header.at("vocab").get<std::vector<std::string>>();
  if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>") {
    throw FormatError("checkpoint vocabulary missing special tokens");
  }
  for (size_t i = 2; i < tokens.size(); ++i) ckpt.vocab.add(tokens[i]);

  ckpt.params = init_params<S>(ckpt.config, ckpt.vocab.size(), /*seed=*/0);

  const std::streampos payload_start = in.tellg();
  const nlohmann::json& table = header.at("tensors");
  if (table.size() != ckpt.params.set.size()) {
    throw FormatError("checkpoint tensor table has " + std::to_string(table.size()) +
                      " entries, expected " + std::to_string(ckpt.params.set.size()));
  }
  std::vector<float> buf;
  for (size_t i = 0; i < table.size(); ++i) {
    const nlohmann::json& entry = table[i];
    Parameter<S>& p = ckpt.params.set[i];
    if (entry.at("name").get<std::string>() != p.name ||
        entry.at("shape").get<std::vector<Index>>() != p.value.shape()) {
      throw FormatError("checkpoint shape table inconsistent at tensor " + p.name);
    }
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    in.seekg(payload_start + static_cast<std::streamoff>(offset));
    buf.resize(static_cast<size_t>(p.value.size()));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw FormatError("truncated checkpoint payload at tensor " + p.name);
    for (Index j = 0; j < p.value.size(); ++j) p.value[j] = static_cast<S>(buf[static_cast<size_t>(j)]);
  }
  return ckpt;
}

// ---- ensembles ----

// Averages the label distributions of the members for each example, then
// takes the argmax. Members must share config and vocabulary.
template <typename S>
EvalResult ensemble_eval(std::vector<Checkpoint<S>>& members, const std::vector<Example>& examples) {
  if (members.empty()) throw ContractError("ensemble_eval: no members");
  if (examples.empty()) throw ContractError("ensemble_eval: empty example set");
  for (size_t i = 1; i < members.size(); ++i) {
    if (!(members[i].config == members[0].config)) {
      throw ConfigError("ensemble members disagree on model config");
    }
    if (!(members[i].vocab == members[0].vocab)) {
      throw ConfigError("ensemble members disagree on vocabulary");
    }
  }
  const ModelConfig& cfg = members[0].config;
  EvalResult res;
  const size_t n_labels = static_cast<size_t>(cfg.num_labels());
  res.per_label_total.assign(n_labels, 0);
  res.per_label_correct.assign(n_labels, 0);
  for (const Example& ex : examples) {
    std::vector<double> mean(n_labels, 0.0);
    for (Checkpoint<S>& member : members) {
      Array<S> probs;
      predict_label(member.params, cfg, ex, &probs);
      for (size_t c = 0; c < n_labels; ++c) mean[c] += static_cast<double>(probs[static_cast<Index>(c)]);
    }
    int pred = 0;
    for (size_t c = 1; c < n_labels; ++c) {
      if (mean[c] > mean[static_cast<size_t>(pred)]) pred = static_cast<int>(c);
    }
    res.total += 1;
    res.per_label_total[static_cast<size_t>(ex.label)] += 1;
    if (pred == ex.label) {
      res.correct += 1;
      res.per_label_correct[static_cast<size_t>(ex.label)] += 1;
    }
  }
  res.accuracy = static_cast<double>(res.correct) / static_cast<double>(res.total);
  res.per_label_accuracy.assign(n_labels, 0.0);
  for (size_t c = 0; c < n_labels; ++c) {
    if (res.per_label_total[c] > 0) {
      res.per_label_accuracy[c] =
          static_cast<double>(res.per_label_correct[c]) / static_cast<double>(res.per_label_total[c]);
    }
  }
  return res;
}

// ---- training loop ----

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;      // mean data loss (before the L2 term)
  double valid_accuracy = 0.0;
  double train_accuracy = -1.0;  // only when record_train_accuracy is set
};

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_valid_accuracy = 0.0;
};

template <typename S>
TrainResult train(ModelParams<S>& params, const ModelConfig& cfg,
                  const std::vector<Example>& train_set, const std::vector<Example>& valid_set,
                  const TrainConfig& tcfg) {
  cfg.validate();
  tcfg.validate();
  if (train_set.empty() || valid_set.empty()) throw ContractError("train: empty train or valid set");

  AdamState<S> adam = init_adam(params.set, tcfg);
  Rng dropout_rng(tcfg.seed ^ 0x5bd1e995u);

  TrainResult result;
  std::vector<Array<S>> best = params.set.snapshot_values();
  double best_acc = -1.0;
  int since_best = 0;

  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const std::uint64_t shuffle_seed = tcfg.seed * 0x9e3779b9u + static_cast<std::uint64_t>(epoch);
    std::vector<Batch> batches = make_batches(train_set, tcfg.batch_size, shuffle_seed);
    double loss_sum = 0.0;

    for (size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& batch = batches[bi];
      Graph<S> g;
      std::vector<Tensor<S>> losses;
      losses.reserve(batch.size());
      for (size_t row = 0; row < batch.size(); ++row) {
        SentenceInput p{batch.premise[row], batch.premise_mask[row]};
        SentenceInput q{batch.hypothesis[row], batch.hypothesis_mask[row]};
        ForwardOut<S> out = forward(g, p, q, params, cfg, true, &dropout_rng);
        losses.push_back(cross_entropy(g, out.probs, batch.labels[row]));
      }
      Tensor<S> batch_loss = g.scale(g.add_n(losses), S(1) / static_cast<S>(batch.size()));
      Tensor<S> total = regularized_loss(g, batch_loss, params, tcfg.l2);
      const double total_value = static_cast<double>(total.value()[0]);
      if (!std::isfinite(total_value)) {
        throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                              std::to_string(bi));
      }
      params.set.zero_grads();
      g.backward(total);
      adam_step(params.set, adam);
      loss_sum += static_cast<double>(batch_loss.value()[0]) * static_cast<double>(batch.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.valid_accuracy = evaluate(params, cfg, valid_set).accuracy;
    if (tcfg.record_train_accuracy) rec.train_accuracy = evaluate(params, cfg, train_set).accuracy;
    result.history.push_back(rec);

    if (rec.valid_accuracy > best_acc) {
      best_acc = rec.valid_accuracy;
      best = params.set.snapshot_values();
      result.best_epoch = epoch;
      since_best = 0;
    } else {
      since_best += 1;
    }
    if (since_best >= tcfg.patience) break;
  }

  params.set.restore_values(best);
  result.best_valid_accuracy = best_acc;
  return result;
}

}  // namespace mimn
