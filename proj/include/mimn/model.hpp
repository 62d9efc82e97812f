#pragma once

// The matching network end-to-end: encode -> align -> match -> multi-turn
// inference -> classify, plus the published ablation variants.
//
// Stage functions are exposed individually so tests and oracles can compare
// intermediates; forward() wires them together for one premise/hypothesis
// pair.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "mimn/data.hpp"
#include "mimn/nn.hpp"
#include "mimn/tensor.hpp"

namespace mimn {

enum class Variant { kFull, kNoMemory, kGateRelu, kMixedSingleTurn };

inline std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoMemory: return "no_memory";
    case Variant::kGateRelu: return "gate_relu";
    case Variant::kMixedSingleTurn: return "mixed_single_turn";
  }
  return "full";
}

inline Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::kFull;
  if (name == "no_memory") return Variant::kNoMemory;
  if (name == "gate_relu") return Variant::kGateRelu;
  if (name == "mixed_single_turn") return Variant::kMixedSingleTurn;
  throw ConfigError("unknown variant: " + name);
}

constexpr int kNumViews = 3;  // joint, difference, similarity

struct ModelConfig {
  Index embed_dim = 300;  // r
  Index hidden = 300;     // d
  int turns = 3;
  Variant variant = Variant::kFull;
  Index mlp_hidden = 300;
  double dropout = 0.2;
  std::vector<std::string> labels = {"neutral", "entailment", "contradiction"};

  Index num_labels() const { return static_cast<Index>(labels.size()); }

  // width of the per-token inference output
  Index infer_width() const {
    return variant == Variant::kNoMemory ? 6 * hidden : 2 * hidden;
  }

  void validate() const {
    if (embed_dim < 1 || hidden < 1 || mlp_hidden < 1) {
      throw ConfigError("model dimensions must be positive");
    }
    if (turns < 1) throw ConfigError("turns must be >= 1");
    if (variant != Variant::kMixedSingleTurn && turns != kNumViews) {
      throw ConfigError("variant " + variant_name(variant) + " requires turns = " +
                        std::to_string(kNumViews));
    }
    if (labels.size() != 2 && labels.size() != 3) {
      throw ConfigError("label set must have 2 or 3 entries");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  }

  bool operator==(const ModelConfig& o) const {
    return embed_dim == o.embed_dim && hidden == o.hidden && turns == o.turns &&
           variant == o.variant && mlp_hidden == o.mlp_hidden && dropout == o.dropout &&
           labels == o.labels;
  }
};

enum class ParamInit { kGlorot, kZeros, kLstmBias, kEmbedding };

struct ParamSpec {
  std::string name;
  std::vector<Index> shape;
  bool trainable = true;
  ParamInit init = ParamInit::kGlorot;
};

// Single source of truth for every weight tensor's name and shape, in
// checkpoint order. The embedding row count depends on the vocabulary.
inline std::vector<ParamSpec> declare_param_shapes(const ModelConfig& cfg, Index vocab_size) {
  cfg.validate();
  const Index d = cfg.hidden, r = cfg.embed_dim;
  std::vector<ParamSpec> specs;
  specs.push_back({"embedding", {vocab_size, r}, false, ParamInit::kEmbedding});

  auto lstm = [&](const std::string& prefix, Index in) {
    specs.push_back({prefix + ".w_ih", {4 * d, in}, true, ParamInit::kGlorot});
    specs.push_back({prefix + ".w_hh", {4 * d, d}, true, ParamInit::kGlorot});
    specs.push_back({prefix + ".bias", {4 * d}, true, ParamInit::kLstmBias});
  };
  lstm("enc_fwd", r);
  lstm("enc_bwd", r);

  specs.push_back({"match_joint.weight", {d, 4 * d}, true, ParamInit::kGlorot});
  specs.push_back({"match_joint.bias", {d}, true, ParamInit::kZeros});
  specs.push_back({"match_diff.weight", {d, 2 * d}, true, ParamInit::kGlorot});
  specs.push_back({"match_diff.bias", {d}, true, ParamInit::kZeros});
  specs.push_back({"match_sim.weight", {d, 2 * d}, true, ParamInit::kGlorot});
  specs.push_back({"match_sim.bias", {d}, true, ParamInit::kZeros});

  const Index reduce_in = cfg.variant == Variant::kNoMemory ? d : 3 * d;
  specs.push_back({"infer_reduce.weight", {d, reduce_in}, true, ParamInit::kGlorot});
  lstm("inf_fwd", d);
  lstm("inf_bwd", d);

  if (cfg.variant == Variant::kFull) {
    specs.push_back({"gate.weight", {2 * d, 4 * d}, true, ParamInit::kGlorot});
    specs.push_back({"gate.bias", {2 * d}, true, ParamInit::kZeros});
  } else if (cfg.variant == Variant::kGateRelu) {
    specs.push_back({"memory_relu.weight", {2 * d, 4 * d}, true, ParamInit::kGlorot});
  }

  specs.push_back({"mlp_hidden.weight", {cfg.mlp_hidden, 4 * cfg.infer_width()}, true, ParamInit::kGlorot});
  specs.push_back({"mlp_hidden.bias", {cfg.mlp_hidden}, true, ParamInit::kZeros});
  specs.push_back({"mlp_out.weight", {cfg.num_labels(), cfg.mlp_hidden}, true, ParamInit::kGlorot});
  specs.push_back({"mlp_out.bias", {cfg.num_labels()}, true, ParamInit::kZeros});
  return specs;
}

template <typename S>
struct ModelParams {
  ParameterSet<S> set;

  Parameter<S>* embedding = nullptr;
  nn::LstmParams<S> enc_fwd, enc_bwd;
  nn::DenseParams<S> match_joint, match_diff, match_sim;
  Parameter<S>* infer_reduce = nullptr;
  nn::LstmParams<S> inf_fwd, inf_bwd;
  nn::DenseParams<S> gate;          // full variant
  Parameter<S>* memory_relu = nullptr;  // gate_relu variant
  nn::DenseParams<S> mlp_hidden, mlp_out;

  void wire(Variant variant) {
    embedding = &set.at("embedding");
    auto lstm = [&](const std::string& prefix) {
      nn::LstmParams<S> p;
      p.w_ih = &set.at(prefix + ".w_ih");
      p.w_hh = &set.at(prefix + ".w_hh");
      p.bias = &set.at(prefix + ".bias");
      return p;
    };
    enc_fwd = lstm("enc_fwd");
    enc_bwd = lstm("enc_bwd");
    inf_fwd = lstm("inf_fwd");
    inf_bwd = lstm("inf_bwd");
    auto dense_p = [&](const std::string& prefix, nn::Act act) {
      nn::DenseParams<S> p;
      p.weight = &set.at(prefix + ".weight");
      p.bias = &set.at(prefix + ".bias");
      p.activation = act;
      return p;
    };
    match_joint = dense_p("match_joint", nn::Act::kRelu);
    match_diff = dense_p("match_diff", nn::Act::kRelu);
    match_sim = dense_p("match_sim", nn::Act::kRelu);
    infer_reduce = &set.at("infer_reduce.weight");
    if (variant == Variant::kFull) gate = dense_p("gate", nn::Act::kSigmoid);
    if (variant == Variant::kGateRelu) memory_relu = &set.at("memory_relu.weight");
    mlp_hidden = dense_p("mlp_hidden", nn::Act::kTanh);
    mlp_out = dense_p("mlp_out", nn::Act::kLinear);
  }
};

// Allocate and initialize all parameters. The embedding table starts zeroed;
// the caller fills it from a file or a random table and it stays frozen.
template <typename S>
ModelParams<S> init_params(const ModelConfig& cfg, Index vocab_size, std::uint64_t seed) {
  Rng rng(seed);
  ModelParams<S> params;
  for (const ParamSpec& spec : declare_param_shapes(cfg, vocab_size)) {
    Array<S> value(spec.shape);
    switch (spec.init) {
      case ParamInit::kGlorot: nn::glorot_init(value, rng); break;
      case ParamInit::kLstmBias: nn::lstm_bias_init(value); break;
      case ParamInit::kZeros:
      case ParamInit::kEmbedding: break;
    }
    params.set.add(spec.name, std::move(value), spec.trainable);
  }
  params.wire(cfg.variant);
  return params;
}

struct SentenceInput {
  std::vector<int> ids;
  std::vector<uint8_t> mask;

  static SentenceInput dense(const std::vector<int>& ids) {
    return {ids, std::vector<uint8_t>(ids.size(), 1)};
  }
};

// Optional record of named intermediates, for oracles and identity tests.
template <typename S>
struct ForwardTrace {
  Array<S> scores;  // alignment score matrix [l_p x l_q]
  Array<S> aligned_p, aligned_q;
  std::array<Array<S>, kNumViews> views_p, views_q;
  std::vector<Array<S>> turn_c_p, turn_m_p;  // per-turn inference / memory states
  std::vector<Array<S>> turn_c_q, turn_m_q;
  Array<S> pooled;
  Array<S> logits;
};

// Context vectors for one sentence: dropout on the embedded tokens, then the
// shared bidirectional encoder; masked rows are zero.
template <typename S>
Tensor<S> encode(Graph<S>& g, Tensor<S> embedded, const std::vector<uint8_t>& mask,
                 ModelParams<S>& params, const ModelConfig& cfg, bool training, Rng* rng) {
  Tensor<S> x = nn::dropout(g, embedded, cfg.dropout, training, rng);
  return nn::bilstm(g, x, mask, params.enc_fwd, params.enc_bwd);
}

template <typename S>
struct AlignResult {
  Tensor<S> aligned_p;  // attention summary of the hypothesis per premise token
  Tensor<S> aligned_q;  // attention summary of the premise per hypothesis token
  Tensor<S> scores;     // raw dot-product score matrix
};

// Dot-product soft alignment between the two context sequences. Masked
// target positions receive exactly zero weight.
template <typename S>
AlignResult<S> align(Graph<S>& g, Tensor<S> p_ctx, Tensor<S> q_ctx,
                     const std::vector<uint8_t>& p_mask, const std::vector<uint8_t>& q_mask) {
  Tensor<S> scores = g.matmul(p_ctx, g.transpose(q_ctx));
  Tensor<S> p_weights = g.softmax_rows_masked(scores, q_mask);
  Tensor<S> q_weights = g.softmax_rows_masked(g.transpose(scores), p_mask);
  return {g.matmul(p_weights, q_ctx), g.matmul(q_weights, p_ctx), scores};
}

// The three matching views of a sentence, in fixed order:
// joint [ctx ; aligned], difference (ctx - aligned), similarity (ctx * aligned).
template <typename S>
std::array<Tensor<S>, kNumViews> match_views(Graph<S>& g, Tensor<S> ctx, Tensor<S> aligned,
                                             ModelParams<S>& params) {
  Tensor<S> joint = nn::dense(g, g.concat({ctx, aligned}, 1), params.match_joint);
  Tensor<S> diff = nn::dense(g, g.sub(ctx, aligned), params.match_diff);
  Tensor<S> sim = nn::dense(g, g.mul(ctx, aligned), params.match_sim);
  return {joint, diff, sim};
}

// Aggregate the matching views turn by turn. Output width is 2d for the
// memory variants and the single-turn baseline, 6d for no_memory.
template <typename S>
Tensor<S> multi_turn_infer(Graph<S>& g, const std::array<Tensor<S>, kNumViews>& views,
                           const std::vector<uint8_t>& mask, ModelParams<S>& params,
                           const ModelConfig& cfg, bool training, Rng* rng,
                           std::vector<Array<S>>* turn_c = nullptr,
                           std::vector<Array<S>>* turn_m = nullptr) {
  cfg.validate();
  const Index l = views[0].shape()[0];
  const Index d = cfg.hidden;
  Tensor<S> w_inf = g.param(*params.infer_reduce);

  auto run_inf_bilstm = [&](Tensor<S> reduced) {
    Tensor<S> x = nn::dropout(g, reduced, cfg.dropout, training, rng);
    return nn::bilstm(g, x, mask, params.inf_fwd, params.inf_bwd);
  };

  switch (cfg.variant) {
    case Variant::kNoMemory: {
      std::vector<Tensor<S>> outs;
      for (int k = 0; k < kNumViews; ++k) {
        Tensor<S> c = run_inf_bilstm(g.matmul(views[static_cast<size_t>(k)], g.transpose(w_inf)));
        if (turn_c) turn_c->push_back(c.value());
        outs.push_back(c);
      }
      return g.concat(outs, 1);
    }
    case Variant::kMixedSingleTurn: {
      Tensor<S> mixed = g.concat({views[0], views[1], views[2]}, 1);
      Tensor<S> c = run_inf_bilstm(g.matmul(mixed, g.transpose(w_inf)));
      if (turn_c) turn_c->push_back(c.value());
      return c;
    }
    case Variant::kFull:
    case Variant::kGateRelu: {
      Tensor<S> memory = g.constant(Array<S>({l, 2 * d}));  // all turns start from zero memory
      for (int k = 0; k < kNumViews; ++k) {
        Tensor<S> turn_in = g.concat({views[static_cast<size_t>(k)], memory}, 1);
        Tensor<S> c = run_inf_bilstm(g.matmul(turn_in, g.transpose(w_inf)));
        Tensor<S> update_in = g.concat({c, memory}, 1);
        if (cfg.variant == Variant::kFull) {
          Tensor<S> gate = nn::dense(g, update_in, params.gate);
          Tensor<S> ones = g.constant(Array<S>::full({l, 2 * d}, S(1)));
          memory = g.add(g.mul(gate, c), g.mul(g.sub(ones, gate), memory));
        } else {
          memory = g.relu(g.matmul(update_in, g.transpose(g.param(*params.memory_relu))));
        }
        if (turn_c) turn_c->push_back(c.value());
        if (turn_m) turn_m->push_back(memory.value());
      }
      return memory;
    }
  }
  throw ContractError("unreachable variant");
}

// Pool both sentences (masked max then mean, premise then hypothesis) and
// run the tanh MLP head; returns unnormalized label scores.
template <typename S>
Tensor<S> classify(Graph<S>& g, Tensor<S> infer_p, Tensor<S> infer_q,
                   const std::vector<uint8_t>& p_mask, const std::vector<uint8_t>& q_mask,
                   ModelParams<S>& params, const ModelConfig& cfg, bool training, Rng* rng,
                   Array<S>* pooled_out = nullptr) {
  Tensor<S> pooled = g.concat({g.reduce_max(infer_p, p_mask), g.reduce_mean(infer_p, p_mask),
                               g.reduce_max(infer_q, q_mask), g.reduce_mean(infer_q, q_mask)},
                              0);
  if (pooled_out) *pooled_out = pooled.value();
  Tensor<S> x = nn::dropout(g, pooled, cfg.dropout, training, rng);
  Tensor<S> hidden = nn::dense(g, x, params.mlp_hidden);
  return nn::dense(g, hidden, params.mlp_out);
}

template <typename S>
struct ForwardOut {
  Tensor<S> probs;
  Tensor<S> logits;
  int predicted = 0;  // argmax, first index on ties
};

template <typename S>
ForwardOut<S> forward(Graph<S>& g, const SentenceInput& premise, const SentenceInput& hypothesis,
                      ModelParams<S>& params, const ModelConfig& cfg, bool training, Rng* rng,
                      ForwardTrace<S>* trace = nullptr) {
  if (premise.ids.empty() || hypothesis.ids.empty()) {
    throw DegenerateInputError("forward: empty sentence");
  }
  Tensor<S> p_emb = g.constant(embed_tokens(params.embedding->value, premise.ids));
  Tensor<S> q_emb = g.constant(embed_tokens(params.embedding->value, hypothesis.ids));

  Tensor<S> p_ctx = encode(g, p_emb, premise.mask, params, cfg, training, rng);
  Tensor<S> q_ctx = encode(g, q_emb, hypothesis.mask, params, cfg, training, rng);

  AlignResult<S> al = align(g, p_ctx, q_ctx, premise.mask, hypothesis.mask);

  std::array<Tensor<S>, kNumViews> up = match_views(g, p_ctx, al.aligned_p, params);
  std::array<Tensor<S>, kNumViews> uq = match_views(g, q_ctx, al.aligned_q, params);

  std::vector<Array<S>>*tcp = nullptr, *tmp = nullptr, *tcq = nullptr, *tmq = nullptr;
  if (trace) {
    trace->scores = al.scores.value();
    trace->aligned_p = al.aligned_p.value();
    trace->aligned_q = al.aligned_q.value();
    for (int k = 0; k < kNumViews; ++k) {
      trace->views_p[static_cast<size_t>(k)] = up[static_cast<size_t>(k)].value();
      trace->views_q[static_cast<size_t>(k)] = uq[static_cast<size_t>(k)].value();
    }
    tcp = &trace->turn_c_p;
    tmp = &trace->turn_m_p;
    tcq = &trace->turn_c_q;
    tmq = &trace->turn_m_q;
  }

  Tensor<S> infer_p = multi_turn_infer(g, up, premise.mask, params, cfg, training, rng, tcp, tmp);
  Tensor<S> infer_q = multi_turn_infer(g, uq, hypothesis.mask, params, cfg, training, rng, tcq, tmq);

  Array<S>* pooled_out = trace ? &trace->pooled : nullptr;
  Tensor<S> logits = classify(g, infer_p, infer_q, premise.mask, hypothesis.mask, params, cfg,
                              training, rng, pooled_out);
  if (trace) trace->logits = logits.value();

  const std::vector<uint8_t> all(static_cast<size_t>(cfg.num_labels()), 1);
  Tensor<S> probs = g.softmax_masked(logits, all);
  return {probs, logits, static_cast<int>(argmax(probs.value()))};
}

// Negative log-likelihood of the gold label under a probability vector.
template <typename S>
Tensor<S> cross_entropy(Graph<S>& g, Tensor<S> probs, int gold) {
  if (gold < 0 || gold >= probs.shape()[0]) {
    throw ContractError("cross_entropy: gold label " + std::to_string(gold) +
                        " outside label set of size " + std::to_string(probs.shape()[0]));
  }
  return g.scale(g.log(g.pick(probs, gold)), S(-1));
}

}  // namespace mimn
