#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "mimn/trainer.hpp"

using namespace mimn;

namespace {

struct ToySetup {
  Vocabulary vocab;
  std::vector<Example> train, valid, test;
  ModelConfig cfg;
};

ToySetup toy_setup(size_t corpus_size, std::uint64_t seed, Variant variant = Variant::kFull,
                   Index dim = 6) {
  ToySetup s;
  ToyCorpus corpus = generate_toy_corpus(seed, corpus_size);
  s.cfg.embed_dim = dim;
  s.cfg.hidden = dim;
  s.cfg.mlp_hidden = dim;
  s.cfg.variant = variant;
  s.cfg.dropout = 0.1;
  s.train = to_examples(corpus.train, s.vocab, s.cfg.labels, true);
  s.valid = to_examples(corpus.valid, s.vocab, s.cfg.labels, false);
  s.test = to_examples(corpus.test, s.vocab, s.cfg.labels, false);
  return s;
}

template <typename S>
ModelParams<S> toy_params(const ToySetup& s, std::uint64_t seed) {
  ModelParams<S> params = init_params<S>(s.cfg, s.vocab.size(), seed);
  params.embedding->value = random_embeddings<S>(s.vocab, s.cfg.embed_dim, seed + 17, 0.5);
  return params;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("adam with zero grads leaves parameters unchanged and advances the step") {
  ParameterSet<double> set;
  set.add("w", Array<double>({2}, {1.5, -0.5}));
  TrainConfig cfg;
  AdamState<double> state = init_adam(set, cfg);
  set.zero_grads();
  adam_step(set, state);
  CHECK(state.step == 1);
  CHECK(set.at("w").value[0] == 1.5);
  CHECK(set.at("w").value[1] == -0.5);
}

TEST_CASE("adam first step moves by about -lr * sign(g)") {
  ParameterSet<double> set;
  Parameter<double>& w = set.add("w", Array<double>({2}, {1.0, 1.0}));
  w.grad[0] = 0.37;
  w.grad[1] = -42.0;
  TrainConfig cfg;
  AdamState<double> state = init_adam(set, cfg);
  adam_step(set, state);
  CHECK(w.value[0] == doctest::Approx(1.0 - cfg.lr).epsilon(1e-4));
  CHECK(w.value[1] == doctest::Approx(1.0 + cfg.lr).epsilon(1e-4));
}

TEST_CASE("adam matches a hand-unrolled two-step scalar update") {
  TrainConfig cfg;
  cfg.lr = 0.01;
  ParameterSet<double> set;
  Parameter<double>& w = set.add("w", Array<double>({1}, {0.3}));
  AdamState<double> state = init_adam(set, cfg);

  const double g1 = 0.8, g2 = -0.2;
  w.grad[0] = g1;
  adam_step(set, state);
  w.grad[0] = g2;
  adam_step(set, state);

  // direct evaluation of the update formulas
  double m = 0, v = 0, x = 0.3;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? g1 : g2;
    m = cfg.beta1 * m + (1 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1 - cfg.beta2) * g * g;
    const double mh = m / (1 - std::pow(cfg.beta1, t));
    const double vh = v / (1 - std::pow(cfg.beta2, t));
    x -= cfg.lr * mh / (std::sqrt(vh) + cfg.epsilon);
  }
  CHECK(w.value[0] == doctest::Approx(x).epsilon(1e-12));
}

TEST_CASE("regularized loss adds the squared weight-matrix penalty") {
  ToySetup s = toy_setup(60, 3);
  ModelParams<double> params = toy_params<double>(s, 1);

  Graph<double> g;
  Tensor<double> base = g.constant(Array<double>({1}, {2.0}));
  Tensor<double> same = regularized_loss(g, base, params, 0.0);
  CHECK(same.id == base.id);

  double sq = 0.0;
  for (size_t i = 0; i < params.set.size(); ++i) {
    const Parameter<double>& p = params.set[i];
    if (!p.trainable || p.value.rank() != 2) continue;
    for (Index j = 0; j < p.value.size(); ++j) sq += p.value[j] * p.value[j];
  }
  Tensor<double> reg = regularized_loss(g, base, params, 0.0003);
  CHECK(reg.value()[0] == doctest::Approx(2.0 + 0.0003 * sq).epsilon(1e-12));
}

TEST_CASE("a single squared weight contributes 2 * coeff * w to the gradient") {
  ParameterSet<double> set;
  Parameter<double>& w = set.add("w", Array<double>({1, 1}, {2.0}));
  Graph<double> g;
  Tensor<double> t = g.param(w);
  Tensor<double> penalty = g.scale(g.sum_all(g.mul(t, t)), 0.0003);
  CHECK(penalty.value()[0] == doctest::Approx(0.0012).epsilon(1e-12));
  g.backward(penalty);
  CHECK(w.grad[0] == doctest::Approx(2 * 0.0003 * 2.0).epsilon(1e-12));

  // finite-difference confirmation
  const double h = 1e-6;
  auto eval = [&](double x) { return 0.0003 * x * x; };
  CHECK(w.grad[0] == doctest::Approx((eval(2.0 + h) - eval(2.0 - h)) / (2 * h)).epsilon(1e-6));
}

TEST_CASE("loss on a fixed batch strictly decreases over the first five steps") {
  ToySetup s = toy_setup(60, 5);
  s.cfg.dropout = 0.0;
  ModelParams<double> params = toy_params<double>(s, 2);
  TrainConfig tcfg;  // lr 5e-4
  AdamState<double> adam = init_adam(params.set, tcfg);
  std::vector<Batch> batches = make_batches(s.train, 16, 9);
  const Batch& batch = batches[0];

  double prev = std::numeric_limits<double>::infinity();
  for (int step = 0; step < 5; ++step) {
    Graph<double> g;
    std::vector<Tensor<double>> losses;
    for (size_t row = 0; row < batch.size(); ++row) {
      SentenceInput p{batch.premise[row], batch.premise_mask[row]};
      SentenceInput q{batch.hypothesis[row], batch.hypothesis_mask[row]};
      ForwardOut<double> out = forward(g, p, q, params, s.cfg, false, nullptr);
      losses.push_back(cross_entropy(g, out.probs, batch.labels[row]));
    }
    Tensor<double> batch_loss = g.scale(g.add_n(losses), 1.0 / static_cast<double>(batch.size()));
    Tensor<double> total = regularized_loss(g, batch_loss, params, tcfg.l2);
    CHECK(total.value()[0] < prev);
    prev = total.value()[0];
    params.set.zero_grads();
    g.backward(total);
    adam_step(params.set, adam);
  }
}

TEST_CASE("early stopping halts once patience is exhausted") {
  ToySetup s = toy_setup(40, 7);
  s.cfg.dropout = 0.0;
  ModelParams<float> params = toy_params<float>(s, 3);
  TrainConfig tcfg;
  tcfg.lr = 1e-12;  // effectively frozen: validation accuracy can never improve
  tcfg.patience = 1;
  tcfg.max_epochs = 30;
  tcfg.seed = 4;
  TrainResult res = train(params, s.cfg, s.train, s.valid, tcfg);
  CHECK(res.history.size() == 2);  // epoch 1 sets the best, epoch 2 exhausts patience
  CHECK(res.best_epoch == 1);
}

TEST_CASE("training is deterministic and never returns a sub-best checkpoint") {
  ToySetup s = toy_setup(60, 9);
  TrainConfig tcfg;
  tcfg.max_epochs = 3;
  tcfg.batch_size = 16;
  tcfg.lr = 2e-3;
  tcfg.seed = 11;

  ModelParams<float> p1 = toy_params<float>(s, 5);
  TrainResult r1 = train(p1, s.cfg, s.train, s.valid, tcfg);
  ModelParams<float> p2 = toy_params<float>(s, 5);
  TrainResult r2 = train(p2, s.cfg, s.train, s.valid, tcfg);

  REQUIRE(r1.history.size() == r2.history.size());
  for (size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].train_loss == r2.history[i].train_loss);  // bit-identical
    CHECK(r1.history[i].valid_accuracy == r2.history[i].valid_accuracy);
  }

  double best = 0;
  for (const EpochRecord& rec : r1.history) best = std::max(best, rec.valid_accuracy);
  CHECK(r1.best_valid_accuracy == best);
  // restored parameters reproduce the best observed validation accuracy
  CHECK(evaluate(p1, s.cfg, s.valid).accuracy == best);

  // trained parameter sets are byte-identical across the two runs
  for (size_t t = 0; t < p1.set.size(); ++t) {
    CHECK(std::memcmp(p1.set[t].value.data(), p2.set[t].value.data(),
                      sizeof(float) * static_cast<size_t>(p1.set[t].value.size())) == 0);
  }
}

TEST_CASE("the embedding table is byte-identical before and after training") {
  ToySetup s = toy_setup(60, 13);
  ModelParams<float> params = toy_params<float>(s, 7);
  std::vector<float> before(params.embedding->value.data(),
                            params.embedding->value.data() + params.embedding->value.size());
  TrainConfig tcfg;
  tcfg.max_epochs = 2;
  tcfg.batch_size = 16;
  TrainResult res = train(params, s.cfg, s.train, s.valid, tcfg);
  (void)res;
  CHECK(std::memcmp(before.data(), params.embedding->value.data(), before.size() * sizeof(float)) == 0);
}

TEST_CASE("training aborts with a diagnostic on divergence") {
  ToySetup s = toy_setup(40, 15);
  ModelParams<float> params = toy_params<float>(s, 9);
  TrainConfig tcfg;
  tcfg.lr = 1e18;  // guaranteed to overflow within an epoch
  tcfg.max_epochs = 3;
  try {
    train(params, s.cfg, s.train, s.valid, tcfg);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
  }
}

TEST_CASE("evaluate accuracy identities") {
  ToySetup s = toy_setup(90, 17);
  ModelParams<float> params = toy_params<float>(s, 11);
  EvalResult res = evaluate(params, s.cfg, s.test);
  CHECK(res.total == s.test.size());
  // per-label counts recombine exactly to the overall accuracy
  size_t correct = 0, total = 0;
  for (size_t c = 0; c < res.per_label_total.size(); ++c) {
    correct += res.per_label_correct[c];
    total += res.per_label_total[c];
  }
  CHECK(total == res.total);
  CHECK(res.accuracy == doctest::Approx(static_cast<double>(correct) / total).epsilon(1e-12));

  // a constant predictor scores the frequency of its predicted label
  for (const char* n : {"mlp_out.weight", "mlp_out.bias"}) {
    Parameter<float>& p = params.set.at(n);
    std::fill(p.value.data(), p.value.data() + p.value.size(), 0.0f);
  }
  EvalResult uniform = evaluate(params, s.cfg, s.test);
  CHECK(uniform.accuracy ==
        doctest::Approx(static_cast<double>(uniform.per_label_total[0]) / uniform.total).epsilon(1e-12));
  CHECK(uniform.accuracy > 0.1);
  CHECK(uniform.accuracy < 0.6);
}

TEST_CASE("evaluate rejects an empty set") {
  ToySetup s = toy_setup(40, 19);
  ModelParams<float> params = toy_params<float>(s, 13);
  CHECK_THROWS_AS(evaluate(params, s.cfg, {}), ContractError);
}

TEST_CASE("checkpoint round-trip is bit-exact and evaluation-identical") {
  ToySetup s = toy_setup(60, 21);
  ModelParams<float> params = toy_params<float>(s, 15);
  const std::string path = temp_path("t_ckpt.mimn");
  save_checkpoint(params, s.cfg, s.vocab, path);
  Checkpoint<float> loaded = load_checkpoint<float>(path);

  CHECK(loaded.config == s.cfg);
  CHECK(loaded.vocab == s.vocab);
  REQUIRE(loaded.params.set.size() == params.set.size());
  for (size_t t = 0; t < params.set.size(); ++t) {
    const Parameter<float>& a = params.set[t];
    const Parameter<float>& b = loaded.params.set[t];
    CHECK(a.name == b.name);
    CHECK(a.trainable == b.trainable);
    REQUIRE(a.value.same_shape(b.value));
    CHECK(std::memcmp(a.value.data(), b.value.data(),
                      sizeof(float) * static_cast<size_t>(a.value.size())) == 0);
  }

  EvalResult before = evaluate(params, s.cfg, s.test);
  EvalResult after = evaluate(loaded.params, s.cfg, s.test);
  CHECK(before.accuracy == after.accuracy);
  CHECK(before.per_label_correct == after.per_label_correct);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint format violations are rejected") {
  ToySetup s = toy_setup(40, 23);
  ModelParams<float> params = toy_params<float>(s, 17);
  const std::string path = temp_path("t_ckpt_bad.mimn");
  save_checkpoint(params, s.cfg, s.vocab, path);

  // corrupted magic
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_AS(load_checkpoint<float>(path), FormatError);

  // restore magic, corrupt version
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("MIMN", 4);
    const std::uint32_t bad_version = 999;
    f.write(reinterpret_cast<const char*>(&bad_version), 4);
  }
  CHECK_THROWS_AS(load_checkpoint<float>(path), FormatError);

  // truncated payload
  save_checkpoint(params, s.cfg, s.vocab, path);
  {
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    std::filesystem::resize_file(path, size - 64, ec);
  }
  CHECK_THROWS_AS(load_checkpoint<float>(path), FormatError);

  CHECK_THROWS_AS(load_checkpoint<float>(temp_path("t_ckpt_missing.mimn")), FormatError);
  std::remove(path.c_str());
}

TEST_CASE("ensembles of one or of identical members equal the single model") {
  ToySetup s = toy_setup(60, 25);
  ModelParams<float> params = toy_params<float>(s, 19);
  const std::string path = temp_path("t_ckpt_ens.mimn");
  save_checkpoint(params, s.cfg, s.vocab, path);

  EvalResult single = evaluate(params, s.cfg, s.test);

  std::vector<Checkpoint<float>> one;
  one.push_back(load_checkpoint<float>(path));
  EvalResult e1 = ensemble_eval(one, s.test);
  CHECK(e1.accuracy == single.accuracy);
  CHECK(e1.per_label_correct == single.per_label_correct);

  std::vector<Checkpoint<float>> three;
  for (int i = 0; i < 3; ++i) three.push_back(load_checkpoint<float>(path));
  EvalResult e3 = ensemble_eval(three, s.test);
  CHECK(e3.accuracy == single.accuracy);
  CHECK(e3.per_label_correct == single.per_label_correct);
  std::remove(path.c_str());
}

TEST_CASE("ensemble averaging follows the hand-computed mean distribution") {
  ToySetup s = toy_setup(60, 27);
  const std::string pa = temp_path("t_ens_a.mimn");
  const std::string pb = temp_path("t_ens_b.mimn");
  {
    ModelParams<float> a = toy_params<float>(s, 21);
    ModelParams<float> b = toy_params<float>(s, 22);
    save_checkpoint(a, s.cfg, s.vocab, pa);
    save_checkpoint(b, s.cfg, s.vocab, pb);
  }
  std::vector<Checkpoint<float>> members;
  members.push_back(load_checkpoint<float>(pa));
  members.push_back(load_checkpoint<float>(pb));

  EvalResult ens = ensemble_eval(members, s.test);
  size_t correct = 0;
  for (const Example& ex : s.test) {
    Array<float> probs_a, probs_b;
    predict_label(members[0].params, s.cfg, ex, &probs_a);
    predict_label(members[1].params, s.cfg, ex, &probs_b);
    int pred = 0;
    double best = -1;
    for (Index c = 0; c < 3; ++c) {
      const double mean = 0.5 * (probs_a[c] + probs_b[c]);
      if (mean > best) {
        best = mean;
        pred = static_cast<int>(c);
      }
    }
    if (pred == ex.label) ++correct;
  }
  CHECK(ens.correct == correct);
  std::remove(pa.c_str());
  std::remove(pb.c_str());
}

TEST_CASE("ensemble rejects mismatched configs") {
  ToySetup s = toy_setup(60, 29);
  const std::string pa = temp_path("t_ens_c.mimn");
  const std::string pb = temp_path("t_ens_d.mimn");
  {
    ModelParams<float> a = toy_params<float>(s, 23);
    save_checkpoint(a, s.cfg, s.vocab, pa);
    ModelConfig other = s.cfg;
    other.variant = Variant::kNoMemory;
    ModelParams<float> b = init_params<float>(other, s.vocab.size(), 24);
    save_checkpoint(b, other, s.vocab, pb);
  }
  std::vector<Checkpoint<float>> members;
  members.push_back(load_checkpoint<float>(pa));
  members.push_back(load_checkpoint<float>(pb));
  CHECK_THROWS_AS(ensemble_eval(members, s.test), ConfigError);
  std::remove(pa.c_str());
  std::remove(pb.c_str());
}
