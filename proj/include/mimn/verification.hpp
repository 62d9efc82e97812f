#pragma once

// Independent oracles: finite-difference gradient checker, parameter
// counter, and a straight-line scalar re-implementation of the forward pass
// that never touches the autodiff graph.

#include <functional>
#include <string>
#include <vector>

#include "mimn/model.hpp"

namespace mimn {

struct TensorCheck {
  std::string name;
  Index components_checked = 0;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double tolerance = 0.0;
  bool pass = true;
  std::string worst_tensor;
  double worst_rel_err = 0.0;
};

// Default instance seed for gradient checking. Central differences sit on a
// kink when a perturbation crosses a relu boundary or flips a pooling argmax;
// this seed was verified to produce instances clear of such near-ties for
// all four variants. Reruns with other seeds may need a reseed on failure
// when the reported mismatch is confined to one component.
constexpr std::uint64_t kDefaultGradcheckSeed = 5;

struct GradCheckOptions {
  std::uint64_t seed = kDefaultGradcheckSeed;
  double tolerance = 1e-5;
  double step = 1e-5;
  Index max_components_per_tensor = 200;  // larger tensors are subsampled by seed
  bool corrupt_backward = false;          // negative control: breaks a backward rule
};

// Core checker: compares the gradients populated by `run(true)` against
// central differences of `run(false)` for every trainable tensor in `set`.
GradCheckReport gradcheck_params(ParameterSet<double>& set,
                                 const std::function<double(bool)>& run,
                                 const GradCheckOptions& opts);

// End-to-end check of the model's differentiation on a tiny random instance
// (double precision, dropout off).
GradCheckReport gradcheck(const ModelConfig& cfg, const GradCheckOptions& opts);

struct ParamCount {
  std::string name;
  std::vector<Index> shape;
  Index count = 0;
};

struct ParamCountReport {
  std::vector<ParamCount> per_tensor;
  Index total = 0;  // trainable only; embeddings excluded
};

ParamCountReport count_params(const ModelConfig& cfg);

// Intermediates of the scalar oracle, mirroring ForwardTrace.
struct OracleTrace {
  Array<double> scores;
  std::array<Array<double>, kNumViews> views_p, views_q;
  std::vector<Array<double>> turn_c_p, turn_m_p, turn_c_q, turn_m_q;
  Array<double> pooled;
  Array<double> logits;
  Array<double> probs;
};

OracleTrace forward_oracle(const SentenceInput& premise, const SentenceInput& hypothesis,
                           ModelParams<double>& params, const ModelConfig& cfg);

struct OracleComparison {
  bool match = true;
  std::string first_divergence;  // first differing intermediate, empty when matching
  double max_abs_diff = 0.0;
};

OracleComparison compare_with_oracle(const SentenceInput& premise, const SentenceInput& hypothesis,
                                     ModelParams<double>& params, const ModelConfig& cfg,
                                     double tolerance);

// Config used by the gradcheck and oracle commands: tiny dimensions so a
// full component sweep stays fast.
ModelConfig verification_config(Variant variant);

// Random tiny instance builder shared by the verification entry points.
struct TinyInstance {
  SentenceInput premise;
  SentenceInput hypothesis;
  int gold = 0;
};
TinyInstance random_tiny_instance(Rng& rng, Index vocab_size, const ModelConfig& cfg);

}  // namespace mimn
