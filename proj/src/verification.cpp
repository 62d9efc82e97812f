#include "mimn/verification.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace mimn {

// ---- gradient checking ----

GradCheckReport gradcheck_params(ParameterSet<double>& set,
                                 const std::function<double(bool)>& run,
                                 const GradCheckOptions& opts) {
  set.zero_grads();
  run(true);

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ull);

  for (size_t t = 0; t < set.size(); ++t) {
    Parameter<double>& p = set[t];
    if (!p.trainable) continue;

    // which components to probe: all, or a seeded subsample for large tensors
    std::vector<Index> idx(static_cast<size_t>(p.value.size()));
    std::iota(idx.begin(), idx.end(), Index(0));
    if (p.value.size() > opts.max_components_per_tensor) {
      rng.shuffle(idx);
      idx.resize(static_cast<size_t>(opts.max_components_per_tensor));
      std::sort(idx.begin(), idx.end());
    }

    TensorCheck check;
    check.name = p.name;
    check.components_checked = static_cast<Index>(idx.size());
    for (Index i : idx) {
      const double old = p.value[i];
      p.value[i] = old + opts.step;
      const double fp = run(false);
      p.value[i] = old - opts.step;
      const double fm = run(false);
      p.value[i] = old;
      const double numeric = (fp - fm) / (2.0 * opts.step);
      const double analytic = p.grad[i];
      const double abs_err = std::fabs(analytic - numeric);
      const double rel_err = abs_err / std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
      check.max_abs_err = std::max(check.max_abs_err, abs_err);
      if (rel_err > check.max_rel_err) check.max_rel_err = rel_err;
    }
    check.pass = check.max_rel_err < opts.tolerance;
    if (check.max_rel_err > report.worst_rel_err) {
      report.worst_rel_err = check.max_rel_err;
      report.worst_tensor = check.name;
    }
    report.pass = report.pass && check.pass;
    report.tensors.push_back(std::move(check));
  }
  return report;
}

ModelConfig verification_config(Variant variant) {
  ModelConfig cfg;
  cfg.embed_dim = 4;
  cfg.hidden = 4;
  cfg.mlp_hidden = 4;
  cfg.variant = variant;
  cfg.dropout = 0.0;
  return cfg;
}

TinyInstance random_tiny_instance(Rng& rng, Index vocab_size, const ModelConfig& cfg) {
  auto sentence = [&](size_t len) {
    std::vector<int> ids(len);
    for (int& id : ids) id = 2 + static_cast<int>(rng.index(vocab_size - 2));
    return SentenceInput::dense(ids);
  };
  TinyInstance inst;
  inst.premise = sentence(3);
  inst.hypothesis = sentence(3);
  inst.gold = static_cast<int>(rng.index(cfg.num_labels()));
  return inst;
}

// The checked loss is the cross-entropy scaled by this constant. Central
// differences at step 1e-5 on an O(1) loss carry ~1e-11 of absolute rounding
// and truncation noise, which the 1e-8 floor in the relative-error formula
// cannot absorb at a 1e-5 tolerance; scaling the loss (a differentiable
// primitive, so every backward rule is still exercised) moves that noise
// under the floor without changing the relative agreement of any gradient
// the step size can resolve.
constexpr double kGradCheckLossScale = 1e-3;

GradCheckReport gradcheck(const ModelConfig& cfg, const GradCheckOptions& opts) {
  cfg.validate();
  const Index vocab_size = 8;
  ModelParams<double> params = init_params<double>(cfg, vocab_size, opts.seed);
  Rng rng(opts.seed + 1);
  Array<double>& emb = params.embedding->value;
  for (Index i = cfg.embed_dim; i < emb.size(); ++i) emb[i] = rng.uniform(-1.0, 1.0);
  TinyInstance inst = random_tiny_instance(rng, vocab_size, cfg);

  auto run = [&](bool with_grad) {
    Graph<double> g;
    if (opts.corrupt_backward) g.set_backward_fuzz(0.02);
    ForwardOut<double> out = forward(g, inst.premise, inst.hypothesis, params, cfg, false, nullptr);
    mimn::Tensor<double> loss = g.scale(cross_entropy(g, out.probs, inst.gold), kGradCheckLossScale);
    if (with_grad) g.backward(loss);
    return loss.value()[0];
  };
  return gradcheck_params(params.set, run, opts);
}

// ---- parameter counting ----

ParamCountReport count_params(const ModelConfig& cfg) {
  ParamCountReport report;
  for (const ParamSpec& spec : declare_param_shapes(cfg, /*vocab_size=*/2)) {
    if (!spec.trainable) continue;  // embeddings are fixed, not trainable
    ParamCount c;
    c.name = spec.name;
    c.shape = spec.shape;
    c.count = 1;
    for (Index d : spec.shape) c.count *= d;
    report.total += c.count;
    report.per_tensor.push_back(std::move(c));
  }
  return report;
}

// ---- straight-line forward oracle ----
//
// Everything below is plain scalar arithmetic on std::vector<double>; it
// reads parameter values but shares no computation code with the graph.

namespace {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;  // list of rows

double dot_row(const Array<double>& w, Index row, const Vec& x) {
  double acc = 0.0;
  const Index cols = w.shape()[1];
  for (Index j = 0; j < cols; ++j) acc += w.at(row, j) * x[static_cast<size_t>(j)];
  return acc;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// one LSTM direction with state pass-through at masked steps
Mat lstm_dir(const Mat& seq, const std::vector<uint8_t>& mask, const Array<double>& w_ih,
             const Array<double>& w_hh, const Array<double>& bias, bool reverse) {
  const size_t n = seq.size();
  const Index h = w_hh.shape()[1];
  Vec hs(static_cast<size_t>(h), 0.0), cs(static_cast<size_t>(h), 0.0);
  Mat out(n);
  for (size_t step = 0; step < n; ++step) {
    const size_t t = reverse ? n - 1 - step : step;
    if (mask[t]) {
      Vec z(static_cast<size_t>(4 * h));
      for (Index r = 0; r < 4 * h; ++r) {
        z[static_cast<size_t>(r)] = bias[r] + dot_row(w_ih, r, seq[t]) + dot_row(w_hh, r, hs);
      }
      Vec h_new(static_cast<size_t>(h)), c_new(static_cast<size_t>(h));
      for (Index u = 0; u < h; ++u) {
        const double ig = sigmoid(z[static_cast<size_t>(u)]);
        const double fg = sigmoid(z[static_cast<size_t>(h + u)]);
        const double cand = std::tanh(z[static_cast<size_t>(2 * h + u)]);
        const double og = sigmoid(z[static_cast<size_t>(3 * h + u)]);
        c_new[static_cast<size_t>(u)] = fg * cs[static_cast<size_t>(u)] + ig * cand;
        h_new[static_cast<size_t>(u)] = og * std::tanh(c_new[static_cast<size_t>(u)]);
      }
      hs = h_new;
      cs = c_new;
    }
    out[t] = hs;
  }
  return out;
}

Mat bilstm_oracle(const Mat& seq, const std::vector<uint8_t>& mask, const nn::LstmParams<double>& fwd,
                  const nn::LstmParams<double>& bwd) {
  Mat hf = lstm_dir(seq, mask, fwd.w_ih->value, fwd.w_hh->value, fwd.bias->value, false);
  Mat hb = lstm_dir(seq, mask, bwd.w_ih->value, bwd.w_hh->value, bwd.bias->value, true);
  Mat out(seq.size());
  for (size_t i = 0; i < seq.size(); ++i) {
    if (!mask[i]) {
      out[i].assign(hf[i].size() + hb[i].size(), 0.0);
      continue;
    }
    out[i] = hf[i];
    out[i].insert(out[i].end(), hb[i].begin(), hb[i].end());
  }
  return out;
}

Vec softmax_masked_oracle(const Vec& scores, const std::vector<uint8_t>& mask) {
  double mx = 0.0;
  bool any = false;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (mask[i] && (!any || scores[i] > mx)) {
      mx = scores[i];
      any = true;
    }
  }
  Vec out(scores.size(), 0.0);
  double denom = 0.0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (mask[i]) {
      out[i] = std::exp(scores[i] - mx);
      denom += out[i];
    }
  }
  for (size_t i = 0; i < scores.size(); ++i) out[i] /= denom;
  return out;
}

// dense layer y = act(W x + b) on one row vector
Vec dense_oracle(const Vec& x, const Array<double>& w, const Array<double>* b, nn::Act act) {
  const Index out_dim = w.shape()[0];
  Vec y(static_cast<size_t>(out_dim));
  for (Index r = 0; r < out_dim; ++r) {
    double acc = b ? (*b)[r] : 0.0;
    acc += dot_row(w, r, x);
    switch (act) {
      case nn::Act::kRelu: acc = std::max(acc, 0.0); break;
      case nn::Act::kTanh: acc = std::tanh(acc); break;
      case nn::Act::kSigmoid: acc = sigmoid(acc); break;
      case nn::Act::kLinear: break;
    }
    y[static_cast<size_t>(r)] = acc;
  }
  return y;
}

Array<double> mat_to_array(const Mat& m) {
  const Index rows = static_cast<Index>(m.size());
  const Index cols = static_cast<Index>(m.empty() ? 0 : m[0].size());
  Array<double> out({rows, cols});
  for (Index i = 0; i < rows; ++i) {
    for (Index j = 0; j < cols; ++j) out.at(i, j) = m[static_cast<size_t>(i)][static_cast<size_t>(j)];
  }
  return out;
}

Array<double> vec_to_array(const Vec& v) {
  Array<double> out({static_cast<Index>(v.size())});
  for (size_t i = 0; i < v.size(); ++i) out[static_cast<Index>(i)] = v[i];
  return out;
}

Vec concat_vecs(const Vec& a, const Vec& b) {
  Vec out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

struct SentenceOracle {
  Mat context;                    // encoder output
  std::array<Mat, kNumViews> views;
  std::vector<Mat> turn_c, turn_m;
  Mat infer_out;
  Vec pooled;                     // [max ; mean]
};

// the per-sentence half of the forward pass given the aligned vectors
void infer_sentence(SentenceOracle& s, const Mat& aligned, const std::vector<uint8_t>& mask,
                    ModelParams<double>& params, const ModelConfig& cfg) {
  const size_t l = s.context.size();
  const Index d = cfg.hidden;

  // matching views
  for (size_t i = 0; i < l; ++i) {
    const Vec& ctx = s.context[i];
    const Vec& al = aligned[i];
    Vec joint_in = concat_vecs(ctx, al);
    Vec diff_in(ctx.size()), sim_in(ctx.size());
    for (size_t j = 0; j < ctx.size(); ++j) {
      diff_in[j] = ctx[j] - al[j];
      sim_in[j] = ctx[j] * al[j];
    }
    s.views[0].push_back(dense_oracle(joint_in, params.match_joint.weight->value,
                                      &params.match_joint.bias->value, nn::Act::kRelu));
    s.views[1].push_back(dense_oracle(diff_in, params.match_diff.weight->value,
                                      &params.match_diff.bias->value, nn::Act::kRelu));
    s.views[2].push_back(dense_oracle(sim_in, params.match_sim.weight->value,
                                      &params.match_sim.bias->value, nn::Act::kRelu));
  }

  const Array<double>& w_inf = params.infer_reduce->value;
  auto reduce_rows = [&](const Mat& rows) {
    Mat out;
    for (const Vec& r : rows) out.push_back(dense_oracle(r, w_inf, nullptr, nn::Act::kLinear));
    return out;
  };

  switch (cfg.variant) {
    case Variant::kNoMemory: {
      for (int k = 0; k < kNumViews; ++k) {
        Mat c = bilstm_oracle(reduce_rows(s.views[static_cast<size_t>(k)]), mask, params.inf_fwd,
                              params.inf_bwd);
        s.turn_c.push_back(c);
        if (k == 0) {
          s.infer_out = c;
        } else {
          for (size_t i = 0; i < l; ++i) s.infer_out[i] = concat_vecs(s.infer_out[i], c[i]);
        }
      }
      break;
    }
    case Variant::kMixedSingleTurn: {
      Mat mixed(l);
      for (size_t i = 0; i < l; ++i) {
        mixed[i] = concat_vecs(concat_vecs(s.views[0][i], s.views[1][i]), s.views[2][i]);
      }
      s.infer_out = bilstm_oracle(reduce_rows(mixed), mask, params.inf_fwd, params.inf_bwd);
      s.turn_c.push_back(s.infer_out);
      break;
    }
    case Variant::kFull:
    case Variant::kGateRelu: {
      Mat memory(l, Vec(static_cast<size_t>(2 * d), 0.0));
      for (int k = 0; k < kNumViews; ++k) {
        Mat turn_in(l);
        for (size_t i = 0; i < l; ++i) {
          turn_in[i] = concat_vecs(s.views[static_cast<size_t>(k)][i], memory[i]);
        }
        Mat c = bilstm_oracle(reduce_rows(turn_in), mask, params.inf_fwd, params.inf_bwd);
        Mat next(l);
        for (size_t i = 0; i < l; ++i) {
          Vec update_in = concat_vecs(c[i], memory[i]);
          if (cfg.variant == Variant::kFull) {
            Vec gate = dense_oracle(update_in, params.gate.weight->value, &params.gate.bias->value,
                                    nn::Act::kSigmoid);
            next[i].resize(static_cast<size_t>(2 * d));
            for (size_t j = 0; j < next[i].size(); ++j) {
              next[i][j] = gate[j] * c[i][j] + (1.0 - gate[j]) * memory[i][j];
            }
          } else {
            next[i] = dense_oracle(update_in, params.memory_relu->value, nullptr, nn::Act::kRelu);
          }
        }
        memory = next;
        s.turn_c.push_back(c);
        s.turn_m.push_back(memory);
      }
      s.infer_out = memory;
      break;
    }
  }

  // masked max + mean pooling; strict > keeps the first row on ties
  const size_t w = s.infer_out[0].size();
  Vec mx(w), mean(w, 0.0);
  bool first = true;
  size_t count = 0;
  for (size_t i = 0; i < l; ++i) {
    if (!mask[i]) continue;
    ++count;
    for (size_t j = 0; j < w; ++j) {
      if (first || s.infer_out[i][j] > mx[j]) mx[j] = s.infer_out[i][j];
      mean[j] += s.infer_out[i][j];
    }
    first = false;
  }
  for (size_t j = 0; j < w; ++j) mean[j] /= static_cast<double>(count);
  s.pooled = concat_vecs(mx, mean);
}

}  // namespace

OracleTrace forward_oracle(const SentenceInput& premise, const SentenceInput& hypothesis,
                           ModelParams<double>& params, const ModelConfig& cfg) {
  cfg.validate();
  const Array<double>& table = params.embedding->value;
  auto embed = [&](const std::vector<int>& ids) {
    Mat out(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
      const Index row = ids[i];
      out[i].resize(static_cast<size_t>(cfg.embed_dim));
      for (Index j = 0; j < cfg.embed_dim; ++j) out[i][static_cast<size_t>(j)] = table.at(row, j);
    }
    return out;
  };

  SentenceOracle sp, sq;
  sp.context = bilstm_oracle(embed(premise.ids), premise.mask, params.enc_fwd, params.enc_bwd);
  sq.context = bilstm_oracle(embed(hypothesis.ids), hypothesis.mask, params.enc_fwd, params.enc_bwd);

  const size_t lp = sp.context.size(), lq = sq.context.size();

  // score matrix and both soft alignments
  Mat scores(lp, Vec(lq, 0.0));
  for (size_t i = 0; i < lp; ++i) {
    for (size_t j = 0; j < lq; ++j) {
      double acc = 0.0;
      for (size_t t = 0; t < sp.context[i].size(); ++t) acc += sp.context[i][t] * sq.context[j][t];
      scores[i][j] = acc;
    }
  }
  Mat aligned_p(lp), aligned_q(lq);
  for (size_t i = 0; i < lp; ++i) {
    Vec w = softmax_masked_oracle(scores[i], hypothesis.mask);
    aligned_p[i].assign(sq.context[0].size(), 0.0);
    for (size_t j = 0; j < lq; ++j) {
      for (size_t t = 0; t < aligned_p[i].size(); ++t) aligned_p[i][t] += w[j] * sq.context[j][t];
    }
  }
  for (size_t j = 0; j < lq; ++j) {
    Vec col(lp);
    for (size_t i = 0; i < lp; ++i) col[i] = scores[i][j];
    Vec w = softmax_masked_oracle(col, premise.mask);
    aligned_q[j].assign(sp.context[0].size(), 0.0);
    for (size_t i = 0; i < lp; ++i) {
      for (size_t t = 0; t < aligned_q[j].size(); ++t) aligned_q[j][t] += w[i] * sp.context[i][t];
    }
  }

  infer_sentence(sp, aligned_p, premise.mask, params, cfg);
  infer_sentence(sq, aligned_q, hypothesis.mask, params, cfg);

  Vec pooled = concat_vecs(sp.pooled, sq.pooled);
  Vec hidden = dense_oracle(pooled, params.mlp_hidden.weight->value, &params.mlp_hidden.bias->value,
                            nn::Act::kTanh);
  Vec logits = dense_oracle(hidden, params.mlp_out.weight->value, &params.mlp_out.bias->value,
                            nn::Act::kLinear);
  Vec probs = softmax_masked_oracle(logits, std::vector<uint8_t>(logits.size(), 1));

  OracleTrace trace;
  trace.scores = mat_to_array(scores);
  for (int k = 0; k < kNumViews; ++k) {
    trace.views_p[static_cast<size_t>(k)] = mat_to_array(sp.views[static_cast<size_t>(k)]);
    trace.views_q[static_cast<size_t>(k)] = mat_to_array(sq.views[static_cast<size_t>(k)]);
  }
  for (const Mat& m : sp.turn_c) trace.turn_c_p.push_back(mat_to_array(m));
  for (const Mat& m : sp.turn_m) trace.turn_m_p.push_back(mat_to_array(m));
  for (const Mat& m : sq.turn_c) trace.turn_c_q.push_back(mat_to_array(m));
  for (const Mat& m : sq.turn_m) trace.turn_m_q.push_back(mat_to_array(m));
  trace.pooled = vec_to_array(pooled);
  trace.logits = vec_to_array(logits);
  trace.probs = vec_to_array(probs);
  return trace;
}

OracleComparison compare_with_oracle(const SentenceInput& premise, const SentenceInput& hypothesis,
                                     ModelParams<double>& params, const ModelConfig& cfg,
                                     double tolerance) {
  Graph<double> g;
  ForwardTrace<double> model_trace;
  ForwardOut<double> out = forward(g, premise, hypothesis, params, cfg, false, nullptr, &model_trace);
  OracleTrace oracle = forward_oracle(premise, hypothesis, params, cfg);

  OracleComparison cmp;
  auto compare = [&](const std::string& name, const Array<double>& a, const Array<double>& b) {
    double diff = 0.0;
    if (!a.same_shape(b)) {
      diff = std::numeric_limits<double>::infinity();
    } else {
      for (Index i = 0; i < a.size(); ++i) diff = std::max(diff, std::fabs(a[i] - b[i]));
    }
    cmp.max_abs_diff = std::max(cmp.max_abs_diff, diff);
    if (diff > tolerance && cmp.match) {
      cmp.match = false;
      cmp.first_divergence = name;
    }
  };

  compare("scores", model_trace.scores, oracle.scores);
  const char* view_names[kNumViews] = {"view_joint", "view_diff", "view_sim"};
  for (int k = 0; k < kNumViews; ++k) {
    compare(std::string(view_names[k]) + "_p", model_trace.views_p[static_cast<size_t>(k)],
            oracle.views_p[static_cast<size_t>(k)]);
    compare(std::string(view_names[k]) + "_q", model_trace.views_q[static_cast<size_t>(k)],
            oracle.views_q[static_cast<size_t>(k)]);
  }
  auto compare_turns = [&](const std::string& base, const std::vector<Array<double>>& a,
                           const std::vector<Array<double>>& b) {
    if (a.size() != b.size()) {
      if (cmp.match) {
        cmp.match = false;
        cmp.first_divergence = base + " (turn count)";
      }
      return;
    }
    for (size_t k = 0; k < a.size(); ++k) compare(base + "[" + std::to_string(k + 1) + "]", a[k], b[k]);
  };
  compare_turns("turn_c_p", model_trace.turn_c_p, oracle.turn_c_p);
  compare_turns("turn_m_p", model_trace.turn_m_p, oracle.turn_m_p);
  compare_turns("turn_c_q", model_trace.turn_c_q, oracle.turn_c_q);
  compare_turns("turn_m_q", model_trace.turn_m_q, oracle.turn_m_q);
  compare("pooled", model_trace.pooled, oracle.pooled);
  compare("logits", model_trace.logits, oracle.logits);
  compare("probs", out.probs.value(), oracle.probs);
  return cmp;
}

}  // namespace mimn
