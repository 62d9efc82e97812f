#pragma once

// Neural building blocks on top of the autodiff graph: LSTM cell,
// bidirectional LSTM runner, feed-forward layer, dropout.

#include <utility>
#include <vector>

#include "mimn/tensor.hpp"

namespace mimn::nn {

enum class Act { kLinear, kRelu, kTanh, kSigmoid };

// LSTM weights, gate order: input, forget, cell-candidate, output.
template <typename S>
struct LstmParams {
  Parameter<S>* w_ih = nullptr;  // [4h x in]
  Parameter<S>* w_hh = nullptr;  // [4h x h]
  Parameter<S>* bias = nullptr;  // [4h]

  Index hidden() const { return w_hh->value.shape()[1]; }
  Index input() const { return w_ih->value.shape()[1]; }
};

template <typename S>
struct DenseParams {
  Parameter<S>* weight = nullptr;  // [out x in]
  Parameter<S>* bias = nullptr;    // [out], optional
  Act activation = Act::kLinear;

  Index out() const { return weight->value.shape()[0]; }
  Index in() const { return weight->value.shape()[1]; }
};

// Imported-per-graph tensor views of the above.
template <typename S>
struct LstmTensors {
  Tensor<S> w_ih, w_hh, bias;
  Index hidden;
};

template <typename S>
LstmTensors<S> import_lstm(Graph<S>& g, const LstmParams<S>& p) {
  return {g.param(*p.w_ih), g.param(*p.w_hh), g.param(*p.bias), p.hidden()};
}

template <typename S>
Tensor<S> apply_act(Graph<S>& g, Tensor<S> x, Act act) {
  switch (act) {
    case Act::kRelu: return g.relu(x);
    case Act::kTanh: return g.tanh(x);
    case Act::kSigmoid: return g.sigmoid(x);
    case Act::kLinear: break;
  }
  return x;
}

// One LSTM recurrence step.
template <typename S>
std::pair<Tensor<S>, Tensor<S>> lstm_cell(Graph<S>& g, Tensor<S> x, Tensor<S> h_prev,
                                          Tensor<S> c_prev, const LstmTensors<S>& w) {
  const Index h = w.hidden;
  Tensor<S> z = g.add(g.add(g.matvec(w.w_ih, x), g.matvec(w.w_hh, h_prev)), w.bias);
  Tensor<S> i_gate = g.sigmoid(g.slice(z, 0, 0, h));
  Tensor<S> f_gate = g.sigmoid(g.slice(z, 0, h, h));
  Tensor<S> g_cand = g.tanh(g.slice(z, 0, 2 * h, h));
  Tensor<S> o_gate = g.sigmoid(g.slice(z, 0, 3 * h, h));
  Tensor<S> c = g.add(g.mul(f_gate, c_prev), g.mul(i_gate, g_cand));
  Tensor<S> h_out = g.mul(o_gate, g.tanh(c));
  return {h_out, c};
}

// Run one direction over the rows of seq. State passes through unchanged at
// masked positions, so trailing padding cannot leak into the states seen by
// real tokens in either direction.
template <typename S>
std::vector<Tensor<S>> lstm_direction(Graph<S>& g, Tensor<S> seq, const std::vector<uint8_t>& mask,
                                      const LstmTensors<S>& w, bool reverse) {
  const Index n = seq.shape()[0];
  Tensor<S> h = g.constant(Array<S>({w.hidden}));
  Tensor<S> c = g.constant(Array<S>({w.hidden}));
  std::vector<Tensor<S>> out(static_cast<size_t>(n));
  for (Index step = 0; step < n; ++step) {
    const Index t = reverse ? n - 1 - step : step;
    if (mask[static_cast<size_t>(t)]) {
      auto [h2, c2] = lstm_cell(g, g.row(seq, t), h, c, w);
      h = h2;
      c = c2;
    }
    out[static_cast<size_t>(t)] = h;
  }
  return out;
}

// Bidirectional LSTM over [n x in]; output row i is [fwd h_i ; bwd h_i],
// masked rows zeroed after the run.
template <typename S>
Tensor<S> bilstm(Graph<S>& g, Tensor<S> seq, const std::vector<uint8_t>& mask,
                 const LstmParams<S>& fwd, const LstmParams<S>& bwd) {
  if (seq.shape().size() != 2 || seq.shape()[0] < 1) {
    throw DimensionError("bilstm: nonempty [n x in] sequence required, got " + shape_str(seq.shape()));
  }
  if (static_cast<Index>(mask.size()) != seq.shape()[0]) {
    throw DimensionError("bilstm: mask length " + std::to_string(mask.size()) +
                         " does not match " + shape_str(seq.shape()));
  }
  LstmTensors<S> wf = import_lstm(g, fwd);
  LstmTensors<S> wb = import_lstm(g, bwd);
  std::vector<Tensor<S>> hf = lstm_direction(g, seq, mask, wf, false);
  std::vector<Tensor<S>> hb = lstm_direction(g, seq, mask, wb, true);
  std::vector<Tensor<S>> rows(hf.size());
  for (size_t i = 0; i < hf.size(); ++i) rows[i] = g.concat({hf[i], hb[i]}, 0);
  return g.mask_rows(g.stack_rows(rows), mask);
}

// activation(W x + b); x may be a single vector or a [n x in] matrix
// (applied row-wise).
template <typename S>
Tensor<S> dense(Graph<S>& g, Tensor<S> x, const DenseParams<S>& p) {
  Tensor<S> w = g.param(*p.weight);
  Tensor<S> y;
  if (x.shape().size() == 1) {
    y = g.matvec(w, x);
  } else {
    y = g.matmul(x, g.transpose(w));
  }
  if (p.bias) y = g.add(y, g.param(*p.bias));
  return apply_act(g, y, p.activation);
}

// Inverted dropout; identity when not training or rate is zero.
template <typename S>
Tensor<S> dropout(Graph<S>& g, Tensor<S> x, double rate, bool training, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  if (rng == nullptr) throw ContractError("dropout: rng required in training mode");
  return g.dropout(x, rate, *rng);
}

// Uniform Glorot-style fan-based init for a [out x in] matrix.
template <typename S>
void glorot_init(Array<S>& w, Rng& rng) {
  const Index fan_out = w.shape()[0], fan_in = w.shape()[1];
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<S>(rng.uniform(-limit, limit));
}

// Zero bias except the forget-gate block, which starts at 1.
template <typename S>
void lstm_bias_init(Array<S>& b) {
  const Index h = b.size() / 4;
  for (Index i = 0; i < b.size(); ++i) b[i] = (i >= h && i < 2 * h) ? S(1) : S(0);
}

}  // namespace mimn::nn
