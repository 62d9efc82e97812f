#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "mimn/nn.hpp"

using namespace mimn;
using nn::Act;

namespace {

using ArrayD = Array<double>;
using GraphD = Graph<double>;
using TensorD = mimn::Tensor<double>;
using SetD = ParameterSet<double>;

ArrayD random_array(std::vector<Index> shape, Rng& rng, double lo = -0.8, double hi = 0.8) {
  ArrayD a(std::move(shape));
  for (Index i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

nn::LstmParams<double> make_lstm(SetD& set, const std::string& prefix, Index in, Index h, Rng* rng) {
  ArrayD w_ih({4 * h, in}), w_hh({4 * h, h}), bias({4 * h});
  if (rng) {
    w_ih = random_array({4 * h, in}, *rng);
    w_hh = random_array({4 * h, h}, *rng);
    bias = random_array({4 * h}, *rng);
  }
  nn::LstmParams<double> p;
  p.w_ih = &set.add(prefix + ".w_ih", std::move(w_ih));
  p.w_hh = &set.add(prefix + ".w_hh", std::move(w_hh));
  p.bias = &set.add(prefix + ".bias", std::move(bias));
  return p;
}

// Finite differences over every component of every trainable parameter.
void gradcheck_over_params(SetD& set, const std::function<double(bool)>& run, double tol = 1e-5) {
  set.zero_grads();
  run(true);  // populates grads
  const double h = 1e-5;
  for (size_t t = 0; t < set.size(); ++t) {
    Parameter<double>& p = set[t];
    if (!p.trainable) continue;
    for (Index i = 0; i < p.value.size(); ++i) {
      const double old = p.value[i];
      p.value[i] = old + h;
      const double fp = run(false);
      p.value[i] = old - h;
      const double fm = run(false);
      p.value[i] = old;
      const double numeric = (fp - fm) / (2 * h);
      const double a = p.grad[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      INFO(p.name, "[", i, "] analytic=", a, " numeric=", numeric);
      CHECK(std::fabs(a - numeric) / denom < tol);
    }
  }
}

}  // namespace

TEST_CASE("lstm_cell zero weights and states give zero outputs") {
  SetD set;
  nn::LstmParams<double> w = make_lstm(set, "z", 3, 2, nullptr);
  GraphD g;
  auto [h, c] = nn::lstm_cell(g, g.constant(ArrayD({3})), g.constant(ArrayD({2})),
                              g.constant(ArrayD({2})), nn::import_lstm(g, w));
  for (Index i = 0; i < 2; ++i) {
    CHECK(h.value()[i] == 0.0);
    CHECK(c.value()[i] == 0.0);
  }
}

TEST_CASE("lstm_cell saturated forget gate carries the cell state") {
  SetD set;
  nn::LstmParams<double> w = make_lstm(set, "s", 3, 2, nullptr);
  // forget-gate bias block very positive, input/output blocks very negative
  for (Index i = 0; i < 2; ++i) {
    w.bias->value[i] = -30.0;      // input gate
    w.bias->value[2 + i] = 30.0;   // forget gate
    w.bias->value[6 + i] = -30.0;  // output gate
  }
  GraphD g;
  ArrayD c_prev({2});
  c_prev[0] = 0.7;
  c_prev[1] = -0.3;
  auto [h, c] = nn::lstm_cell(g, g.constant(ArrayD({3})), g.constant(ArrayD({2})),
                              g.constant(c_prev), nn::import_lstm(g, w));
  CHECK(c.value()[0] == doctest::Approx(0.7).epsilon(1e-6));
  CHECK(c.value()[1] == doctest::Approx(-0.3).epsilon(1e-6));
  CHECK(std::fabs(h.value()[0]) < 1e-6);
}

TEST_CASE("lstm_cell matches hand-unrolled gate equations") {
  Rng rng(5);
  SetD set;
  nn::LstmParams<double> w = make_lstm(set, "r", 3, 2, &rng);
  ArrayD x = random_array({3}, rng), h0 = random_array({2}, rng), c0 = random_array({2}, rng);

  GraphD g;
  auto [h, c] = nn::lstm_cell(g, g.constant(x), g.constant(h0), g.constant(c0),
                              nn::import_lstm(g, w));

  auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (Index u = 0; u < 2; ++u) {
    double z[4];
    for (int gate = 0; gate < 4; ++gate) {
      const Index r = gate * 2 + u;
      double acc = w.bias->value[r];
      for (Index j = 0; j < 3; ++j) acc += w.w_ih->value.at(r, j) * x[j];
      for (Index j = 0; j < 2; ++j) acc += w.w_hh->value.at(r, j) * h0[j];
      z[gate] = acc;
    }
    const double i_g = sigmoid(z[0]), f_g = sigmoid(z[1]), cand = std::tanh(z[2]), o_g = sigmoid(z[3]);
    const double c_want = f_g * c0[u] + i_g * cand;
    const double h_want = o_g * std::tanh(c_want);
    CHECK(c.value()[u] == doctest::Approx(c_want).epsilon(1e-12));
    CHECK(h.value()[u] == doctest::Approx(h_want).epsilon(1e-12));
  }
}

TEST_CASE("bilstm single position holds one step of each direction") {
  Rng rng(9);
  SetD set;
  nn::LstmParams<double> wf = make_lstm(set, "f", 3, 2, &rng);
  nn::LstmParams<double> wb = make_lstm(set, "b", 3, 2, &rng);
  ArrayD x = random_array({1, 3}, rng);

  GraphD g;
  TensorD out = nn::bilstm(g, g.constant(x), {1}, wf, wb);
  REQUIRE(out.shape() == std::vector<Index>{1, 4});

  auto [hf, cf] = nn::lstm_cell(g, g.row(g.constant(x), 0), g.constant(ArrayD({2})),
                                g.constant(ArrayD({2})), nn::import_lstm(g, wf));
  auto [hb, cb] = nn::lstm_cell(g, g.row(g.constant(x), 0), g.constant(ArrayD({2})),
                                g.constant(ArrayD({2})), nn::import_lstm(g, wb));
  (void)cf;
  (void)cb;
  for (Index j = 0; j < 2; ++j) {
    CHECK(out.value().at(0, j) == hf.value()[j]);
    CHECK(out.value().at(0, 2 + j) == hb.value()[j]);
  }
}

TEST_CASE("bilstm with zero weights is all zero") {
  SetD set;
  nn::LstmParams<double> wf = make_lstm(set, "f", 3, 2, nullptr);
  nn::LstmParams<double> wb = make_lstm(set, "b", 3, 2, nullptr);
  Rng rng(3);
  GraphD g;
  TensorD out = nn::bilstm(g, g.constant(random_array({4, 3}, rng)), {1, 1, 1, 1}, wf, wb);
  for (Index i = 0; i < out.value().size(); ++i) CHECK(out.value()[i] == 0.0);
}

TEST_CASE("bilstm direction symmetry on reversed input") {
  Rng rng(11);
  SetD set;
  nn::LstmParams<double> wa = make_lstm(set, "a", 3, 2, &rng);
  nn::LstmParams<double> wb = make_lstm(set, "b", 3, 2, &rng);
  const Index n = 5;
  ArrayD seq = random_array({n, 3}, rng);
  ArrayD rev({n, 3});
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < 3; ++j) rev.at(i, j) = seq.at(n - 1 - i, j);
  }
  std::vector<uint8_t> mask(n, 1);

  GraphD g;
  const ArrayD& o1 = nn::bilstm(g, g.constant(seq), mask, wa, wb).value();
  const ArrayD& o2 = nn::bilstm(g, g.constant(rev), mask, wb, wa).value();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < 2; ++j) {
      CHECK(o1.at(i, j) == o2.at(n - 1 - i, 2 + j));          // fwd(seq) == bwd(rev)
      CHECK(o1.at(i, 2 + j) == o2.at(n - 1 - i, j));          // bwd(seq) == fwd(rev)
    }
  }
}

TEST_CASE("bilstm output at masked positions is exactly zero") {
  Rng rng(17);
  SetD set;
  nn::LstmParams<double> wf = make_lstm(set, "f", 3, 2, &rng);
  nn::LstmParams<double> wb = make_lstm(set, "b", 3, 2, &rng);
  GraphD g;
  std::vector<uint8_t> mask = {1, 0, 1, 0, 0};
  TensorD out = nn::bilstm(g, g.constant(random_array({5, 3}, rng)), mask, wf, wb);
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 4; ++j) {
      if (!mask[static_cast<size_t>(i)]) CHECK(out.value().at(i, j) == 0.0);
    }
  }
}

TEST_CASE("bilstm rejects mask length mismatch") {
  SetD set;
  nn::LstmParams<double> wf = make_lstm(set, "f", 3, 2, nullptr);
  nn::LstmParams<double> wb = make_lstm(set, "b", 3, 2, nullptr);
  GraphD g;
  CHECK_THROWS_AS(nn::bilstm(g, g.constant(ArrayD({4, 3})), {1, 1}, wf, wb), DimensionError);
}

TEST_CASE("dense examples") {
  SetD set;
  nn::DenseParams<double> zero;
  zero.weight = &set.add("z.w", ArrayD({2, 2}));
  zero.bias = &set.add("z.b", ArrayD({2}));
  zero.activation = Act::kRelu;
  GraphD g;
  ArrayD x({2});
  x[0] = 0.5;
  x[1] = 2.0;
  const ArrayD& y0 = nn::dense(g, g.constant(x), zero).value();
  CHECK(y0[0] == 0.0);
  CHECK(y0[1] == 0.0);

  nn::DenseParams<double> ident;
  ident.weight = &set.add("i.w", ArrayD({2, 2}, {1, 0, 0, 1}));
  ident.bias = &set.add("i.b", ArrayD({2}));
  ident.activation = Act::kRelu;
  const ArrayD& y1 = nn::dense(g, g.constant(x), ident).value();
  CHECK(y1[0] == 0.5);
  CHECK(y1[1] == 2.0);

  nn::DenseParams<double> gate;
  gate.weight = &set.add("g.w", ArrayD({1, 2}, {1, 1}));
  gate.bias = &set.add("g.b", ArrayD({1}, {-3}));
  gate.activation = Act::kRelu;
  ArrayD x2({2}, {1, 1});
  CHECK(nn::dense(g, g.constant(x2), gate).value()[0] == 0.0);

  // row-wise application to a matrix
  ArrayD m({2, 2}, {1, 1, 2, 2});
  const ArrayD& y2 = nn::dense(g, g.constant(m), gate).value();
  CHECK(y2[0] == 0.0);
  CHECK(y2[1] == doctest::Approx(1.0));
}

TEST_CASE("dropout identity cases") {
  GraphD g;
  Rng rng(1);
  ArrayD x({4}, {1, 2, 3, 4});
  TensorD t = g.constant(x);
  CHECK(nn::dropout(g, t, 0.0, true, &rng).id == t.id);
  CHECK(nn::dropout(g, t, 0.5, false, nullptr).id == t.id);
  CHECK_THROWS_AS(nn::dropout(g, t, 1.0, true, &rng), ContractError);
}

TEST_CASE("dropout expectation approximates identity") {
  const Index n = 1000;
  ArrayD x = ArrayD::full({n}, 1.0);
  double total = 0.0;
  const int runs = 200;
  for (int s = 0; s < runs; ++s) {
    GraphD g;
    Rng rng(1000 + static_cast<uint64_t>(s));
    TensorD y = nn::dropout(g, g.constant(x), 0.2, true, &rng);
    for (Index i = 0; i < n; ++i) total += y.value()[i];
  }
  const double mean = total / (runs * n);
  CHECK(std::fabs(mean - 1.0) < 0.02);
}

TEST_CASE("layer gradients match finite differences") {
  Rng rng(23);
  SetD set;
  nn::LstmParams<double> wf = make_lstm(set, "f", 3, 2, &rng);
  nn::LstmParams<double> wb = make_lstm(set, "b", 3, 2, &rng);
  nn::DenseParams<double> head;
  head.weight = &set.add("h.w", random_array({2, 4}, rng));
  head.bias = &set.add("h.b", random_array({2}, rng));
  head.activation = Act::kTanh;
  ArrayD seq = random_array({4, 3}, rng);
  std::vector<uint8_t> mask = {1, 1, 1, 0};

  auto run = [&](bool with_grad) {
    GraphD g;
    TensorD enc = nn::bilstm(g, g.constant(seq), mask, wf, wb);
    TensorD pooled = g.reduce_mean(enc, mask);
    TensorD out = nn::dense(g, pooled, head);
    TensorD loss = g.sum_all(g.mul(out, out));
    if (with_grad) g.backward(loss);
    return loss.value()[0];
  };
  gradcheck_over_params(set, run);
}

TEST_CASE("glorot init respects fan-based bounds") {
  Rng rng(31);
  Array<double> w({20, 30});
  nn::glorot_init(w, rng);
  const double limit = std::sqrt(6.0 / 50.0);
  double max_abs = 0;
  for (Index i = 0; i < w.size(); ++i) max_abs = std::max(max_abs, std::fabs(w[i]));
  CHECK(max_abs <= limit);
  CHECK(max_abs > limit * 0.5);
}

TEST_CASE("lstm bias init sets the forget block to one") {
  Array<double> b({8});
  nn::lstm_bias_init(b);
  for (Index i = 0; i < 8; ++i) {
    CHECK(b[i] == ((i >= 2 && i < 4) ? 1.0 : 0.0));
  }
}
