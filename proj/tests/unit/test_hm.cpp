#include <doctest.h>

#include <cmath>

#include "charnmt/seq2seq.hpp"
#include "charnmt/trainer.hpp"
#include "oracles.hpp"

using namespace charnmt;

namespace {

void randomize(ParameterStore& store, std::uint64_t seed, double range) {
  Rng rng(seed);
  for (auto& p : store)
    for (auto& v : p->value.data()) v = static_cast<Real>(uniform(rng, -range, range));
}

SequenceBatch sequence(Tape& tape, const std::vector<std::vector<double>>& steps) {
  SequenceBatch s{{}, {steps.size()}};
  for (const auto& x : steps) {
    Tensor t(Shape{1, x.size()});
    for (std::size_t j = 0; j < x.size(); ++j) t[j] = static_cast<Real>(x[j]);
    s.steps.push_back(tape.constant(std::move(t)));
  }
  return s;
}

std::vector<double> to_double(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ZMatrix make_z(std::vector<std::vector<unsigned char>> z) {
  ZMatrix m;
  m.z_tilde.assign(z.size(), std::vector<double>(z.front().size()));
  m.z = std::move(z);
  return m;
}

}  // namespace

TEST_SUITE("hm-encoder") {

TEST_CASE("z-bias 1 with zero gate weights opens every gate at slope 1") {
  ParameterStore store;
  HmLayer layer = HmLayer::create(store, "hm", 2, 3, 1.0);
  Rng rng(1);
  init_parameters(store, 0.04, rng);
  CHECK(layer.gate_bias->value[0] == Real(1));
  layer.gate_weight->value.fill(0);
  Tape tape(false);
  Var h = layer.cell.zero_state(tape, 1), c = h;
  const HmCellOut out = hm_cell_step(tape, layer, tape.constant(Tensor(Shape{1, 2}, Real(0.3))),
                                     h, c, std::nullopt, Real(1));
  CHECK(out.z_tilde.value()[0] == Real(1));
  CHECK(out.z.value()[0] == Real(1));
}

TEST_CASE("a copy step returns the previous state bitwise with z = 0") {
  ParameterStore store;
  HmLayer layer = HmLayer::create(store, "hm", 2, 3, 1.0);
  randomize(store, 2, 0.5);
  Tape tape(false);
  Var h = tape.constant(Tensor::matrix(1, 3, {0.1f, -0.2f, 0.3f}));
  Var c = tape.constant(Tensor::matrix(1, 3, {1.5f, 0.25f, -0.75f}));
  const HmCellOut copy = hm_cell_step(tape, layer, std::nullopt, h, c, Real(1));
  CHECK(copy.h.value() == h.value());
  CHECK(copy.c.value() == c.value());
  CHECK(copy.z.value()[0] == Real(0));
  // the batched form with a zero update row behaves the same
  const HmCellOut batched = hm_cell_step(tape, layer, tape.constant(Tensor(Shape{1, 2}, Real(1))),
                                         h, c, tape.constant(Tensor(Shape{1, 1})), Real(1));
  CHECK(batched.h.value() == h.value());
  CHECK(batched.c.value() == c.value());
  CHECK(batched.z.value()[0] == Real(0));
}

TEST_CASE("open gates reduce the stack to a plain unidirectional LSTM stack") {
  ParameterStore store;
  std::vector<HmLayer> layers;
  for (std::size_t l = 0; l < 3; ++l)
    layers.push_back(HmLayer::create(store, "hm" + std::to_string(l), l ? 4 : 3, 4, 1.0));
  randomize(store, 4, 0.4);
  for (auto& l : layers) {
    l.gate_weight->value.fill(0);
    l.gate_bias->value.fill(1);
  }
  Tape tape(false);
  Rng rng(5);
  std::vector<std::vector<double>> xs;
  for (int t = 0; t < 6; ++t) xs.push_back({uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)});
  const SequenceBatch x = sequence(tape, xs);
  const HmStackResult hm = hm_stack_forward(tape, x, layers, Real(1));
  std::vector<LstmCell> cells;
  for (auto& l : layers) cells.push_back(l.cell);
  const SequenceBatch plain = uni_lstm_stack(tape, cells, x);
  for (std::size_t t = 0; t < 6; ++t)
    CHECK(max_abs_diff(hm.h[2][t].value(), plain.steps[t].value()) < Real(1e-6));
  for (const auto& row : hm.zmatrices[0].z)
    for (auto z : row) CHECK(z == 1);
  CHECK(computation_ratio(hm.zmatrices[0]) == 1.0);
}

TEST_CASE("two-layer stack over three steps matches a hand simulation") {
  ParameterStore store;
  std::vector<HmLayer> layers{HmLayer::create(store, "a", 2, 2, 0.0),
                              HmLayer::create(store, "b", 2, 2, 0.0)};
  randomize(store, 6, 0.8);
  // first-layer gate driven by the first input feature only
  layers[0].gate_weight->value.fill(0);
  layers[0].gate_weight->value[0] = Real(1);
  layers[0].gate_bias->value[0] = Real(0);
  const std::vector<std::vector<double>> xs{{0.5, 0.1}, {-0.4, 0.2}, {0.3, -0.6}};
  Tape tape(false);
  const HmStackResult hm = hm_stack_forward(tape, sequence(tape, xs), layers, Real(1));

  auto wv = [](const Parameter* p) { return to_double(p->value); };
  std::vector<double> h1(2, 0), c1(2, 0), h2(2, 0), c2(2, 0);
  for (std::size_t t = 0; t < 3; ++t) {
    std::vector<double> joint1 = xs[t];
    joint1.insert(joint1.end(), h1.begin(), h1.end());
    oracle::lstm_step(wv(layers[0].cell.weight), wv(layers[0].cell.bias), 2, 2, xs[t], h1, c1);
    double a1 = layers[0].gate_bias->value[0];
    for (std::size_t k = 0; k < 4; ++k) a1 += joint1[k] * layers[0].gate_weight->value[k];
    const bool z1 = a1 > 0;
    bool z2 = false;
    if (z1) {
      std::vector<double> joint2 = h1;
      joint2.insert(joint2.end(), h2.begin(), h2.end());
      double a2 = layers[1].gate_bias->value[0];
      for (std::size_t k = 0; k < 4; ++k) a2 += joint2[k] * layers[1].gate_weight->value[k];
      z2 = a2 > 0;
      oracle::lstm_step(wv(layers[1].cell.weight), wv(layers[1].cell.bias), 2, 2, h1, h2, c2);
    }
    CHECK(hm.zmatrices[0].z[0][t] == (z1 ? 1 : 0));
    CHECK(hm.zmatrices[0].z[1][t] == (z2 ? 1 : 0));
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(hm.h[0][t].value()[j] == doctest::Approx(h1[j]).epsilon(1e-5));
      CHECK(hm.h[1][t].value()[j] == doctest::Approx(h2[j]).epsilon(1e-5));
      CHECK(hm.c[1][t].value()[j] == doctest::Approx(c2[j]).epsilon(1e-5));
    }
  }
  // the first input feature alternates sign, so layer 2 skips step 2
  CHECK(hm.zmatrices[0].z[0][1] == 0);
}

TEST_CASE("random stacks never violate nestedness") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    ParameterStore store;
    std::vector<HmLayer> layers;
    for (std::size_t l = 0; l < 3; ++l) layers.push_back(HmLayer::create(store, "l" + std::to_string(l), 3, 3, 0.0));
    randomize(store, seed, 2.0);
    Rng rng(seed + 100);
    std::vector<std::vector<double>> xs(12);
    for (auto& x : xs) x = {uniform(rng, -2, 2), uniform(rng, -2, 2), uniform(rng, -2, 2)};
    Tape tape(false);
    const HmStackResult hm = hm_stack_forward(tape, sequence(tape, xs), layers, Real(1));
    CHECK(hm.zmatrices[0].nestedness_violations() == 0);
  }
}

TEST_CASE("gated output with one saturated layer and identity projection is relu") {
  ParameterStore store;
  GatedOutput g = GatedOutput::create(store, "g", 1, 3, 3);
  g.gate_weight->value.fill(0);
  g.gate_bias->value.fill(40);
  g.projections[0]->value.fill(0);
  for (std::size_t i = 0; i < 3; ++i) g.projections[0]->value.at(i, i) = 1;
  Tape tape(false);
  const Var h = tape.constant(Tensor::matrix(1, 3, {0.5f, -0.25f, 2.0f}));
  const Var out = g(tape, std::span<const Var>(&h, 1));
  CHECK(out.value()[0] == doctest::Approx(0.5));
  CHECK(out.value()[1] == Real(0));
  CHECK(out.value()[2] == doctest::Approx(2.0));
}

TEST_CASE("gated output width is the model dimension for any depth") {
  for (std::size_t L = 1; L <= 4; ++L) {
    ParameterStore store;
    GatedOutput g = GatedOutput::create(store, "g", L, 3, 5);
    randomize(store, L, 0.5);
    Tape tape(false);
    std::vector<Var> hs;
    for (std::size_t l = 0; l < L; ++l) hs.push_back(tape.constant(Tensor(Shape{2, 3}, Real(0.1))));
    CHECK(g(tape, hs).shape() == Shape{2, 5});
    CHECK(g.output_dim() == 5);
  }
}

TEST_CASE("compression loss examples") {
  CompressionPenaltyConfig cfg;
  cfg.weight = 2.0;
  const double inside[] = {5}, low[] = {0}, high[] = {10};
  CHECK(compression_loss(inside, 10, cfg) == 0.0);
  CHECK(compression_loss(low, 10, cfg) == doctest::Approx(2.0));
  CHECK(compression_loss(high, 10, cfg) == doctest::Approx(2.0));
  cfg.literal = true;
  // the literal form is positive even inside the range
  CHECK(compression_loss(inside, 10, cfg) == doctest::Approx(2.0 * 4.0));
}

TEST_CASE("computation ratio of layer fractions 1, 0.6, 0.36") {
  std::vector<std::vector<unsigned char>> z(3, std::vector<unsigned char>(25, 0));
  for (std::size_t t = 0; t < 15; ++t) z[0][t] = 1;
  for (std::size_t t = 0; t < 9; ++t) z[1][t] = 1;
  const double r = computation_ratio(make_z(z));
  CHECK(r == doctest::Approx((1 + 0.6 + 0.36) / 3));
  CHECK(std::round(r * 100) / 100 == doctest::Approx(0.65));
  const std::vector<std::vector<unsigned char>> open(4, std::vector<unsigned char>(7, 1));
  CHECK(computation_ratio(make_z(open)) == 1.0);
}

TEST_CASE("computation ratio equals a direct count of update events") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t L = 1 + rng() % 4, T = 1 + rng() % 15;
    std::vector<std::vector<unsigned char>> z(L, std::vector<unsigned char>(T));
    for (std::size_t t = 0; t < T; ++t) {
      bool open = true;
      for (std::size_t l = 0; l < L; ++l) {
        open = open && (rng() % 3 != 0);
        z[l][t] = open;
      }
    }
    double events = 0;
    for (std::size_t t = 0; t < T; ++t) {
      events += 1;  // the first layer always runs
      for (std::size_t l = 0; l + 1 < L; ++l) events += z[l][t];
    }
    CHECK(computation_ratio(make_z(z)) == doctest::Approx(events / double(L * T)));
  }
}

TEST_CASE("survivors of gates [1, 0, 1, 0] feed a two-step BiLSTM") {
  HmConfig cfg;
  cfg.num_hm_layers = 1;
  cfg.hidden_dim = 2;
  cfg.num_bilstm_layers = 1;
  cfg.bilstm_dim = 2;
  cfg.projection_dim = 3;
  ParameterStore store;
  HmEncoder enc(store, cfg, 1);
  randomize(store, 9, 0.5);
  const HmLayer& layer = enc.layers()[0];
  layer.gate_weight->value.fill(0);
  layer.gate_weight->value[0] = Real(1);
  layer.gate_bias->value[0] = Real(0);
  Tape tape(false);
  Rng rng;
  const EncoderOutput out =
      enc.encode(tape, sequence(tape, {{1}, {-1}, {1}, {-1}}), false, rng, Real(1));
  CHECK(out.zmatrices[0].z[0] == std::vector<unsigned char>{1, 0, 1, 0});
  CHECK(out.per_layer_lengths[0] == std::vector<std::size_t>{4, 2});
  CHECK(out.states.shape() == Shape{1, 2, 3});
  CHECK(surviving_positions(out.zmatrices[0]) == std::vector<std::size_t>{0, 2});
}

TEST_CASE("all-open HM encoder keeps the full length at every layer") {
  HmConfig cfg;
  cfg.num_hm_layers = 2;
  cfg.hidden_dim = 3;
  cfg.num_bilstm_layers = 2;
  cfg.bilstm_dim = 2;
  cfg.projection_dim = 3;
  ParameterStore store;
  HmEncoder enc(store, cfg, 2);
  Rng rng(3);
  init_parameters(store, 0.04, rng);
  for (const auto& l : enc.layers()) l.gate_weight->value.fill(0);
  Tape tape(false);
  const EncoderOutput out =
      enc.encode(tape, sequence(tape, {{1, 0}, {0, 1}, {1, 1}, {0.5, 0.5}, {0, 0}}), false, rng,
                 Real(1));
  CHECK(out.per_layer_lengths[0] == std::vector<std::size_t>(4, 5));
}

TEST_CASE("end-to-end gradients reach the gate parameters") {
  ModelConfig m;
  m.encoder_kind = EncoderKind::kHm;
  m.embedding_dim = 4;
  m.hm.num_hm_layers = 2;
  m.hm.hidden_dim = 4;
  m.hm.num_bilstm_layers = 1;
  m.hm.bilstm_dim = 3;
  m.hm.projection_dim = 4;
  m.hm.dropout = 0;
  m.hm.penalty.weight = 1.0;
  m.decoder.num_layers = 2;
  m.decoder.model_dim = 4;
  m.decoder.dropout = 0;
  Seq2Seq model(m, 8, 8);
  Rng rng(4);
  init_parameters(model.params(), 0.5, rng);
  Batch b{{{4, 5, 6, 7, 4, 5}}, {{7, 6, 5}}};
  model.params().zero_grad();
  Tape tape;
  LossResult r = model.loss(tape, b, true, rng, Real(1));
  tape.backward(r.loss);
  for (const auto& p : model.params()) {
    if (p->name.find(".z_") == std::string::npos) continue;
    double norm = 0;
    bool finite = true;
    for (Real g : p->grad.data()) {
      finite = finite && std::isfinite(g);
      norm += std::abs(g);
    }
    INFO(p->name);
    CHECK(finite);
    CHECK(norm > 0);
  }
}

TEST_CASE("slope annealing is linear and clamps at the end") {
  SlopeSchedule s;
  CHECK(s.slope(0) == 1.0);
  CHECK(s.slope(40000) == doctest::Approx(3.0));
  CHECK(s.slope(80000) == 5.0);
  CHECK(s.slope(200000) == 5.0);
}

}  // TEST_SUITE
