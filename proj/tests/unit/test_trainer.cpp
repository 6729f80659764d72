#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "charnmt/checkpoint.hpp"
#include "charnmt/trainer.hpp"

using namespace charnmt;

namespace {

ModelConfig tiny_model() {
  ModelConfig m;
  m.embedding_dim = 6;
  m.encoder.num_bilstm_layers = 2;
  m.encoder.model_dim = 4;
  m.encoder.projection_dim = 5;
  m.encoder.dropout = 0.1;
  m.decoder.num_layers = 2;
  m.decoder.model_dim = 5;
  m.decoder.dropout = 0.1;
  return m;
}

std::vector<SentencePair> random_pairs(std::size_t n, int vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SentencePair> out;
  for (std::size_t i = 0; i < n; ++i) {
    SentencePair p;
    const std::size_t len = 1 + rng() % 6;
    for (std::size_t k = 0; k < len; ++k) p.source.push_back(4 + static_cast<int>(rng() % (vocab - 4)));
    p.target.assign(p.source.rbegin(), p.source.rend());
    p.line = i + 1;
    out.push_back(std::move(p));
  }
  return out;
}

SentencePair pair_of_length(std::size_t len, std::size_t line) {
  return SentencePair{std::vector<int>(len, 4), std::vector<int>(len, 5), line};
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("charnmt_test_" + name)).string();
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("zero gradient leaves parameters unchanged") {
  ParameterStore store;
  Parameter& p = store.add("w", Shape{3});
  p.value = Tensor::vector({1, -2, 3});
  p.grad = Tensor(Shape{3});
  OptimizerState st = make_optimizer_state(store);
  adam_step(store, st, 0.1);
  CHECK(p.value == Tensor::vector({1, -2, 3}));
  CHECK(st.step == 1);
}

TEST_CASE("first Adam step moves each weight by about lr against its gradient sign") {
  ParameterStore store;
  Parameter& p = store.add("w", Shape{2});
  p.value = Tensor::vector({0.5f, 0.5f});
  p.grad = Tensor::vector({3, -0.01f});
  OptimizerState st = make_optimizer_state(store);
  adam_step(store, st, 0.01);
  CHECK(p.value[0] == doctest::Approx(0.49).epsilon(1e-5));
  CHECK(p.value[1] == doctest::Approx(0.51).epsilon(1e-4));
}

TEST_CASE("three Adam steps follow the bias-corrected recursion") {
  ParameterStore store;
  Parameter& p = store.add("w", Shape{1});
  p.value = Tensor::vector({1});
  OptimizerState st = make_optimizer_state(store);
  const double grads[] = {0.5, -0.2, 0.1};
  const double b1 = 0.9, b2 = 0.999, eps = 1e-6, lr = 0.05;
  double w = 1, m = 0, v = 0;
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    p.grad = Tensor::vector({static_cast<Real>(g)});
    adam_step(store, st, lr);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    w -= lr * mh / (std::sqrt(vh) + eps);
    CHECK(p.value[0] == doctest::Approx(w).epsilon(1e-5));
  }
}

TEST_CASE("gradient clipping") {
  ParameterStore store;
  Parameter& a = store.add("a", Shape{2});
  Parameter& b = store.add("b", Shape{1});
  SUBCASE("norm 10 is scaled to 5") {
    a.grad = Tensor::vector({6, 0});
    b.grad = Tensor::vector({8});
    CHECK(clip_gradients(store, 5.0) == doctest::Approx(10.0));
    CHECK(global_grad_norm(store) == doctest::Approx(5.0));
    CHECK(a.grad[0] == doctest::Approx(3.0));
    CHECK(b.grad[0] == doctest::Approx(4.0));
  }
  SUBCASE("norm 3 is unchanged") {
    a.grad = Tensor::vector({0, 3});
    b.grad = Tensor::vector({0});
    CHECK(clip_gradients(store, 5.0) == doctest::Approx(3.0));
    CHECK(a.grad[1] == Real(3));
  }
  SUBCASE("zero gradient stays zero") {
    a.grad = Tensor(Shape{2});
    b.grad = Tensor(Shape{1});
    CHECK(clip_gradients(store, 5.0) == 0.0);
    CHECK(global_grad_norm(store) == 0.0);
  }
}

TEST_CASE("learning rate halves after 2000 stagnant batches and training stops after 8000") {
  const SchedulerConfig cfg;
  SchedulerState s = initial_scheduler_state(cfg);
  s = scheduler_update(s, 10.0, 1000, cfg);
  s = scheduler_update(s, 9.0, 1000, cfg);
  CHECK(s.lr == doctest::Approx(4e-4));
  std::vector<double> trace;
  std::size_t stagnant = 0;
  while (!s.stop) {
    s = scheduler_update(s, 9.5, 1000, cfg);
    stagnant += 1000;
    trace.push_back(s.lr);
  }
  CHECK(stagnant == 8000);
  REQUIRE(trace.size() == 8);
  CHECK(trace[0] == doctest::Approx(4e-4));
  CHECK(trace[1] == doctest::Approx(2e-4));
  CHECK(trace[2] == doctest::Approx(2e-4));
  CHECK(trace[3] == doctest::Approx(1e-4));
  CHECK(s.best_dev_ppl == 9.0);
}

TEST_CASE("an improvement resets the stagnation count") {
  const SchedulerConfig cfg;
  SchedulerState s = initial_scheduler_state(cfg);
  s = scheduler_update(s, 10.0, 1000, cfg);
  s = scheduler_update(s, 11.0, 1000, cfg);
  s = scheduler_update(s, 9.0, 1000, cfg);
  s = scheduler_update(s, 9.0, 1000, cfg);
  CHECK(s.since_improvement == 1000);
  CHECK(s.lr == doctest::Approx(4e-4));
  CHECK_FALSE(s.stop);
}

TEST_CASE("two pairs of 10000 tokens cannot share a 16384-token batch") {
  const std::vector<SentencePair> pairs{pair_of_length(10000, 1), pair_of_length(10000, 2)};
  const auto batches = build_batches(pairs, 16384);
  CHECK(batches.size() == 2);
}

TEST_CASE("small pairs fit in one batch") {
  std::vector<SentencePair> pairs;
  for (std::size_t i = 0; i < 10; ++i) pairs.push_back(pair_of_length(5, i + 1));
  const auto batches = build_batches(pairs, 16384);
  REQUIRE(batches.size() == 1);
  CHECK(batches[0].size() == 10);
}

TEST_CASE("every batch respects the padded token cap and covers all pairs once") {
  Rng rng(4);
  std::vector<SentencePair> pairs;
  for (std::size_t i = 0; i < 200; ++i) pairs.push_back(pair_of_length(1 + rng() % 60, i + 1));
  Rng shuffle(9);
  const auto batches = build_batches(pairs, 300, &shuffle);
  std::vector<int> seen(pairs.size(), 0);
  for (const auto& b : batches) {
    std::size_t longest = 0;
    for (std::size_t i : b) {
      longest = std::max(longest, pairs[i].source.size());
      ++seen[i];
    }
    CHECK(longest * b.size() <= 300);
    CHECK(padded_tokens(pairs, b) == longest * b.size());
  }
  for (int s : seen) CHECK(s == 1);
}

TEST_CASE("an over-long pair is rejected with its line number") {
  const std::vector<SentencePair> pairs{pair_of_length(3, 1), pair_of_length(40, 7)};
  try {
    build_batches(pairs, 20);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("line 7") != std::string::npos);
  }
}

TEST_CASE("initialisation range and special initialisers") {
  ModelConfig m = tiny_model();
  m.encoder_kind = EncoderKind::kHm;
  m.hm.num_hm_layers = 2;
  m.hm.hidden_dim = 4;
  Seq2Seq model(m, 8, 8);
  Rng rng(1);
  init_parameters(model.params(), 0.04, rng);
  bool saw_z_bias = false;
  Real lo = 1, hi = -1;
  for (const auto& p : model.params()) {
    if (p->init == InitKind::kUniform)
      for (Real v : p->value.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    if (p->name.find("z_bias") != std::string::npos) {
      saw_z_bias = true;
      for (Real v : p->value.data()) CHECK(v == Real(1));
    }
  }
  CHECK(lo > Real(-0.04));
  CHECK(hi <= Real(0.04));
  CHECK(hi > Real(0.03));
  CHECK(saw_z_bias);
}

TEST_CASE("the same seed gives identical parameters") {
  ModelConfig m = tiny_model();
  Seq2Seq a(m, 8, 8), b(m, 8, 8);
  Rng ra(17), rb(17);
  init_parameters(a.params(), 0.1, ra);
  init_parameters(b.params(), 0.1, rb);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params()[i].value == b.params()[i].value);
}

TEST_CASE("timing fit recovers the slope of two points") {
  const TimingPoint pts[] = {{4, 2}, {8, 4}};
  const LinearFit f = fit_timing(pts);
  CHECK(f.slope == doctest::Approx(0.5));
  CHECK(f.intercept == doctest::Approx(0.0));
  const TimingPoint one[] = {{4, 2}, {4, 3}};
  CHECK_THROWS(fit_timing(one));
}

TEST_CASE("a training step reduces the loss on a fixed batch") {
  ModelConfig m = tiny_model();
  m.encoder.dropout = 0;
  m.decoder.dropout = 0;
  Seq2Seq model(m, 10, 10);
  TrainingConfig tc;
  tc.scheduler.initial_lr = 0.02;
  Trainer trainer(model, tc);
  const auto pairs = random_pairs(8, 10, 3);
  std::vector<std::size_t> all(pairs.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const Batch b[] = {make_batch(pairs, all)};
  const double first = trainer.train_step(b).loss;
  double last = first;
  for (int i = 0; i < 20; ++i) last = trainer.train_step(b).loss;
  CHECK(last < first);
  CHECK(trainer.state().step == 21);
}

TEST_CASE("checkpoint round trip is bitwise and resuming reproduces the run") {
  const auto train = random_pairs(60, 10, 5);
  const auto dev = random_pairs(10, 10, 6);
  TrainingConfig tc;
  tc.token_cap = 30;
  tc.eval_every = 5;
  tc.max_steps = 10;
  tc.scheduler.initial_lr = 0.01;
  const ModelConfig m = tiny_model();

  // uninterrupted reference run of 20 steps
  Seq2Seq ref_model(m, 10, 10);
  TrainingConfig long_tc = tc;
  long_tc.max_steps = 20;
  Trainer ref(ref_model, long_tc);
  ref.fit(train, dev);

  // 10 steps, checkpoint, reload into a fresh model, 10 more
  Seq2Seq first(m, 10, 10);
  Trainer t1(first, tc);
  t1.fit(train, dev);
  const std::string path = temp_path("resume.ckpt");
  CheckpointData data;
  data.config = "cfg";
  data.vocab = "vocab";
  data.trainer = t1.state();
  save_checkpoint(path, first.params(), data);

  // the trainer initialises parameters, so load after constructing it
  Seq2Seq second(m, 10, 10);
  Trainer t2(second, long_tc);
  const CheckpointData back = load_checkpoint(path, &second.params());
  std::remove(path.c_str());
  CHECK(back.config == "cfg");
  CHECK(back.vocab == "vocab");
  CHECK(back.trainer.step == 10);
  CHECK(back.trainer.scheduler == data.trainer.scheduler);
  for (std::size_t i = 0; i < first.params().size(); ++i)
    CHECK(first.params()[i].value == second.params()[i].value);
  CHECK(evaluate_perplexity(first, dev, 30) == evaluate_perplexity(second, dev, 30));

  t2.restore(back.trainer);
  t2.fit(train, dev);
  CHECK(t2.state().step == 20);
  for (std::size_t i = 0; i < ref_model.params().size(); ++i)
    CHECK(ref_model.params()[i].value == second.params()[i].value);
}

TEST_CASE("loading into a mismatched model is rejected") {
  Seq2Seq a(tiny_model(), 10, 10);
  Rng rng(1);
  init_parameters(a.params(), 0.1, rng);
  const std::string path = temp_path("mismatch.ckpt");
  save_checkpoint(path, a.params(), CheckpointData{});
  Seq2Seq b(tiny_model(), 11, 10);
  CHECK_THROWS_AS(load_checkpoint(path, &b.params()), DataError);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint(path, nullptr), std::exception);
}

}  // TEST_SUITE
