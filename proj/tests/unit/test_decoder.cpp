#include <doctest.h>

#include <cmath>
#include <functional>

#include "charnmt/seq2seq.hpp"
#include "charnmt/tokenize.hpp"
#include "charnmt/trainer.hpp"

using namespace charnmt;

namespace {

// Arbitrary tree-structured model: the distribution after a prefix is a
// pseudo-random function of the whole prefix.
class TreeScorer : public StepScorer {
 public:
  TreeScorer(std::size_t vocab, std::size_t source, std::uint64_t seed)
      : vocab_(vocab), source_(source), seed_(seed), states_(1, seed) {}

  std::size_t vocab_size() const override { return vocab_; }
  std::size_t source_length() const override { return source_; }

  void step(std::span<const int> prev, std::vector<std::vector<double>>& lp,
            std::vector<std::vector<double>>& att) override {
    lp.assign(prev.size(), {});
    att.assign(prev.size(), {});
    next_.clear();
    for (std::size_t k = 0; k < prev.size(); ++k) {
      const std::uint64_t s = mix(states_[k], static_cast<std::uint64_t>(prev[k]) + 1);
      next_.push_back(s);
      distribution(s, lp[k], att[k]);
    }
  }

  void reorder(std::span<const std::size_t> parents) override {
    std::vector<std::uint64_t> s;
    for (std::size_t p : parents) s.push_back(next_[p]);
    states_ = std::move(s);
  }

  // Same model evaluated on an explicit prefix (for the oracle).
  void evaluate(const std::vector<int>& tokens, int bos, double& log_prob,
                std::vector<double>& coverage) const {
    std::uint64_t s = seed_;
    int prev = bos;
    log_prob = 0;
    coverage.assign(source_, 0.0);
    for (int tok : tokens) {
      s = mix(s, static_cast<std::uint64_t>(prev) + 1);
      std::vector<double> lp, att;
      distribution(s, lp, att);
      log_prob += lp[static_cast<std::size_t>(tok)];
      for (std::size_t j = 0; j < source_; ++j) coverage[j] += att[j];
      prev = tok;
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a * 0x9E3779B97F4A7C15ULL + b * 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 31;
    x *= 0x94D049BB133111EBULL;
    return x ^ (x >> 29);
  }
  void distribution(std::uint64_t s, std::vector<double>& lp, std::vector<double>& att) const {
    Rng rng(s);
    lp.resize(vocab_);
    double z = 0;
    for (auto& v : lp) {
      v = uniform(rng, -2, 2);
      z += std::exp(v);
    }
    for (auto& v : lp) v -= std::log(z);
    att.resize(source_);
    double za = 0;
    for (auto& a : att) {
      a = std::exp(uniform(rng, -2, 2));
      za += a;
    }
    for (auto& a : att) a /= za;
  }

  std::size_t vocab_, source_;
  std::uint64_t seed_;
  std::vector<std::uint64_t> states_, next_;
};

// Best finished sequence over all sequences of at most max_length tokens.
Hypothesis exhaustive(const TreeScorer& model, const BeamConfig& cfg) {
  Hypothesis best;
  best.score = -1e300;
  std::vector<int> prefix;
  std::function<void()> rec = [&] {
    for (int v = 0; v < static_cast<int>(model.vocab_size()); ++v) {
      if (std::find(cfg.banned.begin(), cfg.banned.end(), v) != cfg.banned.end()) continue;
      prefix.push_back(v);
      if (v == cfg.eos_id) {
        double lp;
        std::vector<double> cov;
        model.evaluate(prefix, cfg.bos_id, lp, cov);
        const double score = rescore(lp, prefix.size(), cov, cfg.length_norm, cfg.coverage_penalty);
        if (score > best.score) {
          best.tokens = prefix;
          best.score = score;
          best.log_prob = lp;
        }
      } else if (prefix.size() < cfg.max_length) {
        rec();
      }
      prefix.pop_back();
    }
  };
  rec();
  return best;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.embedding_dim = 6;
  m.encoder.num_bilstm_layers = 2;
  m.encoder.model_dim = 4;
  m.encoder.projection_dim = 5;
  m.encoder.dropout = 0;
  m.decoder.num_layers = 2;
  m.decoder.model_dim = 5;
  m.decoder.dropout = 0;
  return m;
}

}  // namespace

TEST_SUITE("decoder") {

TEST_CASE("attention over a single position returns that value") {
  ParameterStore store;
  AdditiveAttention attn = AdditiveAttention::create(store, "a", 3, 2, 4);
  Rng rng(1);
  init_parameters(store, 0.5, rng);
  Tape tape(false);
  Var keys = tape.constant(Tensor(Shape{1, 1, 2}, std::vector<Real>{0.3f, -0.1f}));
  Var values = tape.constant(Tensor(Shape{1, 1, 3}, std::vector<Real>{1, 2, 3}));
  Var q = tape.constant(Tensor(Shape{1, 3}, Real(0.2)));
  const AttentionResult r =
      additive_attention(tape, attn, q, attn.project_keys(tape, keys), values, Tensor(Shape{1, 1}, 1));
  CHECK(r.weights.value()[0] == Real(1));
  CHECK(r.context.value()[2] == Real(3));
}

TEST_CASE("identical keys share the weight; masked positions get none") {
  ParameterStore store;
  AdditiveAttention attn = AdditiveAttention::create(store, "a", 2, 2, 3);
  Rng rng(2);
  init_parameters(store, 0.5, rng);
  Tape tape(false);
  Var keys = tape.constant(Tensor(Shape{1, 3, 2}, std::vector<Real>{0.4f, 0.4f, 0.4f, 0.4f, -1, 2}));
  Var values = tape.constant(Tensor(Shape{1, 3, 1}, std::vector<Real>{1, 3, 100}));
  Var q = tape.constant(Tensor(Shape{1, 2}, Real(-0.3)));
  const Tensor mask = Tensor::matrix(1, 3, {1, 1, 0});
  const AttentionResult r = additive_attention(tape, attn, q, attn.project_keys(tape, keys), values, mask);
  CHECK(r.weights.value()[0] == doctest::Approx(0.5));
  CHECK(r.weights.value()[1] == doctest::Approx(0.5));
  CHECK(r.weights.value()[2] == Real(0));
  CHECK(r.context.value()[0] == doctest::Approx(2.0));
}

TEST_CASE("decoder step emits vocabulary logits and normalised attention") {
  ModelConfig m = tiny_model();
  Seq2Seq model(m, 9, 11);
  Rng rng(3);
  init_parameters(model.params(), 0.3, rng);
  Tape tape(false);
  const EncoderOutput enc = model.encode(tape, {{4, 5, 6, 7}, {8, 4}}, false, rng, Real(1));
  const AttentionMemory mem = model.decoder().prepare(tape, enc);
  const DecoderState st = model.decoder().initial_state(tape, 2);
  const int prev[] = {kBosId, kBosId};
  const DecoderStepOutput out = model.decoder().step(tape, prev, st, mem, false, rng);
  CHECK(out.logits.shape() == Shape{2, 11});
  const Tensor& a = out.attention.value();
  double s0 = 0, s1 = 0;
  for (std::size_t j = 0; j < 4; ++j) {
    s0 += a.at(0, j);
    s1 += a.at(1, j);
  }
  CHECK(s0 == doctest::Approx(1.0));
  CHECK(s1 == doctest::Approx(1.0));
  CHECK(a.at(1, 2) == Real(0));
  CHECK(a.at(1, 3) == Real(0));
}

TEST_CASE("length penalty closed form") {
  CHECK(length_penalty(1, 0.2) == doctest::Approx(1.0));
  CHECK(length_penalty(7, 0.2) == doctest::Approx(std::pow(12.0 / 6.0, 0.2)));
  CHECK(length_penalty(9, 0.0) == 1.0);
  const double cov[] = {0.5, 2.0};
  CHECK(coverage_penalty(cov, 0.2) == doctest::Approx(0.2 * std::log(0.5)));
  CHECK(coverage_penalty(cov, 0.0) == 0.0);
}

TEST_CASE("beam size 1 without penalties is greedy decoding") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    TreeScorer beam_model(5, 3, seed), greedy_model(5, 3, seed);
    BeamConfig cfg;
    cfg.beam_size = 1;
    cfg.length_norm = 0;
    cfg.coverage_penalty = 0;
    cfg.max_length = 6;
    cfg.bos_id = 1;
    cfg.eos_id = 2;
    cfg.banned = {0, 1};
    const BeamResult r = beam_search(beam_model, cfg);

    std::vector<int> tokens;
    std::vector<std::vector<double>> lp, att;
    int prev = cfg.bos_id;
    for (std::size_t t = 0; t < cfg.max_length; ++t) {
      const int p[] = {prev};
      greedy_model.step(p, lp, att);
      int best = -1;
      for (int v = 2; v < 5; ++v)
        if (best < 0 || lp[0][static_cast<std::size_t>(v)] > lp[0][static_cast<std::size_t>(best)]) best = v;
      tokens.push_back(best);
      const std::size_t zero[] = {0};
      greedy_model.reorder(zero);
      if (best == cfg.eos_id) break;
      prev = best;
    }
    CHECK(r.best.tokens == tokens);
  }
}

TEST_CASE("three-token vocabulary, length 4, beam 8 matches exhaustive search") {
  int matches = 0;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    TreeScorer model(3, 3, seed * 7919);
    BeamConfig cfg;
    cfg.beam_size = 8;
    cfg.max_length = 4;
    cfg.bos_id = 3;  // outside the vocabulary: never emitted
    cfg.eos_id = 2;
    cfg.banned = {};
    TreeScorer search_model(3, 3, seed * 7919);
    const BeamResult r = beam_search(search_model, cfg);
    const Hypothesis oracle = exhaustive(model, cfg);
    REQUIRE(r.finished);
    matches += r.best.tokens == oracle.tokens;
    // the returned hypothesis is the best of what the beam finished
    for (const auto& h : r.finished_pool) CHECK(h.score <= r.best.score);
    // scores and log-probabilities are those of the model
    double lp;
    std::vector<double> cov;
    model.evaluate(r.best.tokens, cfg.bos_id, lp, cov);
    CHECK(r.best.log_prob == doctest::Approx(lp).epsilon(1e-12));
  }
  CHECK(matches == 30);
}

TEST_CASE("model beam of size 1 agrees with batched greedy decoding") {
  ModelConfig m = tiny_model();
  Seq2Seq model(m, 10, 10);
  Rng rng(5);
  init_parameters(model.params(), 0.8, rng);
  const std::vector<std::vector<int>> sources{{4, 5, 6}, {7, 8, 9, 4, 5}, {6}};
  const auto greedy = model.greedy(sources, 3.0);
  for (std::size_t i = 0; i < sources.size(); ++i) {
    BeamConfig cfg = model.beam_config(sources[i].size());
    cfg.beam_size = 1;
    cfg.length_norm = 0;
    cfg.coverage_penalty = 0;
    const BeamResult r = model.translate(sources[i], cfg);
    std::vector<int> tokens = r.best.tokens;
    if (!tokens.empty() && tokens.back() == kEosId) tokens.pop_back();
    CHECK(tokens == greedy[i]);
  }
}

TEST_CASE("decoding never emits padding or BOS and respects the length cap") {
  ModelConfig m = tiny_model();
  Seq2Seq model(m, 10, 10);
  Rng rng(6);
  init_parameters(model.params(), 1.0, rng);
  const std::vector<int> src{4, 5};
  const BeamResult r = model.translate(src, model.beam_config(src.size()));
  CHECK(r.best.tokens.size() <= max_output_length(2, m.decoder.max_output_factor));
  for (int t : r.best.tokens) {
    CHECK(t != kPadId);
    CHECK(t != kBosId);
  }
  CHECK(max_output_length(2, 3.0) == 6);
  CHECK(max_output_length(0, 3.0) == 1);
}

TEST_CASE("teacher-forced loss counts EOS in the target tokens") {
  ModelConfig m = tiny_model();
  Seq2Seq model(m, 10, 10);
  Rng rng(7);
  init_parameters(model.params(), 0.04, rng);
  Tape tape(false);
  Batch b{{{4, 5}, {6, 7, 8}}, {{5, 4, 9}, {8}}};
  const LossResult r = model.loss(tape, b, false, rng, Real(1));
  CHECK(r.target_tokens == 4 + 2);
  // near-uniform predictions: about ln V per token
  CHECK(r.cross_entropy / 6 == doctest::Approx(std::log(10.0)).epsilon(0.05));
}

}  // TEST_SUITE
