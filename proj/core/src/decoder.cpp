#include "charnmt/decoder.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace charnmt::inline CHARNMT_ABI {

void DecoderConfig::validate() const {
  if (num_layers < 1) throw ConfigError("decoder: need at least one layer");
  if (model_dim < 1) throw ConfigError("decoder: zero model_dim");
  if (residual_start_layer < 2) throw ConfigError("decoder: residual_start_layer must be >= 2");
  if (dropout < 0 || dropout >= 1) throw ConfigError("decoder: dropout must be in [0, 1)");
  if (beam_size < 1) throw ConfigError("decoder: beam_size must be >= 1");
  if (coverage_penalty < 0 || length_norm < 0)
    throw ConfigError("decoder: penalties must be >= 0");
  if (max_output_factor <= 0) throw ConfigError("decoder: max_output_factor must be > 0");
}

AdditiveAttention AdditiveAttention::create(ParameterStore& store, const std::string& prefix,
                                            std::size_t query_dim, std::size_t key_dim,
                                            std::size_t attn_dim) {
  AdditiveAttention a;
  a.query = Linear::create(store, prefix + ".query", query_dim, attn_dim);
  a.key_weight = &store.add(prefix + ".key_weight", Shape{key_dim, attn_dim});
  a.v = &store.add(prefix + ".v", Shape{attn_dim});
  return a;
}

Var AdditiveAttention::project_keys(Tape& tape, Var keys) const {
  const Shape s = keys.shape();
  CHARNMT_REQUIRE(s.size() == 3, "attention: keys must be [N x T x d]");
  Var flat = reshape(keys, Shape{s[0] * s[1], s[2]});
  Var proj = matmul(flat, tape.param(*key_weight));
  return reshape(proj, Shape{s[0], s[1], key_weight->value.dim(1)});
}

AttentionResult additive_attention(Tape& tape, const AdditiveAttention& attn, Var query,
                                   Var projected_keys, Var values, const Tensor& mask) {
  CHARNMT_REQUIRE(projected_keys.shape()[1] >= 1, "attention: no source positions");
  Var q = attn.query(tape, query);
  Var scores = attention_scores(q, projected_keys, tape.param(*attn.v));
  Var weights = masked_softmax(scores, mask);
  return {weighted_sum(weights, values), weights};
}

Decoder::Decoder(ParameterStore& store, const DecoderConfig& config, std::size_t memory_dim,
                 std::size_t vocab_size, const std::string& prefix)
    : config_(config), vocab_size_(vocab_size) {
  config_.validate();
  const std::size_t d = config_.model_dim;
  embedding_ = &store.add(prefix + ".embedding", Shape{vocab_size, d});
  for (std::size_t l = 0; l < config_.num_layers; ++l) {
    const std::size_t in = l == 0 ? d : d + memory_dim;
    cells_.push_back(LstmCell::create(store, prefix + ".layer" + std::to_string(l + 1), in, d));
    norms_.push_back(LayerNorm::create(store, prefix + ".norm" + std::to_string(l + 1), d));
  }
  attention_ = AdditiveAttention::create(store, prefix + ".attention", d, memory_dim, d);
  output_ = Linear::create(store, prefix + ".output", d, vocab_size);
}

AttentionMemory Decoder::prepare(Tape& tape, const EncoderOutput& enc) const {
  return prepare(tape, enc.states, enc.mask);
}

AttentionMemory Decoder::prepare(Tape& tape, Var states, const Tensor& mask) const {
  return {attention_.project_keys(tape, states), states, mask};
}

DecoderState Decoder::initial_state(Tape& tape, std::size_t batch) const {
  DecoderState s;
  Var zero = tape.constant(Tensor(Shape{batch, config_.model_dim}));
  s.h.assign(cells_.size(), zero);
  s.c.assign(cells_.size(), zero);
  return s;
}

DecoderStepOutput Decoder::step(Tape& tape, std::span<const int> prev_tokens,
                                const DecoderState& state, const AttentionMemory& memory,
                                bool training, Rng& rng) const {
  const Real rate = static_cast<Real>(config_.dropout);
  Var x = dropout(embedding(tape.param(*embedding_), prev_tokens), rate, training, rng);
  DecoderStepOutput out;
  out.state.h.resize(cells_.size());
  out.state.c.resize(cells_.size());
  Var context;
  for (std::size_t l = 0; l < cells_.size(); ++l) {
    Var input = x;
    if (l > 0) {
      const std::array<Var, 2> parts{x, context};
      input = concat_cols(parts);
    }
    LstmOut o = cells_[l].step(tape, input, state.h[l], state.c[l]);
    out.state.h[l] = o.h;
    out.state.c[l] = o.c;
    Var y = norms_[l](tape, o.h);
    if (l + 1 >= config_.residual_start_layer) y = add(y, x);
    y = dropout(y, rate, training, rng);
    if (l == 0) {
      AttentionResult a = additive_attention(tape, attention_, y, memory.keys, memory.values,
                                             memory.mask);
      context = a.context;
      out.attention = a.weights;
    }
    x = y;
  }
  out.logits = output_(tape, x);
  return out;
}

// ---- beam search -----------------------------------------------------------

double length_penalty(std::size_t length, double alpha) {
  return std::pow(5.0 + static_cast<double>(length), alpha) / std::pow(6.0, alpha);
}

double coverage_penalty(std::span<const double> coverage, double beta) {
  if (beta == 0) return 0;
  double acc = 0;
  for (double c : coverage) acc += std::log(std::min(c, 1.0));
  return beta * acc;
}

double rescore(double log_prob, std::size_t length, std::span<const double> coverage,
               double alpha, double beta) {
  return log_prob / length_penalty(length, alpha) + coverage_penalty(coverage, beta);
}

BeamResult beam_search(StepScorer& scorer, const BeamConfig& config) {
  CHARNMT_REQUIRE(config.beam_size >= 1, "beam_search: beam_size must be >= 1");
  CHARNMT_REQUIRE(scorer.source_length() >= 1, "beam_search: empty source");
  const std::size_t V = scorer.vocab_size(), S = scorer.source_length();
  std::vector<bool> banned(V, false);
  for (int b : config.banned)
    if (b >= 0 && static_cast<std::size_t>(b) < V) banned[static_cast<std::size_t>(b)] = true;

  std::vector<Hypothesis> active(1);
  active[0].coverage.assign(S, 0.0);
  BeamResult result;
  std::vector<std::vector<double>> log_probs, attention;

  struct Candidate {
    double log_prob;
    std::size_t parent;
    int token;
  };
  std::vector<Candidate> cands;

  for (std::size_t t = 0; t < config.max_length && !active.empty(); ++t) {
    std::vector<int> prev(active.size());
    for (std::size_t i = 0; i < active.size(); ++i)
      prev[i] = active[i].tokens.empty() ? config.bos_id : active[i].tokens.back();
    scorer.step(prev, log_probs, attention);

    cands.clear();
    for (std::size_t i = 0; i < active.size(); ++i)
      for (std::size_t v = 0; v < V; ++v) {
        if (banned[v]) continue;
        const double lp = log_probs[i][v];
        if (!std::isfinite(lp)) continue;
        cands.push_back({active[i].log_prob + lp, i, static_cast<int>(v)});
      }
    const std::size_t keep = std::min(config.beam_size, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep),
                      cands.end(), [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });

    std::vector<Hypothesis> next;
    std::vector<std::size_t> parents;
    for (std::size_t k = 0; k < keep; ++k) {
      const Candidate& c = cands[k];
      Hypothesis h;
      h.tokens = active[c.parent].tokens;
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      h.coverage = active[c.parent].coverage;
      for (std::size_t j = 0; j < S; ++j) h.coverage[j] += attention[c.parent][j];
      h.score = rescore(h.log_prob, h.tokens.size(), h.coverage, config.length_norm,
                        config.coverage_penalty);
      if (c.token == config.eos_id) {
        h.finished = true;
        result.finished_pool.push_back(std::move(h));
      } else {
        parents.push_back(c.parent);
        next.push_back(std::move(h));
      }
    }
    active = std::move(next);
    if (!active.empty()) scorer.reorder(parents);
  }

  auto best_of = [](const std::vector<Hypothesis>& hs) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < hs.size(); ++i)
      if (hs[i].score > hs[best].score) best = i;
    return best;
  };
  if (!result.finished_pool.empty()) {
    result.best = result.finished_pool[best_of(result.finished_pool)];
    result.finished = true;
  } else {
    CHARNMT_REQUIRE(!active.empty(), "beam_search: no hypotheses survived");
    result.best = active[best_of(active)];
    result.finished = false;
  }
  return result;
}

}  // namespace charnmt
