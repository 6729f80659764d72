#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "charnmt/encoder.hpp"

namespace charnmt::inline CHARNMT_ABI {

struct DecoderConfig {
  std::size_t num_layers = 8;
  std::size_t model_dim = 512;
  std::size_t residual_start_layer = 3;
  double dropout = 0.2;
  std::size_t beam_size = 8;
  double coverage_penalty = 0.2;
  double length_norm = 0.2;
  // Output length cap as a multiple of the source length: 3 for characters,
  // 2 for BPE fragments.
  double max_output_factor = 3.0;

  void validate() const;
  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

// score_j = v . tanh(W_q query + W_k key_j); weights = masked softmax.
struct AdditiveAttention {
  Linear query;
  Parameter* key_weight = nullptr;  // [key_dim x attn_dim]
  Parameter* v = nullptr;           // [attn_dim]

  static AdditiveAttention create(ParameterStore& store, const std::string& prefix,
                                  std::size_t query_dim, std::size_t key_dim,
                                  std::size_t attn_dim);
  // keys [N x T x key_dim] -> [N x T x attn_dim]; computed once per source.
  Var project_keys(Tape& tape, Var keys) const;
};

struct AttentionResult {
  Var context;  // [N x value_dim]
  Var weights;  // [N x T]
};

AttentionResult additive_attention(Tape& tape, const AdditiveAttention& attn, Var query,
                                   Var projected_keys, Var values, const Tensor& mask);

struct AttentionMemory {
  Var keys;    // projected, [N x T x attn_dim]
  Var values;  // [N x T x value_dim]
  Tensor mask; // [N x T]
};

struct DecoderState {
  std::vector<Var> h;
  std::vector<Var> c;
};

struct DecoderStepOutput {
  Var logits;     // [N x V]
  Var attention;  // [N x T]
  DecoderState state;
};

// Unidirectional stack. The bottom layer's output drives one attention
// computation per step; the context is concatenated to the input of every
// layer above the bottom. Layer norm on each layer output, residuals from
// residual_start_layer, dropout on embeddings and layer outputs. The context
// is not fed to the output projection.
class Decoder {
 public:
  Decoder(ParameterStore& store, const DecoderConfig& config, std::size_t memory_dim,
          std::size_t vocab_size, const std::string& prefix = "decoder");

  AttentionMemory prepare(Tape& tape, const EncoderOutput& enc) const;
  AttentionMemory prepare(Tape& tape, Var states, const Tensor& mask) const;
  DecoderState initial_state(Tape& tape, std::size_t batch) const;
  DecoderStepOutput step(Tape& tape, std::span<const int> prev_tokens,
                         const DecoderState& state, const AttentionMemory& memory,
                         bool training, Rng& rng) const;

  const DecoderConfig& config() const noexcept { return config_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }

 private:
  DecoderConfig config_;
  std::size_t vocab_size_;
  Parameter* embedding_ = nullptr;
  std::vector<LstmCell> cells_;
  std::vector<LayerNorm> norms_;
  AdditiveAttention attention_;
  Linear output_;
};

// ---- beam search -----------------------------------------------------------

// Incremental scorer for one source sentence. step() advances every active
// hypothesis by its last token; reorder() keeps the post-step states of the
// listed hypotheses (with repetition) as the new active set.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t source_length() const = 0;
  // log_probs: [K][V]; attention: [K][source_length]
  virtual void step(std::span<const int> prev_tokens,
                    std::vector<std::vector<double>>& log_probs,
                    std::vector<std::vector<double>>& attention) = 0;
  virtual void reorder(std::span<const std::size_t> parents) = 0;
};

struct BeamConfig {
  std::size_t beam_size = 8;
  double coverage_penalty = 0.2;
  double length_norm = 0.2;
  std::size_t max_length = 100;
  int bos_id = 1;
  int eos_id = 2;
  std::vector<int> banned;  // never emitted (e.g. PAD, BOS)
};

struct Hypothesis {
  std::vector<int> tokens;         // emitted tokens, EOS included when finished
  double log_prob = 0;
  std::vector<double> coverage;    // accumulated attention per source position
  bool finished = false;
  double score = 0;                // rescored objective
};

struct BeamResult {
  Hypothesis best;
  bool finished = true;            // false: no hypothesis reached EOS
  std::vector<Hypothesis> finished_pool;
};

// lp(Y) = (5 + |Y|)^alpha / 6^alpha
double length_penalty(std::size_t length, double alpha);
// beta * sum_j log(min(coverage_j, 1))
double coverage_penalty(std::span<const double> coverage, double beta);
// log_prob / lp(Y) + cp(X; Y)
double rescore(double log_prob, std::size_t length, std::span<const double> coverage,
               double alpha, double beta);

// Length-synchronous search. Each step keeps the beam_size best expansions by
// model log-probability (ties: earlier hypothesis, then lower token id);
// expansions ending in EOS move to the finished pool and stop expanding.
BeamResult beam_search(StepScorer& scorer, const BeamConfig& config);

}  // namespace charnmt
