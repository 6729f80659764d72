#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "charnmt/ops.hpp"

namespace charnmt::inline CHARNMT_ABI {

inline constexpr Real kLayerNormEpsilon = Real(1e-6);

// A padded batch of sequences stored step by step: steps[t] is [N x d].
// Rows are valid on the prefix t < lengths[row].
struct SequenceBatch {
  std::vector<Var> steps;
  std::vector<std::size_t> lengths;

  std::size_t batch() const noexcept { return lengths.size(); }
  std::size_t time() const noexcept { return steps.size(); }
  std::size_t dim() const { return steps.empty() ? 0 : steps.front().shape()[1]; }
  // [N x T], 1 on valid positions
  Tensor mask() const;
  // [N x 1] validity of step t
  Tensor step_mask(std::size_t t) const;
  bool all_valid(std::size_t t) const;
};

struct Linear {
  Parameter* weight = nullptr;  // [in x out]
  Parameter* bias = nullptr;    // [out]

  static Linear create(ParameterStore& store, const std::string& prefix, std::size_t in,
                       std::size_t out);
  Var operator()(Tape& tape, Var x) const;
  std::size_t in_dim() const { return weight->value.dim(0); }
  std::size_t out_dim() const { return weight->value.dim(1); }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static LayerNorm create(ParameterStore& store, const std::string& prefix, std::size_t dim);
  Var operator()(Tape& tape, Var x) const;
};

struct LstmCell {
  Parameter* weight = nullptr;  // [(in + H) x 4H], gates i, f, g, o
  Parameter* bias = nullptr;    // [4H]
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;

  static LstmCell create(ParameterStore& store, const std::string& prefix, std::size_t in,
                         std::size_t hidden);
  LstmOut step(Tape& tape, Var x, Var h_prev, Var c_prev) const;
  Var zero_state(Tape& tape, std::size_t batch) const;
};

// Forward and backward passes, concatenated per step, then layer-normalised.
// No extra output non-linearity.
struct BiLstmLayer {
  LstmCell forward;
  LstmCell backward;
  LayerNorm norm;

  static BiLstmLayer create(ParameterStore& store, const std::string& prefix,
                            std::size_t in, std::size_t hidden);
  std::size_t output_dim() const { return 2 * forward.hidden_dim; }
  SequenceBatch operator()(Tape& tape, const SequenceBatch& seq) const;
};

// Unidirectional pass; returns the per-step hidden states.
std::vector<Var> run_lstm(Tape& tape, const LstmCell& cell, const SequenceBatch& seq,
                          bool reverse = false);

// Plain stacked left-to-right recurrent network: layer l+1 reads layer l's
// hidden states. Returns the top layer.
SequenceBatch uni_lstm_stack(Tape& tape, const std::vector<LstmCell>& cells,
                             const SequenceBatch& seq);

SequenceBatch map_steps(const SequenceBatch& seq, const auto& fn) {
  SequenceBatch out{{}, seq.lengths};
  out.steps.reserve(seq.steps.size());
  for (const Var& s : seq.steps) out.steps.push_back(fn(s));
  return out;
}

// Builds a SequenceBatch of embeddings from padded id rows.
SequenceBatch embed_sequences(Var table,
                              const std::vector<std::vector<int>>& rows);

}  // namespace charnmt
