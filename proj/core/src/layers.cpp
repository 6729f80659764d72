#include "charnmt/layers.hpp"

#include <algorithm>
#include <array>

namespace charnmt::inline CHARNMT_ABI {

Tensor SequenceBatch::mask() const {
  Tensor m(Shape{batch(), time()});
  for (std::size_t r = 0; r < batch(); ++r)
    for (std::size_t t = 0; t < std::min(lengths[r], time()); ++t) m[r * time() + t] = 1;
  return m;
}

Tensor SequenceBatch::step_mask(std::size_t t) const {
  Tensor m(Shape{batch(), 1});
  for (std::size_t r = 0; r < batch(); ++r) m[r] = t < lengths[r] ? Real(1) : Real(0);
  return m;
}

bool SequenceBatch::all_valid(std::size_t t) const {
  return std::all_of(lengths.begin(), lengths.end(), [t](std::size_t l) { return t < l; });
}

Linear Linear::create(ParameterStore& store, const std::string& prefix, std::size_t in,
                      std::size_t out) {
  Linear l;
  l.weight = &store.add(prefix + ".weight", Shape{in, out});
  l.bias = &store.add(prefix + ".bias", Shape{out});
  return l;
}

Var Linear::operator()(Tape& tape, Var x) const {
  return affine(x, tape.param(*weight), tape.param(*bias));
}

LayerNorm LayerNorm::create(ParameterStore& store, const std::string& prefix,
                            std::size_t dim) {
  LayerNorm n;
  n.gain = &store.add(prefix + ".gain", Shape{dim}, InitKind::kOnes);
  n.bias = &store.add(prefix + ".bias", Shape{dim}, InitKind::kZeros);
  return n;
}

Var LayerNorm::operator()(Tape& tape, Var x) const {
  return layer_norm(x, tape.param(*gain), tape.param(*bias), kLayerNormEpsilon);
}

LstmCell LstmCell::create(ParameterStore& store, const std::string& prefix, std::size_t in,
                          std::size_t hidden) {
  LstmCell c;
  c.weight = &store.add(prefix + ".weight", Shape{in + hidden, 4 * hidden});
  c.bias = &store.add(prefix + ".bias", Shape{4 * hidden});
  c.input_dim = in;
  c.hidden_dim = hidden;
  return c;
}

LstmOut LstmCell::step(Tape& tape, Var x, Var h_prev, Var c_prev) const {
  const std::array<Var, 2> xs{x, h_prev};
  Var pre = add_row_bias(matmul(concat_cols(xs), tape.param(*weight)), tape.param(*bias));
  return lstm_pointwise(pre, c_prev);
}

Var LstmCell::zero_state(Tape& tape, std::size_t batch) const {
  return tape.constant(Tensor(Shape{batch, hidden_dim}));
}

std::vector<Var> run_lstm(Tape& tape, const LstmCell& cell, const SequenceBatch& seq,
                          bool reverse) {
  const std::size_t T = seq.time();
  std::vector<Var> out(T);
  Var h = cell.zero_state(tape, seq.batch());
  Var c = h;
  for (std::size_t k = 0; k < T; ++k) {
    const std::size_t t = reverse ? T - 1 - k : k;
    LstmOut next = cell.step(tape, seq.steps[t], h, c);
    if (seq.all_valid(t)) {
      h = next.h;
      c = next.c;
    } else {
      // padded rows keep their state; in reverse this keeps them at zero
      // until the row's last valid step is reached
      Var m = tape.constant(seq.step_mask(t));
      h = blend(m, next.h, h);
      c = blend(m, next.c, c);
    }
    out[t] = h;
  }
  return out;
}

BiLstmLayer BiLstmLayer::create(ParameterStore& store, const std::string& prefix,
                                std::size_t in, std::size_t hidden) {
  BiLstmLayer l;
  l.forward = LstmCell::create(store, prefix + ".fwd", in, hidden);
  l.backward = LstmCell::create(store, prefix + ".bwd", in, hidden);
  l.norm = LayerNorm::create(store, prefix + ".norm", 2 * hidden);
  return l;
}

SequenceBatch BiLstmLayer::operator()(Tape& tape, const SequenceBatch& seq) const {
  CHARNMT_REQUIRE(seq.time() >= 1, "bilstm_layer: empty sequence");
  auto fwd = run_lstm(tape, forward, seq, false);
  auto bwd = run_lstm(tape, backward, seq, true);
  SequenceBatch out{{}, seq.lengths};
  out.steps.reserve(seq.time());
  for (std::size_t t = 0; t < seq.time(); ++t) {
    const std::array<Var, 2> both{fwd[t], bwd[t]};
    out.steps.push_back(norm(tape, concat_cols(both)));
  }
  return out;
}

SequenceBatch uni_lstm_stack(Tape& tape, const std::vector<LstmCell>& cells,
                             const SequenceBatch& seq) {
  SequenceBatch cur = seq;
  for (const auto& cell : cells) cur.steps = run_lstm(tape, cell, cur, false);
  return cur;
}

SequenceBatch embed_sequences(Var table,
                              const std::vector<std::vector<int>>& rows) {
  SequenceBatch seq;
  std::size_t T = 0;
  for (const auto& r : rows) {
    seq.lengths.push_back(r.size());
    T = std::max(T, r.size());
  }
  std::vector<int> ids(rows.size());
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t r = 0; r < rows.size(); ++r) ids[r] = t < rows[r].size() ? rows[r][t] : 0;
    seq.steps.push_back(embedding(table, ids));
  }
  return seq;
}

}  // namespace charnmt
