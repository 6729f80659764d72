#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "charnmt/random.hpp"
#include "charnmt/tape.hpp"

// Differentiable primitives. Every function records its output on the tape of
// its first argument and, when any input requires gradients, a backward
// closure. Matrices are row-major; a "batch" is the leading (row) dimension.
namespace charnmt::inline CHARNMT_ABI {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, Real s);
Var add_n(std::span<const Var> xs);
// x [N x d] + bias [d]
Var add_row_bias(Var x, Var bias);
// [m x k] . [k x n]
Var matmul(Var a, Var b);
// x . w + b, with x of any rank whose last dim matches w's rows
Var affine(Var x, Var w, Var b);

Var sigmoid(Var a);
Var tanh(Var a);
Var relu(Var a);

Var sum(Var a);
// sum(a * w) for a constant weight tensor
Var dot_const(Var a, const Tensor& w);

Var reshape(Var a, Shape shape);
Var detach(Var a);

Var concat_cols(std::span<const Var> xs);
Var slice_cols(Var a, std::size_t start, std::size_t len);
// [N x d] x T -> [N x T x d]
Var stack_steps(std::span<const Var> steps);
// [1 x ...] -> [n x ...]
Var tile_rows(Var a, std::size_t n);

// Per-vector normalisation over the last dimension, then gain and bias.
Var layer_norm(Var x, Var gain, Var bias, Real epsilon);

// max(0, min(1, (slope * a + 1) / 2))
Var hard_sigmoid(Var a, Real slope);
// Forward: 1 where a > 0 else 0. Backward: the hard-sigmoid derivative
// (slope / 2 strictly inside the linear region, 0 where saturated).
Var straight_through_step(Var a, Real slope);

// Inverted dropout; identity when !training or rate == 0.
Var dropout(Var x, Real rate, bool training, Rng& rng);

struct LstmOut {
  Var h;
  Var c;
};
// Gate pre-activations [N x 4H] in (input, forget, candidate, output) order.
LstmOut lstm_pointwise(Var preact, Var c_prev);

// gate [N x 1]: gate * a + (1 - gate) * b, exact copy of a or b at 1 / 0.
Var blend(Var gate, Var a, Var b);
// x [N x d] scaled per row by s [N x 1]
Var scale_rows(Var x, Var s);

Var embedding(Var table, std::span<const int> ids);

// keys [N x T x a], query [N x a], v [a] -> scores [N x T]
Var attention_scores(Var query, Var keys, Var v);
// Softmax over positions with mask == 1; masked positions get exactly 0.
Var masked_softmax(Var scores, const Tensor& mask);
// weights [N x T], values [N x T x d] -> [N x d]
Var weighted_sum(Var weights, Var values);

// sum_n weight_n * -log softmax(logits_n)[target_n]
Var cross_entropy(Var logits, std::span<const int> targets,
                  std::span<const Real> weights);

// Sum of xs[i] weighted per row by w [N x k].
Var weighted_combine(std::span<const Var> xs, const Tensor& w);
// Elementwise max over the members with mask [N x k] == 1; zero if none.
Var masked_max(std::span<const Var> xs, const Tensor& mask);
// Row n of the result is row n of steps[index[n]]; index < 0 gives zeros.
Var gather_rows(std::span<const Var> steps, std::span<const std::ptrdiff_t> index);

// Sum over rows and layers of the rate penalty on counts [N x L] given the
// per-row sequence lengths. `literal` selects max(0, Z - a1 T, a2 T - Z),
// otherwise max(0, a1 T - Z, Z - a2 T).
Var compression_penalty(Var counts, std::span<const Real> lengths, Real alpha1,
                        Real alpha2, bool literal);

}  // namespace charnmt
