#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "charnmt/encoder.hpp"

namespace charnmt::inline CHARNMT_ABI {

// Keeps each layer's gate-open rate Z^l / T inside [alpha1, alpha2].
struct CompressionPenaltyConfig {
  double alpha1 = 0.1;
  double alpha2 = 0.9;
  double weight = 0.0;   // 0 disables the penalty
  bool literal = false;  // use max(0, Z - a1 T, a2 T - Z), positive for every count

  void validate() const;
  friend bool operator==(const CompressionPenaltyConfig&,
                         const CompressionPenaltyConfig&) = default;
};

// weight * sum_l max(0, a1 T - Z^l, Z^l - a2 T), or the literal variant.
double compression_loss(std::span<const double> counts, double length,
                        const CompressionPenaltyConfig& cfg);

// Linear annealing of the binariser slope.
struct SlopeSchedule {
  double start = 1.0;
  double end = 5.0;
  std::size_t anneal_steps = 80000;

  double slope(std::size_t step) const;
  friend bool operator==(const SlopeSchedule&, const SlopeSchedule&) = default;
};

struct HmConfig {
  std::size_t num_hm_layers = 2;
  std::size_t hidden_dim = 512;
  std::size_t num_bilstm_layers = 5;  // stacked over the surviving steps
  std::size_t bilstm_dim = 512;
  // Small-scale variant: no BiLSTM stack; the decoder attends over the gated
  // output module at every step.
  bool gated_output = false;
  std::size_t residual_start_layer = 3;
  double dropout = 0.2;
  double z_bias_init = 1.0;
  std::size_t projection_dim = 512;
  SlopeSchedule slope;
  CompressionPenaltyConfig penalty;

  void validate() const;
  friend bool operator==(const HmConfig&, const HmConfig&) = default;
};

// One HM layer: an LSTM cell plus the boundary gate
//   a = W_z [x_below; h_prev] + b_z,   z = step(a), z~ = hard_sigmoid(a).
// There is no top-down input and no flush.
struct HmLayer {
  LstmCell cell;
  Parameter* gate_weight = nullptr;  // [(in + H) x 1]
  Parameter* gate_bias = nullptr;    // [1], the z-bias

  static HmLayer create(ParameterStore& store, const std::string& prefix, std::size_t in,
                        std::size_t hidden, double z_bias_init);
};

struct HmCellOut {
  Var h;
  Var c;
  Var z;        // [N x 1] binary, straight-through gradients
  Var z_tilde;  // [N x 1] hard-sigmoid value (no gradient consumers)
};

// One batched node update. `update` [N x 1] says which rows receive input from
// below this step (absent means all). Rows without input copy (h, c) exactly
// and have z locked to 0 with no gradient through the lock.
HmCellOut hm_cell_step(Tape& tape, const HmLayer& layer, Var x_below, Var h_prev,
                       Var c_prev, std::optional<Var> update, Real slope);

// Single-node form: `x_below` absent marks a copied node.
HmCellOut hm_cell_step(Tape& tape, const HmLayer& layer, std::optional<Var> x_below,
                       Var h_prev, Var c_prev, Real slope);

struct HmStackResult {
  std::vector<std::vector<Var>> h;  // [layer][t], each [N x H]
  std::vector<std::vector<Var>> c;
  std::vector<std::vector<Var>> z;  // [layer][t], each [N x 1]
  std::vector<ZMatrix> zmatrices;   // per row, over the row's valid steps
};

// Layer 1 updates at every valid step; layer l+1 updates at t iff
// z[l][t] = 1 (reading h[l][t]), else copies. `feed_dropout` is applied to
// the state passed upward.
HmStackResult hm_stack_forward(Tape& tape, const SequenceBatch& embedded,
                               const std::vector<HmLayer>& layers, Real slope,
                               Real feed_dropout = 0, bool training = false,
                               Rng* rng = nullptr);

// relu(sum_l g_l * (h^l W_l)) with g = sigmoid(W_g [h^1; ...; h^L] + b_g).
struct GatedOutput {
  Parameter* gate_weight = nullptr;  // [(L * H) x L]
  Parameter* gate_bias = nullptr;    // [L]
  std::vector<Parameter*> projections;  // L x [H x out]

  static GatedOutput create(ParameterStore& store, const std::string& prefix,
                            std::size_t num_layers, std::size_t hidden, std::size_t out);
  Var operator()(Tape& tape, std::span<const Var> layer_states) const;
  std::size_t output_dim() const { return projections.front()->value.dim(1); }
};

// Mean over HM layers of the fraction of steps updated: 1 for layer 1,
// Z^l / T for layer l + 1.
double computation_ratio(const ZMatrix& zm);

// Positions of the top layer that survive (z = 1), or the final step alone
// when none do.
std::vector<std::size_t> surviving_positions(const ZMatrix& zm);

// HM layers replacing the lowest BiLSTM layer, with a BiLSTM stack over the
// surviving steps of the top HM layer (or the gated output at every step in
// small-scale mode), then the projection to the decoder dimension. The HM
// output (gated mix or gathered top states) is layer-normalised.
class HmEncoder {
 public:
  HmEncoder(ParameterStore& store, const HmConfig& config, std::size_t input_dim,
            const std::string& prefix = "hm_encoder");

  EncoderOutput encode(Tape& tape, const SequenceBatch& embedded, bool training, Rng& rng,
                       Real slope) const;

  const HmConfig& config() const noexcept { return config_; }
  const std::vector<HmLayer>& layers() const noexcept { return layers_; }

 private:
  HmConfig config_;
  std::vector<HmLayer> layers_;
  std::optional<GatedOutput> gated_;
  BiLstmStack stack_;
  LayerNorm output_norm_;
  Linear projection_;
};

// Gate trace: one "layer<TAB>t<TAB>z" line per entry (1-based layer and t).
void write_gate_trace(std::ostream& os, const ZMatrix& zm);

}  // namespace charnmt
