#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "charnmt/layers.hpp"

namespace charnmt::inline CHARNMT_ABI {

enum class PoolMode { kConcat, kMax, kMean };

std::string to_string(PoolMode mode);
PoolMode parse_pool_mode(const std::string& s);

struct PoolingSpec {
  std::size_t after_layer = 0;  // 1-based BiLSTM layer index
  std::size_t stride = 1;
  PoolMode mode = PoolMode::kMean;

  friend bool operator==(const PoolingSpec&, const PoolingSpec&) = default;
};

struct EncoderConfig {
  std::size_t num_bilstm_layers = 6;
  std::size_t model_dim = 512;  // per-direction hidden size
  std::size_t residual_start_layer = 3;
  double dropout = 0.2;
  std::vector<PoolingSpec> pooling;
  std::size_t projection_dim = 512;

  void validate() const;
  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Per-sentence gate decisions of the HM layers.
struct ZMatrix {
  std::vector<std::vector<unsigned char>> z;  // [layer][t]
  std::vector<std::vector<double>> z_tilde;   // [layer][t]

  std::size_t num_layers() const noexcept { return z.size(); }
  std::size_t length() const noexcept { return z.empty() ? 0 : z.front().size(); }
  // Z^l = sum_t z[l][t]
  std::vector<std::size_t> counts() const;
  // number of (l >= 2, t) entries violating z[l][t] = 1 => z[l-1][t] = 1
  std::size_t nestedness_violations() const;
};

struct EncoderOutput {
  Var states;                       // [N x T' x projection_dim]
  std::vector<std::size_t> lengths; // valid T' per row
  Tensor mask;                      // [N x T']
  // per row: the sequence length each encoder layer ran over
  std::vector<std::vector<std::size_t>> per_layer_lengths;
  std::vector<ZMatrix> zmatrices;   // HM encoders only
  std::optional<Var> compression_loss;  // weighted, summed over rows
};

// Non-overlapping windows of `stride` steps; a shorter tail window reduces
// over the steps it has (concat zero-pads). Padded rows only pool their valid
// members; a pooled step is valid if any member is.
SequenceBatch pool_sequence(Tape& tape, const SequenceBatch& seq, std::size_t stride,
                            PoolMode mode);
// Single-sequence convenience on plain tensors [T x d].
Tensor pool_layer(const Tensor& seq, std::size_t stride, PoolMode mode);

// Mean over layers of length / baseline_length.
double average_computation_ratio(std::span<const std::size_t> per_layer_lengths,
                                 std::size_t baseline_length);
// Corpus form: mean over layers of (sum of layer lengths / sum of baselines).
double corpus_computation_ratio(const std::vector<std::vector<std::size_t>>& per_layer_lengths,
                                std::span<const std::size_t> baseline_lengths);

// Lengths each layer would see for input length T under a pooling schedule.
std::vector<std::size_t> pooled_layer_lengths(const EncoderConfig& cfg, std::size_t T);

// Stack of BiLSTM layers with dropout, residuals from residual_start_layer
// upward where dimensions match, pooling as configured, and a final affine
// projection to projection_dim.
class BiLstmStack {
 public:
  BiLstmStack() = default;
  // `first_layer_index` is the 1-based depth of the first BiLSTM layer within
  // the whole encoder (residual numbering counts any layers below it).
  BiLstmStack(ParameterStore& store, const std::string& prefix, std::size_t num_layers,
              std::size_t input_dim, std::size_t hidden_dim, std::size_t residual_start,
              std::vector<PoolingSpec> pooling, std::size_t first_layer_index = 1);

  // Returns the top sequence; appends each layer's per-row length.
  SequenceBatch operator()(Tape& tape, const SequenceBatch& input, Real dropout_rate,
                           bool training, Rng& rng,
                           std::vector<std::vector<std::size_t>>& per_layer_lengths) const;

  std::size_t output_dim() const noexcept { return output_dim_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  bool residual_at(std::size_t i) const { return residual_[i]; }

 private:
  std::vector<BiLstmLayer> layers_;
  std::vector<bool> residual_;
  std::vector<std::optional<PoolingSpec>> pool_after_;
  std::size_t output_dim_ = 0;
};

// The deep bidirectional encoder, optionally with fixed-stride pooling.
class Encoder {
 public:
  Encoder(ParameterStore& store, const EncoderConfig& config, std::size_t input_dim,
          const std::string& prefix = "encoder");

  EncoderOutput encode(Tape& tape, const SequenceBatch& embedded, bool training,
                       Rng& rng) const;
  const EncoderConfig& config() const noexcept { return config_; }

 private:
  EncoderConfig config_;
  BiLstmStack stack_;
  Linear projection_;
};

// Stacks projected per-step states into an EncoderOutput.
EncoderOutput finish_encoder_output(Tape& tape, const SequenceBatch& top,
                                    const Linear& projection);

}  // namespace charnmt
