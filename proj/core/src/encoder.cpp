#include "charnmt/encoder.hpp"

#include <algorithm>
#include <numeric>

namespace charnmt::inline CHARNMT_ABI {

std::string to_string(PoolMode mode) {
  switch (mode) {
    case PoolMode::kConcat: return "concat";
    case PoolMode::kMax: return "max";
    case PoolMode::kMean: return "mean";
  }
  return "mean";
}

PoolMode parse_pool_mode(const std::string& s) {
  if (s == "concat") return PoolMode::kConcat;
  if (s == "max") return PoolMode::kMax;
  if (s == "mean") return PoolMode::kMean;
  throw ConfigError("unknown pooling mode '" + s + "' (expected concat, max or mean)");
}

void EncoderConfig::validate() const {
  if (num_bilstm_layers < 1) throw ConfigError("encoder: need at least one BiLSTM layer");
  if (model_dim < 1 || projection_dim < 1) throw ConfigError("encoder: zero dimension");
  if (residual_start_layer < 2)
    throw ConfigError("encoder: residual_start_layer must be >= 2");
  if (dropout < 0 || dropout >= 1) throw ConfigError("encoder: dropout must be in [0, 1)");
  for (const auto& p : pooling) {
    if (p.stride < 1) throw ConfigError("encoder: pooling stride must be >= 1");
    if (p.after_layer < 1 || p.after_layer > num_bilstm_layers)
      throw ConfigError("encoder: pooling after_layer out of range");
  }
}

std::vector<std::size_t> ZMatrix::counts() const {
  std::vector<std::size_t> out;
  for (const auto& row : z) out.push_back(std::accumulate(row.begin(), row.end(), std::size_t{0}));
  return out;
}

std::size_t ZMatrix::nestedness_violations() const {
  std::size_t bad = 0;
  for (std::size_t l = 1; l < z.size(); ++l)
    for (std::size_t t = 0; t < z[l].size(); ++t)
      if (z[l][t] && !z[l - 1][t]) ++bad;
  return bad;
}

SequenceBatch pool_sequence(Tape& tape, const SequenceBatch& seq, std::size_t stride,
                            PoolMode mode) {
  CHARNMT_REQUIRE(stride >= 1, "pool_layer: stride must be >= 1");
  if (stride == 1 && mode != PoolMode::kConcat) return seq;
  const std::size_t N = seq.batch(), T = seq.time(), d = seq.dim();
  SequenceBatch out;
  for (std::size_t len : seq.lengths) out.lengths.push_back((len + stride - 1) / stride);
  Var zeros;
  for (std::size_t start = 0; start < T; start += stride) {
    const std::size_t k = std::min(stride, T - start);
    std::span<const Var> members(seq.steps.data() + start, k);
    Tensor valid(Shape{N, k});
    for (std::size_t r = 0; r < N; ++r)
      for (std::size_t i = 0; i < k; ++i) valid[r * k + i] = start + i < seq.lengths[r] ? 1 : 0;
    switch (mode) {
      case PoolMode::kMean: {
        Tensor w = valid;
        for (std::size_t r = 0; r < N; ++r) {
          Real n = 0;
          for (std::size_t i = 0; i < k; ++i) n += valid[r * k + i];
          for (std::size_t i = 0; i < k; ++i) w[r * k + i] = n > 0 ? valid[r * k + i] / n : 0;
        }
        out.steps.push_back(weighted_combine(members, w));
        break;
      }
      case PoolMode::kMax:
        out.steps.push_back(masked_max(members, valid));
        break;
      case PoolMode::kConcat: {
        std::vector<Var> parts;
        for (std::size_t i = 0; i < stride; ++i) {
          if (i >= k) {
            if (!zeros.valid()) zeros = tape.constant(Tensor(Shape{N, d}));
            parts.push_back(zeros);
          } else if (seq.all_valid(start + i)) {
            parts.push_back(members[i]);
          } else {
            parts.push_back(scale_rows(members[i], tape.constant(seq.step_mask(start + i))));
          }
        }
        out.steps.push_back(concat_cols(parts));
        break;
      }
    }
  }
  return out;
}

Tensor pool_layer(const Tensor& seq, std::size_t stride, PoolMode mode) {
  CHARNMT_REQUIRE(seq.rank() == 2, "pool_layer: expected [T x d]");
  Tape tape(false);
  SequenceBatch s;
  s.lengths = {seq.dim(0)};
  for (std::size_t t = 0; t < seq.dim(0); ++t) {
    Tensor row(Shape{1, seq.dim(1)});
    std::copy_n(seq.ptr() + t * seq.dim(1), seq.dim(1), row.ptr());
    s.steps.push_back(tape.constant(std::move(row)));
  }
  SequenceBatch p = pool_sequence(tape, s, stride, mode);
  const std::size_t dout = p.dim();
  Tensor out(Shape{p.time(), dout});
  for (std::size_t t = 0; t < p.time(); ++t)
    std::copy_n(p.steps[t].value().ptr(), dout, out.ptr() + t * dout);
  return out;
}

double average_computation_ratio(std::span<const std::size_t> per_layer_lengths,
                                 std::size_t baseline_length) {
  CHARNMT_REQUIRE(baseline_length >= 1, "computation ratio: baseline length must be >= 1");
  CHARNMT_REQUIRE(!per_layer_lengths.empty(), "computation ratio: no layers");
  double acc = 0;
  for (std::size_t len : per_layer_lengths) {
    CHARNMT_REQUIRE(len <= baseline_length, "computation ratio: layer longer than baseline");
    acc += static_cast<double>(len) / static_cast<double>(baseline_length);
  }
  return acc / static_cast<double>(per_layer_lengths.size());
}

double corpus_computation_ratio(const std::vector<std::vector<std::size_t>>& per_layer_lengths,
                                std::span<const std::size_t> baseline_lengths) {
  CHARNMT_REQUIRE(per_layer_lengths.size() == baseline_lengths.size() &&
                      !per_layer_lengths.empty(),
                  "computation ratio: one baseline per sentence required");
  const std::size_t L = per_layer_lengths.front().size();
  double base = 0;
  for (std::size_t b : baseline_lengths) base += static_cast<double>(b);
  CHARNMT_REQUIRE(base > 0, "computation ratio: empty corpus");
  double acc = 0;
  for (std::size_t l = 0; l < L; ++l) {
    double layer = 0;
    for (const auto& row : per_layer_lengths) {
      CHARNMT_REQUIRE(row.size() == L, "computation ratio: ragged layer lists");
      layer += static_cast<double>(row[l]);
    }
    acc += layer / base;
  }
  return acc / static_cast<double>(L);
}

std::vector<std::size_t> pooled_layer_lengths(const EncoderConfig& cfg, std::size_t T) {
  std::vector<std::size_t> out;
  std::size_t len = T;
  for (std::size_t l = 1; l <= cfg.num_bilstm_layers; ++l) {
    out.push_back(len);
    for (const auto& p : cfg.pooling)
      if (p.after_layer == l) len = (len + p.stride - 1) / p.stride;
  }
  return out;
}

BiLstmStack::BiLstmStack(ParameterStore& store, const std::string& prefix,
                         std::size_t num_layers, std::size_t input_dim,
                         std::size_t hidden_dim, std::size_t residual_start,
                         std::vector<PoolingSpec> pooling, std::size_t first_layer_index) {
  std::size_t in = input_dim;
  for (std::size_t i = 0; i < num_layers; ++i) {
    const std::size_t depth = first_layer_index + i;
    layers_.push_back(
        BiLstmLayer::create(store, prefix + ".layer" + std::to_string(i + 1), in, hidden_dim));
    const std::size_t out = 2 * hidden_dim;
    residual_.push_back(depth >= residual_start && in == out);
    std::optional<PoolingSpec> pool;
    for (const auto& p : pooling)
      if (p.after_layer == i + 1) {
        if (pool) throw ConfigError("encoder: two pooling layers after layer " +
                                    std::to_string(i + 1));
        pool = p;
      }
    pool_after_.push_back(pool);
    in = (pool && pool->mode == PoolMode::kConcat) ? out * pool->stride : out;
  }
  output_dim_ = in;
}

SequenceBatch BiLstmStack::operator()(
    Tape& tape, const SequenceBatch& input, Real dropout_rate, bool training, Rng& rng,
    std::vector<std::vector<std::size_t>>& per_layer_lengths) const {
  SequenceBatch cur = input;
  per_layer_lengths.resize(input.batch());
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (std::size_t r = 0; r < cur.batch(); ++r) per_layer_lengths[r].push_back(cur.lengths[r]);
    SequenceBatch y = layers_[i](tape, cur);
    if (residual_[i])
      for (std::size_t t = 0; t < y.time(); ++t) y.steps[t] = add(y.steps[t], cur.steps[t]);
    y = map_steps(y, [&](Var v) { return dropout(v, dropout_rate, training, rng); });
    if (pool_after_[i]) y = pool_sequence(tape, y, pool_after_[i]->stride, pool_after_[i]->mode);
    cur = std::move(y);
  }
  return cur;
}

Encoder::Encoder(ParameterStore& store, const EncoderConfig& config, std::size_t input_dim,
                 const std::string& prefix)
    : config_(config) {
  config_.validate();
  stack_ = BiLstmStack(store, prefix + ".bilstm", config_.num_bilstm_layers, input_dim,
                       config_.model_dim, config_.residual_start_layer, config_.pooling);
  projection_ = Linear::create(store, prefix + ".projection", stack_.output_dim(),
                               config_.projection_dim);
}

EncoderOutput Encoder::encode(Tape& tape, const SequenceBatch& embedded, bool training,
                              Rng& rng) const {
  CHARNMT_REQUIRE(embedded.time() >= 1, "encode: empty input sequence");
  std::vector<std::vector<std::size_t>> lengths;
  SequenceBatch top = stack_(tape, embedded, static_cast<Real>(config_.dropout), training,
                             rng, lengths);
  EncoderOutput out = finish_encoder_output(tape, top, projection_);
  out.per_layer_lengths = std::move(lengths);
  return out;
}

EncoderOutput finish_encoder_output(Tape& tape, const SequenceBatch& top,
                                    const Linear& projection) {
  EncoderOutput out;
  out.states = projection(tape, stack_steps(top.steps));
  out.lengths = top.lengths;
  out.mask = top.mask();
  return out;
}

}  // namespace charnmt
