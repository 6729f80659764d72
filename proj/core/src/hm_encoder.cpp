#include "charnmt/hm_encoder.hpp"

#include <algorithm>
#include <array>
#include <ostream>

namespace charnmt::inline CHARNMT_ABI {

void CompressionPenaltyConfig::validate() const {
  if (!(0 <= alpha1 && alpha1 < alpha2 && alpha2 <= 1))
    throw ConfigError("compression penalty: need 0 <= alpha1 < alpha2 <= 1");
  if (weight < 0) throw ConfigError("compression penalty: weight must be >= 0");
}

double compression_loss(std::span<const double> counts, double length,
                        const CompressionPenaltyConfig& cfg) {
  double total = 0;
  for (double Z : counts) {
    if (Z < 0 || Z > length)
      throw ContractViolation("compression_loss: count " + std::to_string(Z) +
                              " outside [0, " + std::to_string(length) + "]");
    double term;
    if (cfg.literal)
      term = std::max({0.0, Z - cfg.alpha1 * length, cfg.alpha2 * length - Z});
    else
      term = std::max({0.0, cfg.alpha1 * length - Z, Z - cfg.alpha2 * length});
    total += term;
  }
  return cfg.weight * total;
}

double SlopeSchedule::slope(std::size_t step) const {
  if (anneal_steps == 0 || step >= anneal_steps) return end;
  return start + (end - start) * static_cast<double>(step) / static_cast<double>(anneal_steps);
}

void HmConfig::validate() const {
  if (num_hm_layers < 1) throw ConfigError("hm: need at least one HM layer");
  if (hidden_dim < 1 || projection_dim < 1 || bilstm_dim < 1)
    throw ConfigError("hm: zero dimension");
  if (dropout < 0 || dropout >= 1) throw ConfigError("hm: dropout must be in [0, 1)");
  if (slope.start <= 0 || slope.end < slope.start)
    throw ConfigError("hm: slope schedule must satisfy 0 < start <= end");
  penalty.validate();
}

HmLayer HmLayer::create(ParameterStore& store, const std::string& prefix, std::size_t in,
                        std::size_t hidden, double z_bias_init) {
  HmLayer l;
  l.cell = LstmCell::create(store, prefix + ".cell", in, hidden);
  l.gate_weight = &store.add(prefix + ".z_weight", Shape{in + hidden, 1});
  l.gate_bias = &store.add(prefix + ".z_bias", Shape{1}, InitKind::kConstant,
                           static_cast<Real>(z_bias_init));
  return l;
}

HmCellOut hm_cell_step(Tape& tape, const HmLayer& layer, Var x_below, Var h_prev,
                       Var c_prev, std::optional<Var> update, Real slope) {
  const std::array<Var, 2> xs{x_below, h_prev};
  Var joint = concat_cols(xs);
  Var pre = add_row_bias(matmul(joint, tape.param(*layer.cell.weight)),
                         tape.param(*layer.cell.bias));
  LstmOut next = lstm_pointwise(pre, c_prev);
  Var gate_pre = add_row_bias(matmul(joint, tape.param(*layer.gate_weight)),
                              tape.param(*layer.gate_bias));
  Var z = straight_through_step(gate_pre, slope);
  Tensor zt = gate_pre.value();
  for (auto& v : zt.data()) v = std::clamp((slope * v + Real(1)) / Real(2), Real(0), Real(1));

  HmCellOut out{next.h, next.c, z, Var{}};
  if (update) {
    out.h = blend(*update, next.h, h_prev);
    out.c = blend(*update, next.c, c_prev);
    Var lock = detach(*update);
    out.z = mul(z, lock);
    const Tensor& u = lock.value();
    for (std::size_t r = 0; r < zt.size(); ++r) zt[r] *= u[r];
  }
  out.z_tilde = tape.constant(std::move(zt));
  return out;
}

HmCellOut hm_cell_step(Tape& tape, const HmLayer& layer, std::optional<Var> x_below,
                       Var h_prev, Var c_prev, Real slope) {
  if (!x_below) {
    const std::size_t n = h_prev.shape()[0];
    return {h_prev, c_prev, tape.constant(Tensor(Shape{n, 1})),
            tape.constant(Tensor(Shape{n, 1}))};
  }
  return hm_cell_step(tape, layer, *x_below, h_prev, c_prev, std::nullopt, slope);
}

HmStackResult hm_stack_forward(Tape& tape, const SequenceBatch& embedded,
                               const std::vector<HmLayer>& layers, Real slope,
                               Real feed_dropout, bool training, Rng* rng) {
  CHARNMT_REQUIRE(!layers.empty(), "hm_stack_forward: no layers");
  CHARNMT_REQUIRE(embedded.time() >= 1, "hm_stack_forward: empty sequence");
  const std::size_t L = layers.size(), T = embedded.time(), N = embedded.batch();
  HmStackResult res;
  res.h.assign(L, std::vector<Var>(T));
  res.c.assign(L, std::vector<Var>(T));
  res.z.assign(L, std::vector<Var>(T));
  std::vector<std::vector<Var>> zt(L, std::vector<Var>(T));
  std::vector<Var> h(L), c(L);
  for (std::size_t l = 0; l < L; ++l) h[l] = c[l] = layers[l].cell.zero_state(tape, N);

  for (std::size_t t = 0; t < T; ++t) {
    Var x = embedded.steps[t];
    std::optional<Var> update;
    if (!embedded.all_valid(t)) update = tape.constant(embedded.step_mask(t));
    for (std::size_t l = 0; l < L; ++l) {
      HmCellOut o = hm_cell_step(tape, layers[l], x, h[l], c[l], update, slope);
      h[l] = res.h[l][t] = o.h;
      c[l] = res.c[l][t] = o.c;
      res.z[l][t] = o.z;
      zt[l][t] = o.z_tilde;
      x = (training && rng) ? dropout(o.h, feed_dropout, training, *rng) : o.h;
      update = o.z;
    }
  }

  res.zmatrices.resize(N);
  for (std::size_t r = 0; r < N; ++r) {
    ZMatrix& zm = res.zmatrices[r];
    const std::size_t len = embedded.lengths[r];
    zm.z.assign(L, std::vector<unsigned char>(len));
    zm.z_tilde.assign(L, std::vector<double>(len));
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t t = 0; t < len; ++t) {
        zm.z[l][t] = res.z[l][t].value()[r] > Real(0.5) ? 1 : 0;
        zm.z_tilde[l][t] = zt[l][t].value()[r];
      }
  }
  return res;
}

GatedOutput GatedOutput::create(ParameterStore& store, const std::string& prefix,
                                std::size_t num_layers, std::size_t hidden,
                                std::size_t out) {
  GatedOutput g;
  g.gate_weight = &store.add(prefix + ".gate_weight", Shape{num_layers * hidden, num_layers});
  g.gate_bias = &store.add(prefix + ".gate_bias", Shape{num_layers});
  for (std::size_t l = 0; l < num_layers; ++l)
    g.projections.push_back(
        &store.add(prefix + ".proj" + std::to_string(l + 1), Shape{hidden, out}));
  return g;
}

Var GatedOutput::operator()(Tape& tape, std::span<const Var> layer_states) const {
  CHARNMT_REQUIRE(layer_states.size() == projections.size(),
                  "gated_output: one state per layer required");
  Var joint = layer_states.size() == 1 ? layer_states[0] : concat_cols(layer_states);
  Var gates = sigmoid(add_row_bias(matmul(joint, tape.param(*gate_weight)),
                                   tape.param(*gate_bias)));
  std::vector<Var> terms;
  for (std::size_t l = 0; l < layer_states.size(); ++l) {
    Var proj = matmul(layer_states[l], tape.param(*projections[l]));
    terms.push_back(scale_rows(proj, slice_cols(gates, l, 1)));
  }
  return relu(terms.size() == 1 ? terms[0] : add_n(terms));
}

double computation_ratio(const ZMatrix& zm) {
  const std::size_t L = zm.num_layers(), T = zm.length();
  CHARNMT_REQUIRE(L >= 1 && T >= 1, "computation_ratio: empty ZMatrix");
  const auto counts = zm.counts();
  double acc = 1.0;
  for (std::size_t l = 1; l < L; ++l)
    acc += static_cast<double>(counts[l - 1]) / static_cast<double>(T);
  return acc / static_cast<double>(L);
}

std::vector<std::size_t> surviving_positions(const ZMatrix& zm) {
  CHARNMT_REQUIRE(zm.num_layers() >= 1 && zm.length() >= 1,
                  "surviving_positions: empty ZMatrix");
  std::vector<std::size_t> pos;
  const auto& top = zm.z.back();
  for (std::size_t t = 0; t < top.size(); ++t)
    if (top[t]) pos.push_back(t);
  if (pos.empty()) pos.push_back(top.size() - 1);
  return pos;
}

HmEncoder::HmEncoder(ParameterStore& store, const HmConfig& config, std::size_t input_dim,
                     const std::string& prefix)
    : config_(config) {
  config_.validate();
  std::size_t in = input_dim;
  for (std::size_t l = 0; l < config_.num_hm_layers; ++l) {
    layers_.push_back(HmLayer::create(store, prefix + ".hm" + std::to_string(l + 1), in,
                                      config_.hidden_dim, config_.z_bias_init));
    in = config_.hidden_dim;
  }
  std::size_t top_dim = config_.hidden_dim;
  if (config_.gated_output) {
    gated_ = GatedOutput::create(store, prefix + ".gated_output", config_.num_hm_layers,
                                 config_.hidden_dim, config_.hidden_dim);
  } else {
    stack_ = BiLstmStack(store, prefix + ".bilstm", config_.num_bilstm_layers,
                         config_.hidden_dim, config_.bilstm_dim,
                         config_.residual_start_layer, {}, config_.num_hm_layers + 1);
    if (config_.num_bilstm_layers > 0) top_dim = stack_.output_dim();
  }
  output_norm_ = LayerNorm::create(store, prefix + ".output_norm", config_.hidden_dim);
  projection_ = Linear::create(store, prefix + ".projection", top_dim, config_.projection_dim);
}

EncoderOutput HmEncoder::encode(Tape& tape, const SequenceBatch& embedded, bool training,
                                Rng& rng, Real slope) const {
  const Real rate = static_cast<Real>(config_.dropout);
  HmStackResult hm = hm_stack_forward(tape, embedded, layers_, slope, rate, training, &rng);
  const std::size_t N = embedded.batch(), L = layers_.size(), T = embedded.time();

  std::vector<std::vector<std::size_t>> lengths(N);
  for (std::size_t r = 0; r < N; ++r) {
    lengths[r].push_back(embedded.lengths[r]);
    const auto counts = hm.zmatrices[r].counts();
    for (std::size_t l = 0; l + 1 < L; ++l) lengths[r].push_back(counts[l]);
  }

  EncoderOutput out;
  if (config_.gated_output) {
    SequenceBatch mixed{{}, embedded.lengths};
    std::vector<Var> states(L);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t l = 0; l < L; ++l) states[l] = hm.h[l][t];
      mixed.steps.push_back(output_norm_(tape, (*gated_)(tape, states)));
    }
    out = finish_encoder_output(tape, mixed, projection_);
  } else {
    std::vector<std::vector<std::size_t>> survivors(N);
    std::size_t kmax = 0;
    for (std::size_t r = 0; r < N; ++r) {
      survivors[r] = surviving_positions(hm.zmatrices[r]);
      kmax = std::max(kmax, survivors[r].size());
    }
    SequenceBatch gathered;
    for (std::size_t r = 0; r < N; ++r) gathered.lengths.push_back(survivors[r].size());
    std::vector<std::ptrdiff_t> index(N);
    for (std::size_t k = 0; k < kmax; ++k) {
      Tensor forced(Shape{N, 1});
      for (std::size_t r = 0; r < N; ++r) {
        index[r] = k < survivors[r].size() ? static_cast<std::ptrdiff_t>(survivors[r][k]) : -1;
        if (index[r] >= 0 && !hm.zmatrices[r].z.back()[survivors[r][k]]) forced[r] = 1;
      }
      // multiplying by the (unit) gate value routes straight-through gradients
      // from the layers above into the top HM gates
      Var gate = add(gather_rows(hm.z[L - 1], index), tape.constant(std::move(forced)));
      // normalise before scaling: the norm is scale-invariant and would block
      // the gate gradient
      gathered.steps.push_back(
          scale_rows(output_norm_(tape, gather_rows(hm.h[L - 1], index)), gate));
    }
    SequenceBatch top = gathered;
    if (stack_.num_layers() > 0) top = stack_(tape, gathered, rate, training, rng, lengths);
    out = finish_encoder_output(tape, top, projection_);
  }
  out.per_layer_lengths = std::move(lengths);
  out.zmatrices = std::move(hm.zmatrices);

  if (config_.penalty.weight > 0) {
    std::vector<Var> per_layer;
    for (std::size_t l = 0; l < L; ++l) per_layer.push_back(add_n(hm.z[l]));
    Var counts = L == 1 ? per_layer[0] : concat_cols(per_layer);
    std::vector<Real> lens(embedded.lengths.begin(), embedded.lengths.end());
    out.compression_loss =
        scale(compression_penalty(counts, lens, static_cast<Real>(config_.penalty.alpha1),
                                  static_cast<Real>(config_.penalty.alpha2),
                                  config_.penalty.literal),
              static_cast<Real>(config_.penalty.weight));
  }
  return out;
}

void write_gate_trace(std::ostream& os, const ZMatrix& zm) {
  for (std::size_t l = 0; l < zm.num_layers(); ++l)
    for (std::size_t t = 0; t < zm.length(); ++t)
      os << l + 1 << '\t' << t + 1 << '\t' << static_cast<int>(zm.z[l][t]) << '\n';
}

}  // namespace charnmt
