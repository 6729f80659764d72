#include "charnmt/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "charnmt/tokenize.hpp"

namespace charnmt::inline CHARNMT_ABI {

std::string to_string(EncoderKind kind) {
  return kind == EncoderKind::kHm ? "hm" : "bilstm";
}

EncoderKind parse_encoder_kind(const std::string& s) {
  if (s == "bilstm") return EncoderKind::kBiLstm;
  if (s == "hm") return EncoderKind::kHm;
  throw ConfigError("unknown encoder kind '" + s + "' (expected bilstm or hm)");
}

void ModelConfig::validate() const {
  if (embedding_dim < 1) throw ConfigError("model: zero embedding_dim");
  if (encoder_kind == EncoderKind::kBiLstm)
    encoder.validate();
  else
    hm.validate();
  decoder.validate();
}

std::size_t max_output_length(std::size_t length, double factor) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(factor * length)));
}

std::vector<double> log_softmax(std::span<const Real> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Real v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0;
  for (Real v : logits) z += std::exp(static_cast<double>(v) - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<double>(logits[i]) - lz;
  return out;
}

Seq2Seq::Seq2Seq(const ModelConfig& config, std::size_t source_vocab, std::size_t target_vocab)
    : config_(config), source_vocab_(source_vocab), target_vocab_(target_vocab) {
  config_.validate();
  if (source_vocab <= kNumSpecials || target_vocab <= kNumSpecials)
    throw ConfigError("model: vocabularies must contain tokens beyond the specials");
  source_embedding_ =
      &params_.add("source_embedding", Shape{source_vocab, config_.embedding_dim});
  std::size_t memory_dim = 0;
  if (config_.encoder_kind == EncoderKind::kBiLstm) {
    encoder_ = std::make_unique<Encoder>(params_, config_.encoder, config_.embedding_dim);
    memory_dim = config_.encoder.projection_dim;
  } else {
    hm_ = std::make_unique<HmEncoder>(params_, config_.hm, config_.embedding_dim);
    memory_dim = config_.hm.projection_dim;
  }
  decoder_ = std::make_unique<Decoder>(params_, config_.decoder, memory_dim, target_vocab);
}

EncoderOutput Seq2Seq::encode(Tape& tape, const std::vector<std::vector<int>>& source,
                              bool training, Rng& rng, Real slope) const {
  for (const auto& s : source)
    if (s.empty()) throw DataError("empty source sentence");
  SequenceBatch emb = embed_sequences(tape.param(*source_embedding_), source);
  if (encoder_) {
    const Real rate = static_cast<Real>(config_.encoder.dropout);
    emb = map_steps(emb, [&](Var v) { return dropout(v, rate, training, rng); });
    return encoder_->encode(tape, emb, training, rng);
  }
  const Real rate = static_cast<Real>(config_.hm.dropout);
  emb = map_steps(emb, [&](Var v) { return dropout(v, rate, training, rng); });
  return hm_->encode(tape, emb, training, rng, slope);
}

LossResult Seq2Seq::loss(Tape& tape, const Batch& batch, bool training, Rng& rng,
                         Real slope) const {
  CHARNMT_REQUIRE(batch.source.size() == batch.target.size() && batch.size() > 0,
                  "loss: source and target batch sizes differ");
  const std::size_t N = batch.size();
  LossResult r;
  r.encoder = encode(tape, batch.source, training, rng, slope);
  AttentionMemory memory = decoder_->prepare(tape, r.encoder);
  DecoderState state = decoder_->initial_state(tape, N);

  std::size_t steps = 0;
  for (const auto& t : batch.target) steps = std::max(steps, t.size() + 1);
  std::vector<int> prev(N), gold(N);
  std::vector<Real> weight(N);
  std::vector<Var> terms;
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t n = 0; n < N; ++n) {
      const auto& y = batch.target[n];
      prev[n] = t == 0 ? kBosId : (t <= y.size() ? y[t - 1] : kPadId);
      gold[n] = t < y.size() ? y[t] : (t == y.size() ? kEosId : kPadId);
      weight[n] = t <= y.size() ? Real(1) : Real(0);
      if (t <= y.size()) ++r.target_tokens;
    }
    DecoderStepOutput out = decoder_->step(tape, prev, state, memory, training, rng);
    terms.push_back(cross_entropy(out.logits, gold, weight));
    state = std::move(out.state);
  }
  r.loss = add_n(terms);
  r.cross_entropy = static_cast<double>(r.loss.value().item());
  if (r.encoder.compression_loss) {
    r.compression = static_cast<double>(r.encoder.compression_loss->value().item());
    r.loss = add(r.loss, *r.encoder.compression_loss);
  }
  return r;
}

namespace {

Tensor gather_value_rows(const Tensor& x, std::span<const std::size_t> rows) {
  const std::size_t width = x.size() / x.dim(0);
  Shape s = x.shape();
  s[0] = rows.size();
  Tensor out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.ptr() + rows[i] * width, width, out.ptr() + i * width);
  return out;
}

class ModelScorer final : public StepScorer {
 public:
  ModelScorer(const Seq2Seq& model, const std::vector<int>& source)
      : model_(model), tape_(false), source_length_(0) {
    EncoderOutput enc = model_.encode(tape_, {source}, false, rng_, Real(1));
    source_length_ = enc.lengths.front();
    base_ = model_.decoder().prepare(tape_, enc);
    memory_ = base_;
    state_ = model_.decoder().initial_state(tape_, 1);
  }

  std::size_t vocab_size() const override { return model_.target_vocab(); }
  std::size_t source_length() const override { return source_length_; }

  void step(std::span<const int> prev_tokens, std::vector<std::vector<double>>& log_probs,
            std::vector<std::vector<double>>& attention) override {
    const std::size_t K = prev_tokens.size();
    if (memory_.mask.dim(0) != K) {
      memory_.keys = tile_rows(base_.keys, K);
      memory_.values = tile_rows(base_.values, K);
      memory_.mask = Tensor(Shape{K, source_length_}, Real(1));
    }
    CHARNMT_REQUIRE(state_.h.front().shape()[0] == K, "scorer: state/beam size mismatch");
    DecoderStepOutput out = model_.decoder().step(tape_, prev_tokens, state_, memory_, false, rng_);
    const Tensor& logits = out.logits.value();
    const Tensor& att = out.attention.value();
    const std::size_t V = logits.cols();
    log_probs.resize(K);
    attention.resize(K);
    for (std::size_t k = 0; k < K; ++k) {
      log_probs[k] = log_softmax(std::span<const Real>(logits.ptr() + k * V, V));
      attention[k].assign(att.ptr() + k * source_length_, att.ptr() + (k + 1) * source_length_);
    }
    pending_ = std::move(out.state);
  }

  void reorder(std::span<const std::size_t> parents) override {
    for (std::size_t l = 0; l < pending_.h.size(); ++l) {
      state_.h[l] = tape_.constant(gather_value_rows(pending_.h[l].value(), parents));
      state_.c[l] = tape_.constant(gather_value_rows(pending_.c[l].value(), parents));
    }
  }

 private:
  const Seq2Seq& model_;
  Tape tape_;
  Rng rng_;
  std::size_t source_length_;
  AttentionMemory base_;
  AttentionMemory memory_;
  DecoderState state_;
  DecoderState pending_;
};

}  // namespace

std::unique_ptr<StepScorer> Seq2Seq::scorer(const std::vector<int>& source) const {
  return std::make_unique<ModelScorer>(*this, source);
}

BeamConfig Seq2Seq::beam_config(std::size_t source_length) const {
  BeamConfig bc;
  bc.beam_size = config_.decoder.beam_size;
  bc.coverage_penalty = config_.decoder.coverage_penalty;
  bc.length_norm = config_.decoder.length_norm;
  bc.max_length = max_output_length(source_length, config_.decoder.max_output_factor);
  bc.banned = {kPadId, kBosId};
  return bc;
}

BeamResult Seq2Seq::translate(const std::vector<int>& source, const BeamConfig& config) const {
  auto s = scorer(source);
  return beam_search(*s, config);
}

std::vector<std::vector<int>> Seq2Seq::greedy(const std::vector<std::vector<int>>& sources,
                                              double max_output_factor) const {
  const std::size_t N = sources.size();
  std::vector<std::vector<int>> out(N);
  if (N == 0) return out;
  Tape tape(false);
  Rng rng;
  EncoderOutput enc = encode(tape, sources, false, rng, Real(1));
  AttentionMemory memory = decoder_->prepare(tape, enc);
  DecoderState state = decoder_->initial_state(tape, N);
  std::vector<std::size_t> limit(N);
  std::size_t steps = 0;
  for (std::size_t n = 0; n < N; ++n) {
    limit[n] = max_output_length(sources[n].size(), max_output_factor);
    steps = std::max(steps, limit[n]);
  }
  std::vector<bool> done(N, false);
  std::vector<int> prev(N, kBosId);
  for (std::size_t t = 0; t < steps; ++t) {
    DecoderStepOutput o = decoder_->step(tape, prev, state, memory, false, rng);
    const Tensor& logits = o.logits.value();
    const std::size_t V = logits.cols();
    bool all_done = true;
    for (std::size_t n = 0; n < N; ++n) {
      if (done[n]) continue;
      int best = kEosId;
      Real best_v = -std::numeric_limits<Real>::infinity();
      for (std::size_t v = 0; v < V; ++v) {
        if (v == static_cast<std::size_t>(kPadId) || v == static_cast<std::size_t>(kBosId))
          continue;
        if (logits.at(n, v) > best_v) {
          best_v = logits.at(n, v);
          best = static_cast<int>(v);
        }
      }
      prev[n] = best;
      if (best == kEosId || t + 1 >= limit[n]) done[n] = true;
      if (best != kEosId) out[n].push_back(best);
      all_done = all_done && done[n];
    }
    if (all_done) break;
    state = std::move(o.state);
  }
  return out;
}

}  // namespace charnmt
