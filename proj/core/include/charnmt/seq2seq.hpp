#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "charnmt/decoder.hpp"
#include "charnmt/hm_encoder.hpp"

namespace charnmt::inline CHARNMT_ABI {

enum class EncoderKind { kBiLstm, kHm };

std::string to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(const std::string& s);

struct ModelConfig {
  EncoderKind encoder_kind = EncoderKind::kBiLstm;
  std::size_t embedding_dim = 512;
  EncoderConfig encoder;
  HmConfig hm;
  DecoderConfig decoder;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// One batch of id sequences. Targets exclude BOS/EOS; the model adds them.
struct Batch {
  std::vector<std::vector<int>> source;
  std::vector<std::vector<int>> target;
  std::size_t size() const noexcept { return source.size(); }
};

struct LossResult {
  Var loss;                      // summed cross-entropy (+ weighted compression loss)
  double cross_entropy = 0;      // summed over target tokens
  double compression = 0;        // weighted compression loss, 0 when disabled
  std::size_t target_tokens = 0; // EOS included
  EncoderOutput encoder;
};

class Seq2Seq {
 public:
  Seq2Seq(const ModelConfig& config, std::size_t source_vocab, std::size_t target_vocab);
  Seq2Seq(const Seq2Seq&) = delete;
  Seq2Seq& operator=(const Seq2Seq&) = delete;

  const ModelConfig& config() const noexcept { return config_; }
  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }
  std::size_t source_vocab() const noexcept { return source_vocab_; }
  std::size_t target_vocab() const noexcept { return target_vocab_; }

  // `slope` drives the HM straight-through estimator; ignored otherwise.
  EncoderOutput encode(Tape& tape, const std::vector<std::vector<int>>& source,
                       bool training, Rng& rng, Real slope) const;

  // Teacher-forced loss: decoder inputs are BOS y_1..y_n, targets y_1..y_n EOS.
  LossResult loss(Tape& tape, const Batch& batch, bool training, Rng& rng, Real slope) const;

  // Incremental scorer over one source sentence, for beam_search.
  std::unique_ptr<StepScorer> scorer(const std::vector<int>& source) const;

  BeamResult translate(const std::vector<int>& source, const BeamConfig& config) const;
  // Batched greedy decoding; each output stops at EOS (excluded) or max length.
  std::vector<std::vector<int>> greedy(const std::vector<std::vector<int>>& sources,
                                       double max_output_factor) const;
  // Beam configuration from the decoder settings for a source of `length`.
  BeamConfig beam_config(std::size_t source_length) const;

  const Decoder& decoder() const noexcept { return *decoder_; }
  const HmEncoder* hm_encoder() const noexcept { return hm_.get(); }

 private:
  ModelConfig config_;
  std::size_t source_vocab_;
  std::size_t target_vocab_;
  ParameterStore params_;
  Parameter* source_embedding_ = nullptr;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<HmEncoder> hm_;
  std::unique_ptr<Decoder> decoder_;
};

// Maximum output length for a source of `length` tokens.
std::size_t max_output_length(std::size_t length, double factor);

// log softmax of one logits row, in double precision.
std::vector<double> log_softmax(std::span<const Real> logits);

}  // namespace charnmt
