#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "charnmt/bleu.hpp"
#include "charnmt/checkpoint.hpp"
#include "charnmt/config.hpp"

namespace charnmt::inline CHARNMT_ABI {

struct ParallelCorpus {
  std::vector<std::string> source;
  std::vector<std::string> target;
};

std::vector<std::string> read_text_file(const std::string& path);
// Throws DataError when the sides differ in line count.
ParallelCorpus read_parallel(const std::string& source_path, const std::string& target_path);

struct Tokenizer {
  Vocabulary vocab;
  MergeList merges;  // empty for characters
};

// One vocabulary shared by both languages, learned from both sides.
Tokenizer build_tokenizer(const TokenizationConfig& config, const ParallelCorpus& corpus);

// Token ids per pair; an empty side is rejected with its line number.
std::vector<SentencePair> encode_pairs(const ParallelCorpus& corpus, const Vocabulary& vocab);

std::string vocab_to_string(const Vocabulary& vocab);
Vocabulary vocab_from_string(const std::string& text);

// A trained model restored from a checkpoint.
struct LoadedModel {
  RunConfig config;
  Tokenizer tokenizer;
  std::unique_ptr<Seq2Seq> model;
  CheckpointData data;
};

LoadedModel load_model(const std::string& checkpoint_path);

// Beam-search translation, one output line per input line. `beam_size`
// overrides the configured beam.
std::vector<std::string> translate_lines(const LoadedModel& m, std::span<const std::string> lines,
                                         std::optional<std::size_t> beam_size = {},
                                         std::size_t* unfinished = nullptr);

struct EvalReport {
  BleuReport bleu;
  double perplexity = 0;
  double computation_ratio = 1;  // relative to character length
  double compression_rate = 1;   // tokens per character
  std::size_t sentences = 0;
  std::size_t unfinished = 0;    // beams that never produced EOS
};

// Translates the sources, scores them against the references, and measures
// teacher-forced perplexity. `vocab` (when given) must equal the
// checkpoint's vocabulary.
EvalReport evaluate_checkpoint(const LoadedModel& m, std::span<const std::string> sources,
                               std::span<const std::string> references,
                               std::optional<std::size_t> beam_size = {},
                               const Vocabulary* vocab = nullptr);

// key=value lines
std::string format_report(const EvalReport& report);

// Index of the highest score; ties go to the later entry.
std::size_t select_best_checkpoint(std::span<const double> dev_bleu);

struct CompressionRow {
  std::string encoder;
  std::string tokenization;
  std::optional<double> bleu;
  double ratio = 1;
};

// Corpus computation ratio of one model over the given sources: per encoder
// layer, total steps run divided by total source characters, averaged over
// layers.
CompressionRow compression_row(const LoadedModel& m, std::span<const std::string> sources);
std::string format_compression_table(std::span<const CompressionRow> rows);

// Ratio from per-layer lengths already recorded by a run.
double computation_ratio_from_lengths(
    const std::vector<std::vector<std::size_t>>& per_layer_lengths,
    std::span<const std::size_t> character_lengths);

struct DropoutSweep {
  std::vector<std::pair<double, double>> tried;  // (rate, dev score)
  double best_rate = 0;
  double best_score = 0;
};

// Walks upward through `rates` while the dev score improves and stops at the
// first step that does not.
DropoutSweep sweep_dropout(std::span<const double> rates,
                           const std::function<double(double)>& score);

void set_dropout(RunConfig& config, double rate);

struct TrainingRunResult {
  std::string final_checkpoint;
  std::size_t steps = 0;
  double best_dev_ppl = 0;
  bool resumed = false;
};

// Trains per `config`, writing step-N.ckpt and latest.ckpt into output_dir at
// every evaluation (and at the end). Resumes from latest.ckpt when present.
TrainingRunResult run_training(const RunConfig& config, std::ostream& log);

// Milliseconds per sentence of one training step for an encoder of
// `encoder_layers` BiLSTM layers over random sentences of `length` tokens.
double measure_training_msec(const ModelConfig& base, std::size_t vocab_size,
                             std::size_t encoder_layers, std::size_t length,
                             std::size_t batch, std::size_t repeats);

}  // namespace charnmt
