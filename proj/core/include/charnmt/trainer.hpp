#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "charnmt/seq2seq.hpp"

namespace charnmt::inline CHARNMT_ABI {

// ---- optimisation ----------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-6;
  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

struct OptimizerState {
  std::vector<Tensor> m;  // first moments, one per parameter
  std::vector<Tensor> v;  // second moments
  std::size_t step = 0;
};

OptimizerState make_optimizer_state(const ParameterStore& params);

// Bias-corrected Adam update of every parameter from its grad.
void adam_step(ParameterStore& params, OptimizerState& state, double lr,
               const AdamConfig& config = {});

double global_grad_norm(const ParameterStore& params);
// Rescales all gradients to max_norm when their global L2 norm exceeds it.
// Returns the norm before clipping.
double clip_gradients(ParameterStore& params, double max_norm = 5.0);

// ---- learning-rate schedule ------------------------------------------------

struct SchedulerConfig {
  double initial_lr = 0.0004;
  std::size_t halve_after = 2000;     // stagnant batches before a halving
  std::size_t halving_spacing = 2000; // minimum batches between halvings
  std::size_t stop_after = 8000;      // stagnant batches before stopping
  friend bool operator==(const SchedulerConfig&, const SchedulerConfig&) = default;
};

struct SchedulerState {
  double lr = 0.0004;
  double best_dev_ppl = std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
  std::size_t since_halving = 0;
  std::size_t halvings = 0;
  bool stop = false;
  friend bool operator==(const SchedulerState&, const SchedulerState&) = default;
};

SchedulerState initial_scheduler_state(const SchedulerConfig& config);

// Records a dev perplexity measured `batches_elapsed` batches after the
// previous call. A strict decrease resets the stagnation count. Stopping is
// checked first; otherwise the rate halves when both the stagnation count and
// the spacing since the last halving have reached their thresholds.
SchedulerState scheduler_update(SchedulerState state, double dev_ppl,
                                std::size_t batches_elapsed, const SchedulerConfig& config);

// ---- batching and initialisation ------------------------------------------

struct SentencePair {
  std::vector<int> source;
  std::vector<int> target;
  std::size_t line = 0;  // 1-based corpus line
};

// max(source, target) length of one pair
std::size_t pair_tokens(const SentencePair& p);
// Padded cost of a batch: longest pair times the number of pairs.
std::size_t padded_tokens(std::span<const SentencePair> pairs,
                          std::span<const std::size_t> batch);

// Groups length-sorted pairs greedily so that every batch's padded cost stays
// within token_cap. With a generator the batch order is shuffled; without, it
// follows increasing length. Throws DataError naming the line of any pair
// longer than token_cap.
std::vector<std::vector<std::size_t>> build_batches(std::span<const SentencePair> pairs,
                                                    std::size_t token_cap,
                                                    Rng* shuffle = nullptr);

Batch make_batch(std::span<const SentencePair> pairs, std::span<const std::size_t> indices);

// Uniform(-range, range) weights; constant / one / zero initialisers as
// declared by each parameter (z-bias, layer-norm gain and bias).
void init_parameters(ParameterStore& params, double range, Rng& rng);

// ---- timing ----------------------------------------------------------------

struct TimingPoint {
  double layers = 0;
  double msec_per_sentence = 0;
};

struct LinearFit {
  double slope = 0;
  double intercept = 0;
};

// Least-squares line through (layers, msec); needs two distinct layer counts.
LinearFit fit_timing(std::span<const TimingPoint> points);

// ---- training loop ---------------------------------------------------------

enum class LossNormalization { kPerSentence, kSum };

std::string to_string(LossNormalization n);
LossNormalization parse_loss_normalization(const std::string& s);

struct TrainingConfig {
  std::size_t token_cap = 16384;
  double init_range = 0.04;
  double clip_norm = 5.0;
  AdamConfig adam;
  SchedulerConfig scheduler;
  LossNormalization normalization = LossNormalization::kPerSentence;
  std::size_t accumulation_steps = 1;
  std::size_t eval_every = 200;
  std::size_t max_steps = 0;  // 0: until the scheduler stops
  std::size_t log_every = 100;
  std::uint64_t seed = 1;

  void validate() const;
  friend bool operator==(const TrainingConfig&, const TrainingConfig&) = default;
};

struct StepStats {
  std::size_t step = 0;
  double loss = 0;           // objective value before normalisation
  double cross_entropy = 0;
  std::size_t target_tokens = 0;
  std::size_t sentences = 0;
  double grad_norm = 0;
  double lr = 0;
};

// Everything needed to resume training exactly.
struct TrainerState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t cursor = 0;  // next batch within the epoch
  OptimizerState optimizer;
  SchedulerState scheduler;
  std::string rng;         // serialised dropout generator
};

// Per-target-token perplexity under teacher forcing, no dropout.
double evaluate_perplexity(const Seq2Seq& model, std::span<const SentencePair> pairs,
                           std::size_t token_cap);

class Trainer {
 public:
  Trainer(Seq2Seq& model, const TrainingConfig& config);

  // Fresh parameters and state from the configured seed.
  void initialize();

  // One optimiser update over the given batches (gradient accumulation).
  StepStats train_step(std::span<const Batch> batches);

  using EvalHook = std::function<void(std::size_t step, double dev_ppl)>;
  using StepHook = std::function<void(const StepStats&)>;

  struct Hooks {
    StepHook on_step;
    EvalHook on_eval;
    // Called after each evaluation; the caller may write a checkpoint.
    std::function<void()> on_checkpoint;
  };

  // Trains until the scheduler stops or max_steps is reached. Evaluates dev
  // perplexity every eval_every updates.
  void fit(std::span<const SentencePair> train, std::span<const SentencePair> dev,
           const Hooks& hooks = {});

  Real current_slope() const;
  TrainerState state() const;
  void restore(TrainerState state);
  const TrainingConfig& config() const noexcept { return config_; }
  Seq2Seq& model() noexcept { return model_; }

 private:
  std::vector<std::vector<std::size_t>> epoch_batches(std::span<const SentencePair> train,
                                                      std::size_t epoch) const;

  Seq2Seq& model_;
  TrainingConfig config_;
  TrainerState state_;
  Rng rng_;
};

}  // namespace charnmt
