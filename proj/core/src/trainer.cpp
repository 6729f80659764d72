#include "charnmt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "charnmt/tokenize.hpp"

namespace charnmt::inline CHARNMT_ABI {

// ---- optimisation ----------------------------------------------------------

OptimizerState make_optimizer_state(const ParameterStore& params) {
  OptimizerState s;
  for (const auto& p : params) {
    s.m.emplace_back(p->value.shape());
    s.v.emplace_back(p->value.shape());
  }
  return s;
}

void adam_step(ParameterStore& params, OptimizerState& state, double lr,
               const AdamConfig& config) {
  if (state.m.empty() && state.v.empty()) state = make_optimizer_state(params);
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw ContractViolation("adam_step: optimizer state does not match the parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params[i];
    if (!state.m[i].same_shape(p.value) || !state.v[i].same_shape(p.value) ||
        !p.grad.same_shape(p.value))
      throw ContractViolation("adam_step: shape mismatch for " + p.name);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      const double mk = config.beta1 * m[k] + (1.0 - config.beta1) * g;
      const double vk = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
      m[k] = static_cast<Real>(mk);
      v[k] = static_cast<Real>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + config.epsilon);
      p.value[k] = static_cast<Real>(p.value[k] - update);
    }
  }
}

double global_grad_norm(const ParameterStore& params) {
  double acc = 0;
  for (const auto& p : params)
    for (Real g : p->grad.data()) acc += static_cast<double>(g) * g;
  return std::sqrt(acc);
}

double clip_gradients(ParameterStore& params, double max_norm) {
  CHARNMT_REQUIRE(max_norm > 0, "clip_gradients: max_norm must be > 0");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& p : params)
      for (Real& g : p->grad.data()) g = static_cast<Real>(g * s);
  }
  return norm;
}

// ---- learning-rate schedule ------------------------------------------------

SchedulerState initial_scheduler_state(const SchedulerConfig& config) {
  SchedulerState s;
  s.lr = config.initial_lr;
  return s;
}

SchedulerState scheduler_update(SchedulerState state, double dev_ppl,
                                std::size_t batches_elapsed, const SchedulerConfig& config) {
  CHARNMT_REQUIRE(dev_ppl > 0, "scheduler_update: perplexity must be > 0");
  if (state.stop) return state;
  state.since_halving += batches_elapsed;
  if (dev_ppl < state.best_dev_ppl) {
    state.best_dev_ppl = dev_ppl;
    state.since_improvement = 0;
  } else {
    state.since_improvement += batches_elapsed;
  }
  if (state.since_improvement >= config.stop_after) {
    state.stop = true;
  } else if (state.since_improvement >= config.halve_after &&
             state.since_halving >= config.halving_spacing) {
    state.lr /= 2;
    state.since_halving = 0;
    ++state.halvings;
  }
  return state;
}

// ---- batching and initialisation ------------------------------------------

std::size_t pair_tokens(const SentencePair& p) {
  return std::max(p.source.size(), p.target.size());
}

std::size_t padded_tokens(std::span<const SentencePair> pairs,
                          std::span<const std::size_t> batch) {
  std::size_t longest = 0;
  for (std::size_t i : batch) longest = std::max(longest, pair_tokens(pairs[i]));
  return longest * batch.size();
}

std::vector<std::vector<std::size_t>> build_batches(std::span<const SentencePair> pairs,
                                                    std::size_t token_cap, Rng* shuffle) {
  CHARNMT_REQUIRE(token_cap >= 1, "build_batches: token_cap must be >= 1");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i : order)
    if (pair_tokens(pairs[i]) > token_cap)
      throw DataError("line " + std::to_string(pairs[i].line) + ": sentence of " +
                      std::to_string(pair_tokens(pairs[i])) + " tokens exceeds token_cap " +
                      std::to_string(token_cap));
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return pair_tokens(pairs[a]) < pair_tokens(pairs[b]);
  });
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t longest = 0;
  for (std::size_t i : order) {
    const std::size_t len = std::max(longest, pair_tokens(pairs[i]));
    if (!cur.empty() && len * (cur.size() + 1) > token_cap) {
      batches.push_back(std::move(cur));
      cur.clear();
      longest = 0;
    }
    cur.push_back(i);
    longest = std::max(longest, pair_tokens(pairs[i]));
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  if (shuffle) std::shuffle(batches.begin(), batches.end(), *shuffle);
  return batches;
}

Batch make_batch(std::span<const SentencePair> pairs, std::span<const std::size_t> indices) {
  Batch b;
  for (std::size_t i : indices) {
    b.source.push_back(pairs[i].source);
    b.target.push_back(pairs[i].target);
  }
  return b;
}

void init_parameters(ParameterStore& params, double range, Rng& rng) {
  CHARNMT_REQUIRE(range > 0, "init_parameters: range must be > 0");
  std::uniform_real_distribution<double> dist(-range, range);
  for (auto& p : params) {
    switch (p->init) {
      case InitKind::kUniform:
        for (Real& v : p->value.data()) {
          double x = dist(rng);
          while (x <= -range) x = dist(rng);
          v = static_cast<Real>(x);
        }
        break;
      case InitKind::kZeros: p->value.fill(0); break;
      case InitKind::kOnes: p->value.fill(1); break;
      case InitKind::kConstant: p->value.fill(p->init_constant); break;
    }
    p->grad = Tensor(p->value.shape());
  }
}

// ---- timing ----------------------------------------------------------------

LinearFit fit_timing(std::span<const TimingPoint> points) {
  std::vector<double> xs;
  for (const auto& p : points) xs.push_back(p.layers);
  std::sort(xs.begin(), xs.end());
  if (std::unique(xs.begin(), xs.end()) - xs.begin() < 2)
    throw ContractViolation("timing report: need runs with at least 2 distinct layer counts");
  const double n = static_cast<double>(points.size());
  double mx = 0, my = 0;
  for (const auto& p : points) {
    mx += p.layers;
    my += p.msec_per_sentence;
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (const auto& p : points) {
    sxy += (p.layers - mx) * (p.msec_per_sentence - my);
    sxx += (p.layers - mx) * (p.layers - mx);
  }
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  return f;
}

// ---- training loop ---------------------------------------------------------

std::string to_string(LossNormalization n) {
  return n == LossNormalization::kSum ? "sum" : "sentence";
}

LossNormalization parse_loss_normalization(const std::string& s) {
  if (s == "sentence") return LossNormalization::kPerSentence;
  if (s == "sum") return LossNormalization::kSum;
  throw ConfigError("unknown loss normalization '" + s + "' (expected sentence or sum)");
}

void TrainingConfig::validate() const {
  if (token_cap < 1) throw ConfigError("training: token_cap must be >= 1");
  if (init_range <= 0) throw ConfigError("training: init_range must be > 0");
  if (clip_norm <= 0) throw ConfigError("training: clip_norm must be > 0");
  if (accumulation_steps < 1) throw ConfigError("training: accumulation_steps must be >= 1");
  if (eval_every < 1) throw ConfigError("training: eval_every must be >= 1");
  if (scheduler.initial_lr <= 0) throw ConfigError("training: learning rate must be > 0");
  if (adam.beta1 < 0 || adam.beta1 >= 1 || adam.beta2 < 0 || adam.beta2 >= 1 ||
      adam.epsilon <= 0)
    throw ConfigError("training: invalid Adam constants");
}

double evaluate_perplexity(const Seq2Seq& model, std::span<const SentencePair> pairs,
                           std::size_t token_cap) {
  CHARNMT_REQUIRE(!pairs.empty(), "evaluate_perplexity: empty corpus");
  double ce = 0;
  std::size_t tokens = 0;
  Rng rng;
  for (const auto& idx : build_batches(pairs, token_cap)) {
    Tape tape(false);
    LossResult r = model.loss(tape, make_batch(pairs, idx), false, rng, Real(1));
    ce += r.cross_entropy;
    tokens += r.target_tokens;
  }
  const double ppl = std::exp(ce / static_cast<double>(tokens));
  if (!std::isfinite(ppl)) throw NumericError("dev perplexity is not finite");
  return ppl;
}

Trainer::Trainer(Seq2Seq& model, const TrainingConfig& config)
    : model_(model), config_(config) {
  config_.validate();
  initialize();
}

void Trainer::initialize() {
  Rng init_rng(config_.seed);
  init_parameters(model_.params(), config_.init_range, init_rng);
  state_ = TrainerState{};
  state_.optimizer = make_optimizer_state(model_.params());
  state_.scheduler = initial_scheduler_state(config_.scheduler);
  rng_ = Rng(config_.seed ^ 0x5DEECE66DULL);
}

Real Trainer::current_slope() const {
  return static_cast<Real>(model_.config().hm.slope.slope(state_.step));
}

TrainerState Trainer::state() const {
  TrainerState s = state_;
  s.rng = rng_state(rng_);
  return s;
}

void Trainer::restore(TrainerState state) {
  if (state.optimizer.m.size() != model_.params().size())
    throw DataError("checkpoint optimizer state does not match the model");
  if (!state.rng.empty()) set_rng_state(rng_, state.rng);
  state_ = std::move(state);
}

StepStats Trainer::train_step(std::span<const Batch> batches) {
  CHARNMT_REQUIRE(!batches.empty(), "train_step: no batches");
  ParameterStore& params = model_.params();
  params.zero_grad();
  std::size_t sentences = 0;
  for (const auto& b : batches) sentences += b.size();
  const Real norm = config_.normalization == LossNormalization::kPerSentence
                        ? Real(1) / static_cast<Real>(sentences)
                        : Real(1);
  const Real slope = current_slope();
  StepStats stats;
  for (const auto& b : batches) {
    Tape tape;
    LossResult r = model_.loss(tape, b, true, rng_, slope);
    const double value = static_cast<double>(r.loss.value().item());
    if (!std::isfinite(value))
      throw NumericError("non-finite training loss at step " + std::to_string(state_.step + 1));
    stats.loss += value;
    stats.cross_entropy += r.cross_entropy;
    stats.target_tokens += r.target_tokens;
    tape.backward(norm == Real(1) ? r.loss : scale(r.loss, norm));
  }
  stats.sentences = sentences;
  stats.grad_norm = clip_gradients(params, config_.clip_norm);
  if (!std::isfinite(stats.grad_norm))
    throw NumericError("non-finite gradient norm at step " + std::to_string(state_.step + 1));
  stats.lr = state_.scheduler.lr;
  adam_step(params, state_.optimizer, stats.lr, config_.adam);
  stats.step = ++state_.step;
  return stats;
}

std::vector<std::vector<std::size_t>> Trainer::epoch_batches(
    std::span<const SentencePair> train, std::size_t epoch) const {
  Rng shuffle(config_.seed + 0x9E3779B97F4A7C15ULL * (epoch + 1));
  return build_batches(train, config_.token_cap, &shuffle);
}

void Trainer::fit(std::span<const SentencePair> train, std::span<const SentencePair> dev,
                  const Hooks& hooks) {
  CHARNMT_REQUIRE(!train.empty(), "fit: empty training corpus");
  if (dev.empty() && config_.max_steps == 0)
    throw ConfigError("training: an empty dev set requires max_steps > 0");
  std::size_t cached_epoch = state_.epoch;
  auto batches = epoch_batches(train, cached_epoch);
  while (!state_.scheduler.stop &&
         (config_.max_steps == 0 || state_.step < config_.max_steps)) {
    if (state_.cursor >= batches.size()) {
      ++state_.epoch;
      state_.cursor = 0;
    }
    if (cached_epoch != state_.epoch) {
      cached_epoch = state_.epoch;
      batches = epoch_batches(train, cached_epoch);
    }
    std::vector<Batch> group;
    while (group.size() < config_.accumulation_steps && state_.cursor < batches.size())
      group.push_back(make_batch(train, batches[state_.cursor++]));
    const StepStats stats = train_step(group);
    if (hooks.on_step) hooks.on_step(stats);
    if (state_.step % config_.eval_every == 0 && !dev.empty()) {
      const double ppl = evaluate_perplexity(model_, dev, config_.token_cap);
      state_.scheduler =
          scheduler_update(state_.scheduler, ppl, config_.eval_every, config_.scheduler);
      if (hooks.on_eval) hooks.on_eval(state_.step, ppl);
      if (hooks.on_checkpoint) hooks.on_checkpoint();
    }
  }
}

}  // namespace charnmt
