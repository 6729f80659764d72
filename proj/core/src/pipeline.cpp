#include "charnmt/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace charnmt::inline CHARNMT_ABI {

namespace fs = std::filesystem;

std::vector<std::string> read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_lines(in);
}

ParallelCorpus read_parallel(const std::string& source_path, const std::string& target_path) {
  ParallelCorpus c{read_text_file(source_path), read_text_file(target_path)};
  if (c.source.size() != c.target.size())
    throw DataError(source_path + " has " + std::to_string(c.source.size()) + " lines but " +
                    target_path + " has " + std::to_string(c.target.size()));
  return c;
}

Tokenizer build_tokenizer(const TokenizationConfig& config, const ParallelCorpus& corpus) {
  std::vector<std::string> both = corpus.source;
  both.insert(both.end(), corpus.target.begin(), corpus.target.end());
  if (config.kind == VocabKind::kCharacter) return {build_char_vocab(both, config.char_vocab_cap), {}};
  BpeModel bpe = learn_bpe(both, config.bpe_vocab_size);
  return {std::move(bpe.vocab), std::move(bpe.merges)};
}

std::vector<SentencePair> encode_pairs(const ParallelCorpus& corpus, const Vocabulary& vocab) {
  std::vector<SentencePair> out;
  out.reserve(corpus.source.size());
  for (std::size_t i = 0; i < corpus.source.size(); ++i) {
    SentencePair p{tokenize(corpus.source[i], vocab), tokenize(corpus.target[i], vocab), i + 1};
    if (p.source.empty() || p.target.empty())
      throw DataError("line " + std::to_string(i + 1) + ": empty sentence");
    out.push_back(std::move(p));
  }
  return out;
}

std::string vocab_to_string(const Vocabulary& vocab) {
  std::ostringstream os;
  write_vocabulary(os, vocab);
  return os.str();
}

Vocabulary vocab_from_string(const std::string& text) {
  std::istringstream is(text);
  return read_vocabulary(is);
}

namespace {

MergeList merges_from_string(const std::string& text) {
  std::istringstream is(text);
  return read_merges(is);
}

std::string merges_to_string(const MergeList& merges) {
  std::ostringstream os;
  write_merges(os, merges);
  return os.str();
}

std::vector<std::vector<int>> encode_lines(std::span<const std::string> lines,
                                           const Vocabulary& vocab) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    out.push_back(tokenize(lines[i], vocab));
    if (out.back().empty()) throw DataError("line " + std::to_string(i + 1) + ": empty sentence");
  }
  return out;
}

}  // namespace

LoadedModel load_model(const std::string& checkpoint_path) {
  LoadedModel m;
  m.data = load_checkpoint(checkpoint_path, nullptr);
  m.config = parse_config(m.data.config);
  m.tokenizer.vocab = vocab_from_string(m.data.vocab);
  m.tokenizer.merges = merges_from_string(m.data.merges);
  const std::size_t V = m.tokenizer.vocab.size();
  m.model = std::make_unique<Seq2Seq>(m.config.model, V, V);
  m.data = load_checkpoint(checkpoint_path, &m.model->params());
  return m;
}

std::vector<std::string> translate_lines(const LoadedModel& m, std::span<const std::string> lines,
                                         std::optional<std::size_t> beam_size,
                                         std::size_t* unfinished) {
  std::vector<std::string> out;
  const auto sources = encode_lines(lines, m.tokenizer.vocab);
  for (const auto& src : sources) {
    BeamConfig bc = m.model->beam_config(src.size());
    if (beam_size) bc.beam_size = *beam_size;
    BeamResult r = m.model->translate(src, bc);
    if (!r.finished && unfinished) ++*unfinished;
    std::vector<int> ids = r.best.tokens;
    if (!ids.empty() && ids.back() == kEosId) ids.pop_back();
    out.push_back(detokenize(ids, m.tokenizer.vocab));
  }
  return out;
}

EvalReport evaluate_checkpoint(const LoadedModel& m, std::span<const std::string> sources,
                               std::span<const std::string> references,
                               std::optional<std::size_t> beam_size, const Vocabulary* vocab) {
  if (vocab && !(*vocab == m.tokenizer.vocab))
    throw DataError("vocabulary does not match the checkpoint's vocabulary");
  if (sources.size() != references.size())
    throw DataError("evaluate: " + std::to_string(sources.size()) + " sources but " +
                    std::to_string(references.size()) + " references");
  EvalReport r;
  r.sentences = sources.size();
  const auto hyps = translate_lines(m, sources, beam_size, &r.unfinished);
  r.bleu = corpus_bleu(hyps, references);

  ParallelCorpus corpus{{sources.begin(), sources.end()}, {references.begin(), references.end()}};
  const auto pairs = encode_pairs(corpus, m.tokenizer.vocab);
  r.perplexity = evaluate_perplexity(*m.model, pairs, m.config.training.token_cap);
  r.computation_ratio = compression_row(m, sources).ratio;
  std::vector<std::size_t> chars, frags;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    chars.push_back(utf8_length(sources[i]));
    frags.push_back(pairs[i].source.size());
  }
  r.compression_rate = compression_rate(chars, frags);
  return r;
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "bleu=" << r.bleu.bleu << '\n';
  for (std::size_t n = 0; n < 4; ++n) os << "precision_" << n + 1 << '=' << r.bleu.precisions[n] << '\n';
  os << "brevity_penalty=" << r.bleu.brevity_penalty << '\n';
  os << "hypothesis_length=" << r.bleu.hypothesis_length << '\n';
  os << "reference_length=" << r.bleu.reference_length << '\n';
  os << "perplexity=" << r.perplexity << '\n';
  os << "computation_ratio=" << r.computation_ratio << '\n';
  os << "compression_rate=" << r.compression_rate << '\n';
  os << "sentences=" << r.sentences << '\n';
  os << "unfinished=" << r.unfinished << '\n';
  return os.str();
}

std::size_t select_best_checkpoint(std::span<const double> dev_bleu) {
  CHARNMT_REQUIRE(!dev_bleu.empty(), "select_best_checkpoint: no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < dev_bleu.size(); ++i)
    if (dev_bleu[i] >= dev_bleu[best]) best = i;
  return best;
}

double computation_ratio_from_lengths(
    const std::vector<std::vector<std::size_t>>& per_layer_lengths,
    std::span<const std::size_t> character_lengths) {
  return corpus_computation_ratio(per_layer_lengths, character_lengths);
}

CompressionRow compression_row(const LoadedModel& m, std::span<const std::string> sources) {
  CompressionRow row;
  row.encoder = m.config.model.encoder_kind == EncoderKind::kHm
                    ? "HM, " + std::to_string(m.config.model.hm.num_hm_layers) + "-layer"
                    : (m.config.model.encoder.pooling.empty() ? "BiLSTM" : "BiLSTM + pooling");
  row.tokenization = m.tokenizer.vocab.kind() == VocabKind::kCharacter
                         ? "Char"
                         : std::to_string(m.tokenizer.vocab.size() - kNumSpecials);
  std::vector<std::vector<std::size_t>> lengths;
  std::vector<std::size_t> chars;
  Rng rng;
  const auto ids = encode_lines(sources, m.tokenizer.vocab);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Tape tape(false);
    EncoderOutput enc = m.model->encode(tape, {ids[i]}, false, rng, Real(1));
    lengths.push_back(enc.per_layer_lengths.front());
    chars.push_back(utf8_length(sources[i]));
  }
  row.ratio = computation_ratio_from_lengths(lengths, chars);
  return row;
}

std::string format_compression_table(std::span<const CompressionRow> rows) {
  std::ostringstream os;
  os << std::left << std::setw(20) << "Encoder" << std::setw(10) << "Tokens" << std::setw(8)
     << "BLEU" << "Comp." << '\n';
  os << std::fixed;
  for (const auto& r : rows) {
    os << std::setw(20) << r.encoder << std::setw(10) << r.tokenization << std::setw(8);
    if (r.bleu)
      os << std::setprecision(1) << *r.bleu;
    else
      os << "-";
    os << std::setprecision(2) << r.ratio << '\n';
  }
  return os.str();
}

DropoutSweep sweep_dropout(std::span<const double> rates,
                           const std::function<double(double)>& score) {
  CHARNMT_REQUIRE(!rates.empty(), "sweep_dropout: no rates");
  DropoutSweep s;
  for (double rate : rates) {
    const double v = score(rate);
    s.tried.emplace_back(rate, v);
    if (s.tried.size() > 1 && !(v > s.best_score)) break;
    s.best_rate = rate;
    s.best_score = v;
  }
  return s;
}

void set_dropout(RunConfig& config, double rate) {
  config.model.encoder.dropout = rate;
  config.model.hm.dropout = rate;
  config.model.decoder.dropout = rate;
}

TrainingRunResult run_training(const RunConfig& config, std::ostream& log) {
  config.validate();
  const PathConfig& paths = config.paths;
  if (paths.train_source.empty() || paths.train_target.empty())
    throw ConfigError("paths.train_source and paths.train_target are required");
  const ParallelCorpus train_text = read_parallel(paths.train_source, paths.train_target);
  ParallelCorpus dev_text;
  if (!paths.dev_source.empty()) dev_text = read_parallel(paths.dev_source, paths.dev_target);

  fs::create_directories(paths.output_dir);
  const std::string latest = (fs::path(paths.output_dir) / "latest.ckpt").string();
  TrainingRunResult result;

  Tokenizer tok;
  std::optional<CheckpointData> resume;
  if (fs::exists(latest)) {
    resume = load_checkpoint(latest, nullptr);
    if (parse_config(resume->config).model != config.model)
      throw ConfigError("model settings differ from the checkpoint in " + paths.output_dir);
    tok.vocab = vocab_from_string(resume->vocab);
    tok.merges = merges_from_string(resume->merges);
    result.resumed = true;
  } else if (!paths.vocab.empty() && fs::exists(paths.vocab)) {
    std::ifstream in(paths.vocab);
    tok.vocab = read_vocabulary(in);
  } else {
    tok = build_tokenizer(config.tokenization, train_text);
    std::ofstream out(fs::path(paths.output_dir) / "vocab.txt");
    write_vocabulary(out, tok.vocab);
    if (!tok.merges.empty()) {
      std::ofstream mo(fs::path(paths.output_dir) / "merges.txt");
      write_merges(mo, tok.merges);
    }
  }
  const auto train = encode_pairs(train_text, tok.vocab);
  const auto dev = dev_text.source.empty() ? std::vector<SentencePair>{}
                                           : encode_pairs(dev_text, tok.vocab);

  Seq2Seq model(config.model, tok.vocab.size(), tok.vocab.size());
  Trainer trainer(model, config.training);
  if (resume) {
    CheckpointData data = load_checkpoint(latest, &model.params());
    trainer.restore(std::move(data.trainer));
    log << "resumed from " << latest << " at step " << trainer.state().step << '\n';
  }
  log << "parameters " << model.params().num_values() << ", vocabulary " << tok.vocab.size()
      << ", train pairs " << train.size() << ", dev pairs " << dev.size() << '\n';

  const std::string config_text = serialize_config(config);
  auto save = [&]() {
    CheckpointData data{config_text, vocab_to_string(tok.vocab), merges_to_string(tok.merges),
                        trainer.state()};
    const std::string step_path =
        (fs::path(paths.output_dir) / ("step-" + std::to_string(data.trainer.step) + ".ckpt")).string();
    save_checkpoint(step_path, model.params(), data);
    save_checkpoint(latest, model.params(), data);
    result.final_checkpoint = step_path;
  };

  const auto start = std::chrono::steady_clock::now();
  double tokens = 0, ce = 0;
  Trainer::Hooks hooks;
  hooks.on_step = [&](const StepStats& s) {
    tokens += static_cast<double>(s.target_tokens);
    ce += s.cross_entropy;
    if (s.step % config.training.log_every == 0) {
      const std::chrono::duration<double> el = std::chrono::steady_clock::now() - start;
      log << "step " << s.step << " train_ppl " << std::exp(ce / tokens) << " lr " << s.lr
          << " grad_norm " << s.grad_norm << " elapsed_s " << el.count() << '\n';
      tokens = ce = 0;
    }
  };
  hooks.on_eval = [&](std::size_t step, double ppl) {
    log << "step " << step << " dev_ppl " << ppl << " lr " << trainer.state().scheduler.lr << '\n';
  };
  hooks.on_checkpoint = save;
  trainer.fit(train, dev, hooks);
  save();
  result.steps = trainer.state().step;
  result.best_dev_ppl = trainer.state().scheduler.best_dev_ppl;
  if (trainer.state().scheduler.stop) log << "stopped: dev perplexity stagnated\n";
  return result;
}

double measure_training_msec(const ModelConfig& base, std::size_t vocab_size,
                             std::size_t encoder_layers, std::size_t length,
                             std::size_t batch, std::size_t repeats) {
  CHARNMT_REQUIRE(repeats >= 1 && batch >= 1 && length >= 1, "timing: empty workload");
  ModelConfig cfg = base;
  cfg.encoder_kind = EncoderKind::kBiLstm;
  cfg.encoder.num_bilstm_layers = encoder_layers;
  cfg.encoder.pooling.clear();
  Seq2Seq model(cfg, vocab_size, vocab_size);
  TrainingConfig tc;
  tc.token_cap = std::max<std::size_t>(tc.token_cap, length * batch);
  Trainer trainer(model, tc);
  Rng rng(7);
  std::uniform_int_distribution<int> tok(static_cast<int>(kNumSpecials),
                                         static_cast<int>(vocab_size) - 1);
  Batch b;
  for (std::size_t i = 0; i < batch; ++i) {
    std::vector<int> s(length), t(length);
    for (auto& x : s) x = tok(rng);
    for (auto& x : t) x = tok(rng);
    b.source.push_back(std::move(s));
    b.target.push_back(std::move(t));
  }
  std::vector<Batch> group{b};
  trainer.train_step(group);  // warm-up
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t r = 0; r < repeats; ++r) trainer.train_step(group);
  const std::chrono::duration<double, std::milli> el = std::chrono::steady_clock::now() - start;
  return el.count() / static_cast<double>(repeats * batch);
}

}  // namespace charnmt
