// charnmt: command-line front end for vocabulary building, training,
// translation, evaluation and reporting.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "charnmt/gradcheck.hpp"
#include "charnmt/pipeline.hpp"

namespace fs = std::filesystem;
using namespace charnmt;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::vector<std::string> read_all(const std::vector<std::string>& paths) {
  std::vector<std::string> lines;
  for (const auto& p : paths) {
    auto part = read_text_file(p);
    lines.insert(lines.end(), part.begin(), part.end());
  }
  return lines;
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  return out;
}

// Writes to `path`, or stdout when it is empty or "-".
template <typename F>
void with_output(const std::string& path, F&& write) {
  if (path.empty() || path == "-") {
    write(std::cout);
  } else {
    auto out = open_output(path);
    write(out);
  }
}

Vocabulary load_vocab_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return read_vocabulary(in);
}

RunConfig config_with_overrides(const std::string& path, const std::vector<std::string>& sets) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  for (const auto& s : sets) apply_override(cfg, s);
  cfg.validate();
  return cfg;
}

std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos == 0 || pos != item.size()) throw ConfigError("not a number list: " + s);
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("empty number list");
  return out;
}

struct Options {
  std::vector<std::string> inputs;
  std::string input, output, vocab, merges, config, checkpoint, source, reference;
  std::vector<std::string> checkpoints, sets;
  std::size_t cap = 496, vocab_size = 32000, beam = 0;
  bool ids = false, f32 = false, greedy = false;
  std::vector<double> rates{0.1, 0.2, 0.3, 0.4, 0.5};
  GradSuiteOptions grad;
  std::string layers = "2,4,6,8";
  std::size_t length = 60, batch = 8, repeats = 3, dim = 128, timing_vocab = 300;
};

int cmd_build_char_vocab(const Options& o) {
  const auto lines = read_all(o.inputs);
  const Vocabulary v = build_char_vocab(lines, o.cap);
  with_output(o.output, [&](std::ostream& os) { write_vocabulary(os, v); });
  std::cerr << "vocabulary: " << v.size() << " entries\n";
  return kOk;
}

int cmd_learn_bpe(const Options& o) {
  const auto lines = read_all(o.inputs);
  const BpeModel m = learn_bpe(lines, o.vocab_size);
  with_output(o.output, [&](std::ostream& os) { write_vocabulary(os, m.vocab); });
  if (!o.merges.empty()) {
    auto out = open_output(o.merges);
    write_merges(out, m.merges);
  }
  std::cerr << "vocabulary: " << m.vocab.size() << " entries, " << m.merges.size()
            << " merges\n";
  return kOk;
}

int cmd_tokenize(const Options& o) {
  const Vocabulary v = load_vocab_file(o.vocab);
  const auto lines = read_text_file(o.input);
  with_output(o.output, [&](std::ostream& os) {
    for (const auto& line : lines) {
      const auto ids = tokenize(line, v);
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) os << ' ';
        if (o.ids)
          os << ids[i];
        else
          os << v.token(ids[i]);
      }
      os << '\n';
    }
  });
  return kOk;
}

int cmd_train(const Options& o) {
  const RunConfig cfg = config_with_overrides(o.config, o.sets);
  const TrainingRunResult r = run_training(cfg, std::cerr);
  std::cout << "checkpoint=" << r.final_checkpoint << "\nsteps=" << r.steps
            << "\nbest_dev_ppl=" << r.best_dev_ppl << "\nresumed=" << (r.resumed ? 1 : 0)
            << '\n';
  return kOk;
}

std::optional<std::size_t> beam_option(const Options& o) {
  if (o.greedy) return std::size_t{1};
  if (o.beam) return o.beam;
  return std::nullopt;
}

int cmd_translate(const Options& o) {
  const LoadedModel m = load_model(o.checkpoint);
  const auto lines = read_text_file(o.input);
  std::size_t unfinished = 0;
  const auto out = translate_lines(m, lines, beam_option(o), &unfinished);
  with_output(o.output, [&](std::ostream& os) {
    for (const auto& l : out) os << l << '\n';
  });
  if (unfinished) std::cerr << unfinished << " sentence(s) hit the length limit\n";
  return kOk;
}

int cmd_evaluate(const Options& o) {
  const auto sources = read_text_file(o.source);
  const auto refs = read_text_file(o.reference);
  std::optional<Vocabulary> vocab;
  if (!o.vocab.empty()) vocab = load_vocab_file(o.vocab);
  std::vector<double> scores;
  for (const auto& path : o.checkpoints) {
    const LoadedModel m = load_model(path);
    const EvalReport r =
        evaluate_checkpoint(m, sources, refs, beam_option(o), vocab ? &*vocab : nullptr);
    std::cout << "checkpoint=" << path << '\n' << format_report(r);
    scores.push_back(r.bleu.bleu);
  }
  if (scores.size() > 1)
    std::cout << "best_checkpoint=" << o.checkpoints[select_best_checkpoint(scores)] << '\n';
  return kOk;
}

int cmd_report_compression(const Options& o) {
  const auto sources = read_text_file(o.source);
  std::optional<std::vector<std::string>> refs;
  if (!o.reference.empty()) refs = read_text_file(o.reference);
  std::vector<CompressionRow> rows;
  for (const auto& path : o.checkpoints) {
    const LoadedModel m = load_model(path);
    CompressionRow row = compression_row(m, sources);
    if (refs) row.bleu = corpus_bleu(translate_lines(m, sources, beam_option(o)), *refs).bleu;
    rows.push_back(row);
  }
  std::cout << format_compression_table(rows);
  return kOk;
}

int cmd_sweep_dropout(const Options& o) {
  const RunConfig base = config_with_overrides(o.config, o.sets);
  if (base.paths.dev_source.empty())
    throw ConfigError("sweep-dropout needs paths.dev_source and paths.dev_target");
  const auto dev_src = read_text_file(base.paths.dev_source);
  const auto dev_ref = read_text_file(base.paths.dev_target);
  auto score = [&](double rate) {
    RunConfig cfg = base;
    set_dropout(cfg, rate);
    std::ostringstream name;
    name << "dropout-" << std::fixed << std::setprecision(1) << rate;
    cfg.paths.output_dir = (fs::path(base.paths.output_dir) / name.str()).string();
    const TrainingRunResult r = run_training(cfg, std::cerr);
    const LoadedModel m = load_model(r.final_checkpoint);
    const double bleu = corpus_bleu(translate_lines(m, dev_src, beam_option(o)), dev_ref).bleu;
    std::cerr << "dropout " << rate << " dev_bleu " << bleu << '\n';
    return bleu;
  };
  const DropoutSweep s = sweep_dropout(o.rates, score);
  for (const auto& [rate, bleu] : s.tried) std::cout << "dropout=" << rate << " bleu=" << bleu << '\n';
  std::cout << "best_dropout=" << s.best_rate << "\nbest_bleu=" << s.best_score << '\n';
  return kOk;
}

int cmd_gradcheck(const Options& o) {
  GradSuiteOptions g = o.grad;
  const GradSuiteReport r = o.f32 ? f32::run_gradient_suite(g) : f64::run_gradient_suite(g);
  for (const auto& c : r.results)
    std::cout << (c.passed() ? "ok   " : "FAIL ") << std::left << std::setw(24) << c.name
              << " points=" << c.points << " coords=" << c.coordinates
              << " failures=" << c.failures << " max_error=" << std::setprecision(3)
              << c.max_error << '\n';
  std::cout << "checks=" << r.results.size() << " seconds=" << std::setprecision(4) << r.seconds
            << " result=" << (r.passed() ? "pass" : "fail") << '\n';
  return r.passed() ? kOk : kNumeric;
}

int cmd_report_timing(const Options& o) {
  ModelConfig base;
  base.embedding_dim = o.dim;
  base.encoder.model_dim = o.dim;
  base.encoder.projection_dim = o.dim;
  base.decoder.model_dim = o.dim;
  base.decoder.num_layers = 2;
  base.decoder.residual_start_layer = 3;
  std::vector<TimingPoint> points;
  std::cout << "layers msec_per_sentence\n";
  for (std::size_t layers : parse_size_list(o.layers)) {
    const double ms = measure_training_msec(base, o.timing_vocab, layers, o.length, o.batch, o.repeats);
    points.push_back({static_cast<double>(layers), ms});
    std::cout << layers << ' ' << std::setprecision(5) << ms << '\n';
  }
  if (points.size() >= 2) {
    const LinearFit fit = fit_timing(points);
    std::cout << "slope_msec_per_layer=" << fit.slope << "\nintercept_msec=" << fit.intercept
              << '\n';
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Character-level neural machine translation toolkit"};
  app.require_subcommand(1);
  Options o;
  int (*run)(const Options&) = nullptr;

  auto* bcv = app.add_subcommand("build-char-vocab", "Most frequent characters of the corpora");
  bcv->add_option("--input", o.inputs, "Corpus files (source and target)")->required()->check(CLI::ExistingFile);
  bcv->add_option("--cap", o.cap, "Number of characters kept")->capture_default_str();
  bcv->add_option("--output", o.output, "Vocabulary file (default stdout)");
  bcv->callback([&] { run = cmd_build_char_vocab; });

  auto* bpe = app.add_subcommand("learn-bpe", "Learn a shared BPE vocabulary");
  bpe->add_option("--input", o.inputs, "Corpus files (source and target)")->required()->check(CLI::ExistingFile);
  bpe->add_option("--vocab-size", o.vocab_size, "Target vocabulary size")->capture_default_str();
  bpe->add_option("--output", o.output, "Vocabulary file (default stdout)");
  bpe->add_option("--merges", o.merges, "Merge list file");
  bpe->callback([&] { run = cmd_learn_bpe; });

  auto* tok = app.add_subcommand("tokenize", "Segment text with a vocabulary");
  tok->add_option("--vocab", o.vocab, "Vocabulary file")->required()->check(CLI::ExistingFile);
  tok->add_option("--input", o.input, "Text file")->required()->check(CLI::ExistingFile);
  tok->add_option("--output", o.output, "Output file (default stdout)");
  tok->add_flag("--ids", o.ids, "Print token ids instead of tokens");
  tok->callback([&] { run = cmd_tokenize; });

  auto* train = app.add_subcommand("train", "Train a model; resumes from latest.ckpt if present");
  train->add_option("--config", o.config, "Configuration file")->check(CLI::ExistingFile);
  train->add_option("--set", o.sets, "Override, e.g. training.max_steps=100");
  train->callback([&] { run = cmd_train; });

  auto* tr = app.add_subcommand("translate", "Beam-search translation, one line per input line");
  tr->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  tr->add_option("--input", o.input, "Source text")->required()->check(CLI::ExistingFile);
  tr->add_option("--output", o.output, "Output file (default stdout)");
  tr->add_option("--beam", o.beam, "Beam size (default: from the checkpoint)")->check(CLI::PositiveNumber);
  tr->add_flag("--greedy", o.greedy, "Beam size 1");
  tr->callback([&] { run = cmd_translate; });

  auto* ev = app.add_subcommand("evaluate", "BLEU, perplexity and computation ratio");
  ev->add_option("--checkpoint", o.checkpoints, "Checkpoint(s); the best by BLEU is reported")->required()->check(CLI::ExistingFile);
  ev->add_option("--source", o.source, "Source text")->required()->check(CLI::ExistingFile);
  ev->add_option("--reference", o.reference, "Reference translations")->required()->check(CLI::ExistingFile);
  ev->add_option("--vocab", o.vocab, "Vocabulary that must match the checkpoint")->check(CLI::ExistingFile);
  ev->add_option("--beam", o.beam, "Beam size")->check(CLI::PositiveNumber);
  ev->add_flag("--greedy", o.greedy, "Beam size 1");
  ev->callback([&] { run = cmd_evaluate; });

  auto* rc = app.add_subcommand("report-compression", "Encoder computation-ratio table");
  rc->add_option("--checkpoint", o.checkpoints, "Checkpoints, one row each")->required()->check(CLI::ExistingFile);
  rc->add_option("--source", o.source, "Source text")->required()->check(CLI::ExistingFile);
  rc->add_option("--reference", o.reference, "References (adds a BLEU column)")->check(CLI::ExistingFile);
  rc->add_option("--beam", o.beam, "Beam size")->check(CLI::PositiveNumber);
  rc->add_flag("--greedy", o.greedy, "Beam size 1");
  rc->callback([&] { run = cmd_report_compression; });

  auto* sd = app.add_subcommand("sweep-dropout", "Greedy dropout search by dev BLEU");
  sd->add_option("--config", o.config, "Configuration file")->check(CLI::ExistingFile);
  sd->add_option("--set", o.sets, "Override, e.g. training.max_steps=100");
  sd->add_option("--rates", o.rates, "Rates in increasing order")->capture_default_str();
  sd->add_flag("--greedy", o.greedy, "Decode dev with beam size 1");
  sd->callback([&] { run = cmd_sweep_dropout; });

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gc->add_option("--points", o.grad.points, "Random points per check")->capture_default_str();
  gc->add_option("--tolerance", o.grad.tolerance, "Relative tolerance")->capture_default_str();
  gc->add_option("--step", o.grad.step, "Difference step")->capture_default_str();
  gc->add_option("--seed", o.grad.seed, "Random seed")->capture_default_str();
  gc->add_option("--filter", o.grad.filter, "Only checks whose name contains this");
  gc->add_flag("--f32", o.f32, "Run in single precision (loosen --tolerance and --step)");
  gc->callback([&] { run = cmd_gradcheck; });

  auto* rt = app.add_subcommand("report-timing", "Training time per sentence against encoder depth");
  rt->add_option("--layers", o.layers, "Comma-separated BiLSTM layer counts")->capture_default_str();
  rt->add_option("--length", o.length, "Tokens per sentence")->capture_default_str();
  rt->add_option("--batch", o.batch, "Sentences per batch")->capture_default_str();
  rt->add_option("--repeats", o.repeats, "Timed steps")->capture_default_str();
  rt->add_option("--vocab-size", o.timing_vocab, "Vocabulary size")->capture_default_str();
  rt->add_option("--dim", o.dim, "Model dimension")->capture_default_str();
  rt->callback([&] { run = cmd_report_timing; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    return run(o);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
}
