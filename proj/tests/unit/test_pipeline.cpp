#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "charnmt/pipeline.hpp"
#include "oracles.hpp"

using namespace charnmt;
namespace fs = std::filesystem;

namespace {

double bleu_of(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  return corpus_bleu(hyp, ref).bleu;
}

// BLEU-4 computed directly from clipped n-gram counts.
double oracle_bleu(const std::vector<std::string>& hyp, const std::vector<std::string>& ref) {
  double log_p = 0;
  long long hl = 0, rl = 0;
  for (std::size_t n = 1; n <= 4; ++n) {
    long long m = 0, t = 0;
    for (std::size_t i = 0; i < hyp.size(); ++i) {
      const auto [mi, ti] = oracle::clipped(split_whitespace(hyp[i]), split_whitespace(ref[i]), n);
      m += mi;
      t += ti;
    }
    if (m == 0) return 0;
    log_p += std::log(static_cast<double>(m) / static_cast<double>(t)) / 4;
  }
  for (std::size_t i = 0; i < hyp.size(); ++i) {
    hl += static_cast<long long>(split_whitespace(hyp[i]).size());
    rl += static_cast<long long>(split_whitespace(ref[i]).size());
  }
  const double bp = hl >= rl ? 1.0 : std::exp(1.0 - static_cast<double>(rl) / static_cast<double>(hl));
  return 100 * bp * std::exp(log_p);
}

void write_lines(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream out(p);
  for (const auto& l : lines) out << l << '\n';
}

struct TinyRun {
  fs::path dir;
  RunConfig config;
  std::vector<std::string> dev_src, dev_tgt;

  explicit TinyRun(const std::string& name) {
    dir = fs::temp_directory_path() / ("charnmt_pipeline_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    Rng rng(11);
    std::vector<std::string> src, tgt;
    for (int i = 0; i < 40; ++i) {
      std::string s;
      const std::size_t len = 2 + rng() % 5;
      for (std::size_t k = 0; k < len; ++k) s += static_cast<char>('a' + rng() % 5);
      src.push_back(s);
      tgt.emplace_back(s.rbegin(), s.rend());
    }
    dev_src.assign(src.begin(), src.begin() + 5);
    dev_tgt.assign(tgt.begin(), tgt.begin() + 5);
    write_lines(dir / "train.src", src);
    write_lines(dir / "train.tgt", tgt);
    write_lines(dir / "dev.src", dev_src);
    write_lines(dir / "dev.tgt", dev_tgt);
    config.model.embedding_dim = 8;
    config.model.encoder.num_bilstm_layers = 2;
    config.model.encoder.model_dim = 6;
    config.model.encoder.projection_dim = 6;
    config.model.encoder.dropout = 0;
    config.model.decoder.num_layers = 2;
    config.model.decoder.model_dim = 6;
    config.model.decoder.dropout = 0;
    config.model.decoder.beam_size = 2;
    config.training.token_cap = 64;
    config.training.eval_every = 3;
    config.training.max_steps = 6;
    config.training.scheduler.initial_lr = 0.01;
    config.paths.train_source = (dir / "train.src").string();
    config.paths.train_target = (dir / "train.tgt").string();
    config.paths.dev_source = (dir / "dev.src").string();
    config.paths.dev_target = (dir / "dev.tgt").string();
    config.paths.output_dir = (dir / "run").string();
  }
  ~TinyRun() { fs::remove_all(dir); }
};

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("BLEU of identical corpora is 100") {
  const std::vector<std::string> h{"the cat sat on the mat", "a b c d"};
  CHECK(bleu_of(h, h) == doctest::Approx(100.0));
}

TEST_CASE("BLEU with no shared token is 0") {
  CHECK(bleu_of({"a b c d e"}, {"v w x y z"}) == 0.0);
}

TEST_CASE("BLEU hand examples") {
  // precisions 5/6, 4/5, 3/4, 2/3; equal lengths
  CHECK(bleu_of({"a b c d e f"}, {"a b c d e g"}) ==
        doctest::Approx(100 * std::pow(1.0 / 3.0, 0.25)).epsilon(1e-9));
  // perfect precisions, hypothesis 5 tokens against 7
  const BleuReport r = corpus_bleu(std::vector<std::string>{"a b c d e"},
                                   std::vector<std::string>{"a b c d e f g"});
  CHECK(r.brevity_penalty == doctest::Approx(std::exp(1.0 - 7.0 / 5.0)));
  CHECK(r.bleu == doctest::Approx(67.0320).epsilon(1e-6));
}

TEST_CASE("BLEU agrees with clipped-count oracle on a small corpus") {
  const std::vector<std::string> hyp{"the the the cat sat on a mat", "it is a nice day today ok",
                                     "one two three four five"};
  const std::vector<std::string> ref{"the cat sat on the mat", "today is a nice day it is ok",
                                     "one two three four five six"};
  const BleuReport r = corpus_bleu(hyp, ref);
  CHECK(r.bleu == doctest::Approx(oracle_bleu(hyp, ref)).epsilon(1e-9));
  const auto [m1, t1] = oracle::clipped(split_whitespace(hyp[0]), split_whitespace(ref[0]), 1);
  CHECK(m1 == 6);  // "the" clipped to 2
  CHECK(t1 == 8);
}

TEST_CASE("BLEU is invariant to the order of sentence pairs") {
  const std::vector<std::string> hyp{"x y z w", "a b c d e", "p q r s t u"};
  const std::vector<std::string> ref{"x y z q", "a b c d f", "p q r s t u"};
  const std::vector<std::string> hyp2{hyp[2], hyp[0], hyp[1]};
  const std::vector<std::string> ref2{ref[2], ref[0], ref[1]};
  CHECK(bleu_of(hyp, ref) == doctest::Approx(bleu_of(hyp2, ref2)));
}

TEST_CASE("BLEU requires matching corpus sizes") {
  CHECK_THROWS(corpus_bleu(std::vector<std::string>{"a"}, std::vector<std::string>{}));
}

TEST_CASE("configuration text round trip") {
  RunConfig c;
  c.model.encoder_kind = EncoderKind::kHm;
  c.model.encoder.pooling = parse_pooling("2:3:mean,3:2:max");
  c.training.scheduler.initial_lr = 0.00037;
  c.paths.train_source = "some/file.src";
  const RunConfig back = parse_config(serialize_config(c));
  CHECK(back == c);
  CHECK(format_pooling(back.model.encoder.pooling) == "2:3:mean,3:2:max");
}

TEST_CASE("unknown configuration keys are rejected with the line number") {
  try {
    parse_config("[model]\nembedding_dim = 8\nbogus = 1\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("3") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("[nowhere]\n"), ConfigError);
  RunConfig c;
  apply_override(c, "decoder.beam_size=3");
  CHECK(c.model.decoder.beam_size == 3);
  CHECK_THROWS_AS(apply_override(c, "decoder.beam_size"), ConfigError);
}

TEST_CASE("best checkpoint selection prefers the later one on ties") {
  const double bleu[] = {10, 12, 12, 11};
  CHECK(select_best_checkpoint(bleu) == 2);
}

TEST_CASE("dropout sweep stops at the first non-improvement") {
  const double rates[] = {0.0, 0.1, 0.2, 0.3, 0.4};
  std::vector<double> asked;
  const DropoutSweep s = sweep_dropout(rates, [&](double r) {
    asked.push_back(r);
    return r <= 0.2 ? 10 + 10 * r : 5.0;
  });
  CHECK(s.best_rate == doctest::Approx(0.2));
  CHECK(asked.size() == 4);
  RunConfig c;
  set_dropout(c, 0.3);
  CHECK(c.model.encoder.dropout == 0.3);
  CHECK(c.model.decoder.dropout == 0.3);
  CHECK(c.model.hm.dropout == 0.3);
}

TEST_CASE("computation ratio from recorded lengths") {
  const std::vector<std::vector<std::size_t>> lengths{{4, 2}, {6, 3}};
  const std::size_t chars[] = {4, 6};
  CHECK(computation_ratio_from_lengths(lengths, chars) == doctest::Approx(0.75));
}

TEST_CASE("parallel corpus line counts must agree") {
  const fs::path dir = fs::temp_directory_path() / "charnmt_pipeline_mismatch";
  fs::create_directories(dir);
  write_lines(dir / "a", {"x", "y"});
  write_lines(dir / "b", {"x"});
  CHECK_THROWS_AS(read_parallel((dir / "a").string(), (dir / "b").string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("training, reloading and evaluating a tiny model") {
  TinyRun run("train");
  std::ostringstream log;
  const TrainingRunResult r = run_training(run.config, log);
  CHECK(r.steps == 6);
  CHECK_FALSE(r.resumed);
  CHECK(fs::exists(run.dir / "run" / "step-3.ckpt"));
  CHECK(fs::exists(run.dir / "run" / "latest.ckpt"));

  const LoadedModel m = load_model(r.final_checkpoint);
  const auto out = translate_lines(m, run.dev_src);
  CHECK(out.size() == run.dev_src.size());

  const EvalReport a = evaluate_checkpoint(m, run.dev_src, run.dev_tgt);
  const EvalReport b = evaluate_checkpoint(m, run.dev_src, run.dev_tgt);
  CHECK(a.bleu.bleu == b.bleu.bleu);
  CHECK(a.perplexity == b.perplexity);
  CHECK(a.perplexity > 1.0);
  CHECK(a.computation_ratio == doctest::Approx(1.0));
  CHECK(a.sentences == 5);
  CHECK(format_report(a).find("bleu=") != std::string::npos);

  const CompressionRow row = compression_row(m, run.dev_src);
  CHECK(row.ratio == doctest::Approx(1.0));
  const CompressionRow rows[] = {row};
  CHECK(format_compression_table(rows).find("1.00") != std::string::npos);

  Vocabulary other(VocabKind::kCharacter, {"q"});
  CHECK_THROWS_AS(evaluate_checkpoint(m, run.dev_src, run.dev_tgt, {}, &other), DataError);

  // a second run picks up where the first stopped
  RunConfig more = run.config;
  more.training.max_steps = 9;
  const TrainingRunResult r2 = run_training(more, log);
  CHECK(r2.resumed);
  CHECK(r2.steps == 9);

  // a changed model does not resume silently
  RunConfig changed = more;
  changed.model.decoder.model_dim = 7;
  CHECK_THROWS_AS(run_training(changed, log), ConfigError);
}

}  // TEST_SUITE
