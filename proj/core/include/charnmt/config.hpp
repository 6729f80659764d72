#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "charnmt/tokenize.hpp"
#include "charnmt/trainer.hpp"

namespace charnmt::inline CHARNMT_ABI {

struct TokenizationConfig {
  VocabKind kind = VocabKind::kCharacter;
  std::size_t char_vocab_cap = 496;   // shared by both languages
  std::size_t bpe_vocab_size = 32000; // shared by both languages
  friend bool operator==(const TokenizationConfig&, const TokenizationConfig&) = default;
};

struct PathConfig {
  std::string train_source;
  std::string train_target;
  std::string dev_source;
  std::string dev_target;
  std::string vocab;       // shared vocabulary; built from the training data if absent
  std::string output_dir = "run";
  friend bool operator==(const PathConfig&, const PathConfig&) = default;
};

struct RunConfig {
  ModelConfig model;
  TrainingConfig training;
  TokenizationConfig tokenization;
  PathConfig paths;

  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Sectioned key-value text:
//   # comment
//   [section]
//   key = value
// Sections: model, encoder, hm, decoder, training, tokenization, paths.
// Unknown sections or keys are rejected with the offending line number.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);
// Every key, in a fixed order; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& config);

// "section.key=value"
void apply_override(RunConfig& config, const std::string& assignment);
void set_config_value(RunConfig& config, const std::string& section, const std::string& key,
                      const std::string& value);
std::vector<std::string> config_keys();

// "2:3:mean,3:2:max" (after_layer:stride:mode); empty for none.
std::vector<PoolingSpec> parse_pooling(const std::string& s);
std::string format_pooling(const std::vector<PoolingSpec>& specs);

// Shortest text that parses back to the same double.
std::string format_double(double v);

}  // namespace charnmt
