#include "charnmt/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <utility>

namespace charnmt::inline CHARNMT_ABI {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

struct Field {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Member>
Field count_field(std::string section, std::string key, Member member) {
  const std::string name = section + "." + key;
  return {section, key,
          [member](const RunConfig& c) { return std::to_string(member(c)); },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_count(name, v); }};
}

template <typename Member>
Field real_field(std::string section, std::string key, Member member) {
  const std::string name = section + "." + key;
  return {section, key,
          [member](const RunConfig& c) { return format_double(member(c)); },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_real(name, v); }};
}

template <typename Member>
Field bool_field(std::string section, std::string key, Member member) {
  const std::string name = section + "." + key;
  return {section, key,
          [member](const RunConfig& c) {
            return std::string(member(c) ? "true" : "false");
          },
          [member, name](RunConfig& c, const std::string& v) { member(c) = parse_bool(name, v); }};
}

template <typename Member>
Field string_field(std::string section, std::string key, Member member) {
  return {section, key, [member](const RunConfig& c) { return member(c); },
          [member](RunConfig& c, const std::string& v) { member(c) = v; }};
}

#define CHARNMT_MEMBER(path) [](auto& c) -> auto& { return c.path; }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"model", "encoder",
                 [](const RunConfig& c) { return to_string(c.model.encoder_kind); },
                 [](RunConfig& c, const std::string& v) {
                   c.model.encoder_kind = parse_encoder_kind(v);
                 }});
    f.push_back(count_field("model", "embedding_dim", CHARNMT_MEMBER(model.embedding_dim)));

    f.push_back(count_field("encoder", "num_bilstm_layers",
                            CHARNMT_MEMBER(model.encoder.num_bilstm_layers)));
    f.push_back(count_field("encoder", "model_dim", CHARNMT_MEMBER(model.encoder.model_dim)));
    f.push_back(count_field("encoder", "residual_start_layer",
                            CHARNMT_MEMBER(model.encoder.residual_start_layer)));
    f.push_back(real_field("encoder", "dropout", CHARNMT_MEMBER(model.encoder.dropout)));
    f.push_back({"encoder", "pooling",
                 [](const RunConfig& c) { return format_pooling(c.model.encoder.pooling); },
                 [](RunConfig& c, const std::string& v) {
                   c.model.encoder.pooling = parse_pooling(v);
                 }});
    f.push_back(count_field("encoder", "projection_dim",
                            CHARNMT_MEMBER(model.encoder.projection_dim)));

    f.push_back(count_field("hm", "num_hm_layers", CHARNMT_MEMBER(model.hm.num_hm_layers)));
    f.push_back(count_field("hm", "hidden_dim", CHARNMT_MEMBER(model.hm.hidden_dim)));
    f.push_back(count_field("hm", "num_bilstm_layers",
                            CHARNMT_MEMBER(model.hm.num_bilstm_layers)));
    f.push_back(count_field("hm", "bilstm_dim", CHARNMT_MEMBER(model.hm.bilstm_dim)));
    f.push_back(bool_field("hm", "gated_output", CHARNMT_MEMBER(model.hm.gated_output)));
    f.push_back(count_field("hm", "residual_start_layer",
                            CHARNMT_MEMBER(model.hm.residual_start_layer)));
    f.push_back(real_field("hm", "dropout", CHARNMT_MEMBER(model.hm.dropout)));
    f.push_back(real_field("hm", "z_bias_init", CHARNMT_MEMBER(model.hm.z_bias_init)));
    f.push_back(count_field("hm", "projection_dim", CHARNMT_MEMBER(model.hm.projection_dim)));
    f.push_back(real_field("hm", "slope_start", CHARNMT_MEMBER(model.hm.slope.start)));
    f.push_back(real_field("hm", "slope_end", CHARNMT_MEMBER(model.hm.slope.end)));
    f.push_back(count_field("hm", "slope_anneal_steps",
                            CHARNMT_MEMBER(model.hm.slope.anneal_steps)));
    f.push_back(real_field("hm", "alpha1", CHARNMT_MEMBER(model.hm.penalty.alpha1)));
    f.push_back(real_field("hm", "alpha2", CHARNMT_MEMBER(model.hm.penalty.alpha2)));
    f.push_back(real_field("hm", "compression_weight", CHARNMT_MEMBER(model.hm.penalty.weight)));
    f.push_back(bool_field("hm", "literal_penalty", CHARNMT_MEMBER(model.hm.penalty.literal)));

    f.push_back(count_field("decoder", "num_layers", CHARNMT_MEMBER(model.decoder.num_layers)));
    f.push_back(count_field("decoder", "model_dim", CHARNMT_MEMBER(model.decoder.model_dim)));
    f.push_back(count_field("decoder", "residual_start_layer",
                            CHARNMT_MEMBER(model.decoder.residual_start_layer)));
    f.push_back(real_field("decoder", "dropout", CHARNMT_MEMBER(model.decoder.dropout)));
    f.push_back(count_field("decoder", "beam_size", CHARNMT_MEMBER(model.decoder.beam_size)));
    f.push_back(real_field("decoder", "coverage_penalty",
                           CHARNMT_MEMBER(model.decoder.coverage_penalty)));
    f.push_back(real_field("decoder", "length_norm", CHARNMT_MEMBER(model.decoder.length_norm)));
    f.push_back(real_field("decoder", "max_output_factor",
                           CHARNMT_MEMBER(model.decoder.max_output_factor)));

    f.push_back(count_field("training", "token_cap", CHARNMT_MEMBER(training.token_cap)));
    f.push_back(real_field("training", "init_range", CHARNMT_MEMBER(training.init_range)));
    f.push_back(real_field("training", "clip_norm", CHARNMT_MEMBER(training.clip_norm)));
    f.push_back(real_field("training", "adam_beta1", CHARNMT_MEMBER(training.adam.beta1)));
    f.push_back(real_field("training", "adam_beta2", CHARNMT_MEMBER(training.adam.beta2)));
    f.push_back(real_field("training", "adam_epsilon", CHARNMT_MEMBER(training.adam.epsilon)));
    f.push_back(real_field("training", "learning_rate",
                           CHARNMT_MEMBER(training.scheduler.initial_lr)));
    f.push_back(count_field("training", "halve_after",
                            CHARNMT_MEMBER(training.scheduler.halve_after)));
    f.push_back(count_field("training", "halving_spacing",
                            CHARNMT_MEMBER(training.scheduler.halving_spacing)));
    f.push_back(count_field("training", "stop_after",
                            CHARNMT_MEMBER(training.scheduler.stop_after)));
    f.push_back({"training", "loss_normalization",
                 [](const RunConfig& c) { return to_string(c.training.normalization); },
                 [](RunConfig& c, const std::string& v) {
                   c.training.normalization = parse_loss_normalization(v);
                 }});
    f.push_back(count_field("training", "accumulation_steps",
                            CHARNMT_MEMBER(training.accumulation_steps)));
    f.push_back(count_field("training", "eval_every", CHARNMT_MEMBER(training.eval_every)));
    f.push_back(count_field("training", "max_steps", CHARNMT_MEMBER(training.max_steps)));
    f.push_back(count_field("training", "log_every", CHARNMT_MEMBER(training.log_every)));
    f.push_back({"training", "seed",
                 [](const RunConfig& c) { return std::to_string(c.training.seed); },
                 [](RunConfig& c, const std::string& v) {
                   c.training.seed = parse_count("training.seed", v);
                 }});

    f.push_back({"tokenization", "kind",
                 [](const RunConfig& c) {
                   return std::string(c.tokenization.kind == VocabKind::kBpe ? "bpe" : "char");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "char") c.tokenization.kind = VocabKind::kCharacter;
                   else if (v == "bpe") c.tokenization.kind = VocabKind::kBpe;
                   else throw ConfigError("tokenization.kind: expected char or bpe, got '" + v + "'");
                 }});
    f.push_back(count_field("tokenization", "char_vocab_cap",
                            CHARNMT_MEMBER(tokenization.char_vocab_cap)));
    f.push_back(count_field("tokenization", "bpe_vocab_size",
                            CHARNMT_MEMBER(tokenization.bpe_vocab_size)));

    f.push_back(string_field("paths", "train_source", CHARNMT_MEMBER(paths.train_source)));
    f.push_back(string_field("paths", "train_target", CHARNMT_MEMBER(paths.train_target)));
    f.push_back(string_field("paths", "dev_source", CHARNMT_MEMBER(paths.dev_source)));
    f.push_back(string_field("paths", "dev_target", CHARNMT_MEMBER(paths.dev_target)));
    f.push_back(string_field("paths", "vocab", CHARNMT_MEMBER(paths.vocab)));
    f.push_back(string_field("paths", "output_dir", CHARNMT_MEMBER(paths.output_dir)));
    return f;
  }();
  return table;
}

#undef CHARNMT_MEMBER

const Field& find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields())
    if (f.section == section && f.key == key) return f;
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

}  // namespace

std::vector<PoolingSpec> parse_pooling(const std::string& s) {
  std::vector<PoolingSpec> out;
  std::istringstream is(s);
  for (std::string item; std::getline(is, item, ',');) {
    item = trim(item);
    if (item.empty()) continue;
    const auto a = item.find(':');
    const auto b = item.find(':', a == std::string::npos ? a : a + 1);
    if (a == std::string::npos || b == std::string::npos)
      throw ConfigError("pooling: expected after_layer:stride:mode, got '" + item + "'");
    PoolingSpec p;
    p.after_layer = parse_count("pooling", item.substr(0, a));
    p.stride = parse_count("pooling", item.substr(a + 1, b - a - 1));
    p.mode = parse_pool_mode(item.substr(b + 1));
    out.push_back(p);
  }
  return out;
}

std::string format_pooling(const std::vector<PoolingSpec>& specs) {
  std::string out;
  for (const auto& p : specs) {
    if (!out.empty()) out += ',';
    out += std::to_string(p.after_layer) + ':' + std::to_string(p.stride) + ':' + to_string(p.mode);
  }
  return out;
}

void RunConfig::validate() const {
  model.validate();
  training.validate();
  if (tokenization.char_vocab_cap < 1) throw ConfigError("tokenization.char_vocab_cap must be >= 1");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.section + "." + f.key);
  return out;
}

void set_config_value(RunConfig& config, const std::string& section, const std::string& key,
                      const std::string& value) {
  find_field(section, key).set(config, value);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
  set_config_value(config, trim(assignment.substr(0, dot)),
                   trim(assignment.substr(dot + 1, eq - dot - 1)), trim(assignment.substr(eq + 1)));
}

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  std::istringstream is(text);
  std::string section;
  std::size_t lineno = 0;
  for (std::string raw; std::getline(is, raw);) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("malformed section header");
        section = trim(line.substr(1, line.size() - 2));
        bool known = false;
        for (const auto& f : fields()) known = known || f.section == section;
        if (!known) throw ConfigError("unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key = value");
      if (section.empty()) throw ConfigError("key outside of any section");
      set_config_value(config, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& config) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(config) << '\n';
  }
  return os.str();
}

}  // namespace charnmt
