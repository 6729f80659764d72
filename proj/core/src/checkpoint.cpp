#include "charnmt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "charnmt/config.hpp"

namespace charnmt::inline CHARNMT_ABI {

namespace {

constexpr const char* kMagic = "charnmt-checkpoint 1";

std::string shape_field(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(s[i]);
  }
  return out;
}

Shape parse_shape(const std::string& f) {
  Shape s;
  if (f == "scalar") return s;
  std::istringstream is(f);
  for (std::string d; std::getline(is, d, 'x');) s.push_back(std::stoull(d));
  return s;
}

void put_floats(std::string& payload, const Tensor& t) {
  for (Real v : t.data()) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int b = 0; b < 4; ++b) payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
  }
}

void get_floats(const std::string& payload, std::size_t offset, Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b)
      bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[offset + 4 * i + b]))
              << (8 * b);
    t[i] = static_cast<Real>(std::bit_cast<float>(bits));
  }
}

struct TensorRecord {
  Shape shape;
  std::size_t offset = 0;
  std::size_t count = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const ParameterStore& params,
                     const CheckpointData& data) {
  std::ostringstream man;
  std::string payload;
  const TrainerState& t = data.trainer;
  const SchedulerState& s = t.scheduler;
  man << kMagic << '\n' << "payload float32-le\n";
  man << "step " << t.step << "\nepoch " << t.epoch << "\ncursor " << t.cursor << '\n';
  man << "optimizer_step " << t.optimizer.step << '\n';
  man << "scheduler " << format_double(s.lr) << ' ' << format_double(s.best_dev_ppl) << ' '
      << s.since_improvement << ' ' << s.since_halving << ' ' << s.halvings << ' '
      << (s.stop ? 1 : 0) << '\n';
  auto blob = [&](const char* name, const std::string& text) {
    man << "blob " << name << ' ' << text.size() << '\n' << text << '\n';
  };
  blob("config", data.config);
  blob("vocab", data.vocab);
  blob("merges", data.merges);
  blob("rng", t.rng);
  auto record = [&](const char* kind, const std::string& name, const Tensor& v) {
    man << "tensor " << kind << ' ' << name << ' ' << shape_field(v.shape()) << ' '
        << payload.size() << ' ' << v.size() << '\n';
    put_floats(payload, v);
  };
  for (const auto& p : params) record("param", p->name, p->value);
  const bool moments = t.optimizer.m.size() == params.size() && t.optimizer.v.size() == params.size();
  if (moments)
    for (std::size_t i = 0; i < params.size(); ++i) {
      record("adam_m", params[i].name, t.optimizer.m[i]);
      record("adam_v", params[i].name, t.optimizer.v[i]);
    }
  man << "end " << payload.size() << '\n';

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp);
    const std::string head = man.str();
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw DataError("failed writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw DataError("cannot move checkpoint into place at " + path);
}

CheckpointData load_checkpoint(const std::string& path, ParameterStore* params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  auto fail = [&](const std::string& what) -> DataError {
    return DataError("checkpoint " + path + ": " + what);
  };
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw fail("not a checkpoint file");
  CheckpointData data;
  TrainerState& t = data.trainer;
  std::map<std::string, TensorRecord> param_rec, m_rec, v_rec;
  std::size_t payload_size = 0;
  bool ended = false;
  while (!ended && std::getline(in, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "payload") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "float32-le") throw fail("unsupported payload format " + fmt);
    } else if (key == "step") {
      ls >> t.step;
    } else if (key == "epoch") {
      ls >> t.epoch;
    } else if (key == "cursor") {
      ls >> t.cursor;
    } else if (key == "optimizer_step") {
      ls >> t.optimizer.step;
    } else if (key == "scheduler") {
      std::string lr, best;
      int stop = 0;
      ls >> lr >> best >> t.scheduler.since_improvement >> t.scheduler.since_halving >>
          t.scheduler.halvings >> stop;
      t.scheduler.lr = std::stod(lr);
      t.scheduler.best_dev_ppl = std::stod(best);
      t.scheduler.stop = stop != 0;
    } else if (key == "blob") {
      std::string name;
      std::size_t n = 0;
      ls >> name >> n;
      std::string text(n, '\0');
      in.read(text.data(), static_cast<std::streamsize>(n));
      in.get();
      if (!in) throw fail("truncated text blob " + name);
      if (name == "config") data.config = std::move(text);
      else if (name == "vocab") data.vocab = std::move(text);
      else if (name == "merges") data.merges = std::move(text);
      else if (name == "rng") t.rng = std::move(text);
    } else if (key == "tensor") {
      std::string kind, name, shape;
      TensorRecord r;
      ls >> kind >> name >> shape >> r.offset >> r.count;
      r.shape = parse_shape(shape);
      auto& table = kind == "param" ? param_rec : kind == "adam_m" ? m_rec : v_rec;
      table[name] = r;
    } else if (key == "end") {
      ls >> payload_size;
      ended = true;
    } else {
      throw fail("unknown manifest record '" + key + "'");
    }
    if (ls.fail()) throw fail("malformed manifest line '" + line + "'");
  }
  if (!ended) throw fail("manifest has no end record");
  std::string payload(payload_size, '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload_size));
  if (static_cast<std::size_t>(in.gcount()) != payload_size) throw fail("truncated payload");

  if (params) {
    if (param_rec.size() != params->size())
      throw fail("holds " + std::to_string(param_rec.size()) + " parameters, model has " +
                 std::to_string(params->size()));
    auto check = [&](const TensorRecord& r, const std::string& name, const Shape& want) {
      if (r.shape != want)
        throw fail("shape of " + name + " is " + shape_string(r.shape) + ", model expects " +
                   shape_string(want));
      if (r.offset + 4 * r.count > payload_size || r.count != shape_size(r.shape))
        throw fail("tensor " + name + " lies outside the payload");
    };
    for (auto& p : *params) {
      auto it = param_rec.find(p->name);
      if (it == param_rec.end()) throw fail("missing parameter " + p->name);
      check(it->second, p->name, p->value.shape());
      get_floats(payload, it->second.offset, p->value);
    }
    if (!m_rec.empty()) {
      t.optimizer.m.clear();
      t.optimizer.v.clear();
      for (auto& p : *params) {
        auto mi = m_rec.find(p->name), vi = v_rec.find(p->name);
        if (mi == m_rec.end() || vi == v_rec.end()) throw fail("missing moments of " + p->name);
        check(mi->second, p->name, p->value.shape());
        check(vi->second, p->name, p->value.shape());
        Tensor m(p->value.shape()), v(p->value.shape());
        get_floats(payload, mi->second.offset, m);
        get_floats(payload, vi->second.offset, v);
        t.optimizer.m.push_back(std::move(m));
        t.optimizer.v.push_back(std::move(v));
      }
    }
  }
  return data;
}

}  // namespace charnmt
