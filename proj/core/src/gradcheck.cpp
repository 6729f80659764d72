#include "charnmt/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "charnmt/decoder.hpp"
#include "charnmt/hm_encoder.hpp"

namespace charnmt::inline CHARNMT_ABI {

namespace {

using Outputs = std::vector<Var>;
using Forward = std::function<Outputs(Tape&, std::span<const Var>)>;

// One random point: differentiable leaf inputs, optional parameters, and the
// function under test.
struct Case {
  std::vector<Tensor> leaves;
  std::unique_ptr<ParameterStore> params;
  Forward forward;
};

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1, double hi = 1) {
  Tensor t(std::move(shape));
  for (Real& v : t.data()) v = static_cast<Real>(uniform(rng, lo, hi));
  return t;
}

// Moves entries out of [k - margin, k + margin] for every kink k.
void avoid_kinks(Tensor& t, std::initializer_list<double> kinks, double margin = 0.02) {
  for (Real& v : t.data())
    for (double k : kinks)
      if (std::abs(v - k) < margin) v = static_cast<Real>(v >= k ? k + 2 * margin : k - 2 * margin);
}

void randomize(ParameterStore& store, Rng& rng, double range = 0.8) {
  for (auto& p : store)
    for (Real& v : p->value.data()) v = static_cast<Real>(uniform(rng, -range, range));
}

double weighted_total(const Outputs& outs, const std::vector<Tensor>& weights) {
  double acc = 0;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const Tensor& v = outs[i].value();
    for (std::size_t k = 0; k < v.size(); ++k)
      acc += static_cast<double>(v[k]) * static_cast<double>(weights[i][k]);
  }
  return acc;
}

class Checker {
 public:
  explicit Checker(const GradSuiteOptions& o) : options_(o), rng_(o.seed) {}

  void run(const std::string& name, const std::function<Case(Rng&)>& make) {
    if (!options_.filter.empty() && name.find(options_.filter) == std::string::npos) return;
    GradCheckResult r;
    r.name = name;
    for (std::size_t point = 0; point < options_.points; ++point) {
      Case c = make(rng_);
      check_point(c, r);
      ++r.points;
    }
    report_.results.push_back(r);
  }

  GradSuiteReport finish(double seconds) {
    report_.seconds = seconds;
    return std::move(report_);
  }

 private:
  double evaluate(Case& c, const std::vector<Tensor>& weights) {
    Tape tape(false);
    std::vector<Var> leaves;
    for (const auto& l : c.leaves) leaves.push_back(tape.constant(l));
    return weighted_total(c.forward(tape, leaves), weights);
  }

  // Fourth-order central stencil; the plain two-point form loses accuracy
  // where the function curves sharply (layer norm of near-constant vectors).
  double central_difference(Case& c, const std::vector<Tensor>& weights, Real& x, double h) {
    const Real x0 = x;
    auto at = [&](double offset) {
      x = static_cast<Real>(x0 + offset);
      return evaluate(c, weights);
    };
    const double d = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h);
    x = x0;
    return d;
  }

  void compare(double analytic, double numeric, GradCheckResult& r) {
    const double err =
        std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
    r.max_error = std::max(r.max_error, err);
    ++r.coordinates;
    if (!(err <= options_.tolerance)) ++r.failures;
  }

  void check_point(Case& c, GradCheckResult& r) {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& l : c.leaves) leaves.push_back(tape.leaf(l));
    if (c.params) c.params->zero_grad();
    Outputs outs = c.forward(tape, leaves);
    std::vector<Tensor> weights;
    std::vector<Var> terms;
    for (const Var& o : outs) {
      weights.push_back(random_tensor(rng_, o.shape()));
      terms.push_back(dot_const(o, weights.back()));
    }
    tape.backward(terms.size() == 1 ? terms[0] : add_n(terms));

    const double h = options_.step;
    for (std::size_t i = 0; i < c.leaves.size(); ++i) {
      const Tensor g = tape.grad(leaves[i]);
      for (std::size_t k = 0; k < c.leaves[i].size(); ++k) {
        compare(g[k], central_difference(c, weights, c.leaves[i][k], h), r);
      }
    }
    if (!c.params) return;
    for (auto& p : *c.params) {
      const Tensor g = p->grad;
      for (std::size_t k = 0; k < p->value.size(); ++k) {
        compare(g[k], central_difference(c, weights, p->value[k], h), r);
      }
    }
  }

  GradSuiteOptions options_;
  Rng rng_;
  GradSuiteReport report_;
};

Case unary(Rng& rng, Var (*fn)(Var)) {
  const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 4);
  return {{random_tensor(rng, {n, d}, -2, 2)}, nullptr,
          [fn](Tape&, std::span<const Var> in) { return Outputs{fn(in[0])}; }};
}

Case binary(Rng& rng, Var (*fn)(Var, Var)) {
  const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 4);
  return {{random_tensor(rng, {n, d}), random_tensor(rng, {n, d})}, nullptr,
          [fn](Tape&, std::span<const Var> in) { return Outputs{fn(in[0], in[1])}; }};
}

Tensor random_mask(Rng& rng, std::size_t n, std::size_t t) {
  Tensor m(Shape{n, t});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < t; ++j) m[r * t + j] = uniform(rng, 0, 1) < 0.7 ? 1 : 0;
    m[r * t + pick(rng, 0, t - 1)] = 1;
  }
  return m;
}

void primitive_checks(Checker& ck) {
  ck.run("add", [](Rng& rng) { return binary(rng, add); });
  ck.run("sub", [](Rng& rng) { return binary(rng, sub); });
  ck.run("mul", [](Rng& rng) { return binary(rng, mul); });
  ck.run("scale", [](Rng& rng) {
    const Real s = static_cast<Real>(uniform(rng, -2, 2));
    Case c = unary(rng, sigmoid);
    c.forward = [s](Tape&, std::span<const Var> in) { return Outputs{scale(in[0], s)}; };
    return c;
  });
  ck.run("add_n", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 4);
    return Case{{random_tensor(rng, {n, d}), random_tensor(rng, {n, d}), random_tensor(rng, {n, d})},
                nullptr, [](Tape&, std::span<const Var> in) { return Outputs{add_n(in)}; }};
  });
  ck.run("add_row_bias", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 4);
    return Case{{random_tensor(rng, {n, d}), random_tensor(rng, {d})}, nullptr,
                [](Tape&, std::span<const Var> in) { return Outputs{add_row_bias(in[0], in[1])}; }};
  });
  ck.run("matmul", [](Rng& rng) {
    const std::size_t m = pick(rng, 1, 3), k = pick(rng, 1, 4), n = pick(rng, 1, 3);
    return Case{{random_tensor(rng, {m, k}), random_tensor(rng, {k, n})}, nullptr,
                [](Tape&, std::span<const Var> in) { return Outputs{matmul(in[0], in[1])}; }};
  });
  ck.run("affine", [](Rng& rng) {
    const std::size_t a = pick(rng, 1, 2), b = pick(rng, 1, 3), k = pick(rng, 1, 3),
                      n = pick(rng, 1, 3);
    return Case{{random_tensor(rng, {a, b, k}), random_tensor(rng, {k, n}), random_tensor(rng, {n})},
                nullptr,
                [](Tape&, std::span<const Var> in) { return Outputs{affine(in[0], in[1], in[2])}; }};
  });
  ck.run("sigmoid", [](Rng& rng) { return unary(rng, sigmoid); });
  ck.run("tanh", [](Rng& rng) { return unary(rng, tanh); });
  ck.run("relu", [](Rng& rng) {
    Case c = unary(rng, relu);
    avoid_kinks(c.leaves[0], {0.0});
    return c;
  });
  ck.run("sum", [](Rng& rng) { return unary(rng, sum); });
  ck.run("dot_const", [](Rng& rng) {
    Case c = unary(rng, sum);
    Tensor w = random_tensor(rng, c.leaves[0].shape());
    c.forward = [w](Tape&, std::span<const Var> in) { return Outputs{dot_const(in[0], w)}; };
    return c;
  });
  ck.run("reshape", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 4);
    return Case{{random_tensor(rng, {n, d})}, nullptr, [n, d](Tape&, std::span<const Var> in) {
                  return Outputs{mul(reshape(in[0], Shape{d, n}), reshape(in[0], Shape{d, n}))};
                }};
  });
  ck.run("concat_cols", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3);
    return Case{{random_tensor(rng, {n, pick(rng, 1, 3)}), random_tensor(rng, {n, pick(rng, 1, 3)}),
                 random_tensor(rng, {n, pick(rng, 1, 3)})},
                nullptr, [](Tape&, std::span<const Var> in) { return Outputs{concat_cols(in)}; }};
  });
  ck.run("slice_cols", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 2, 5);
    const std::size_t start = pick(rng, 0, d - 1), len = pick(rng, 1, d - start);
    return Case{{random_tensor(rng, {n, d})}, nullptr, [start, len](Tape&, std::span<const Var> in) {
                  return Outputs{slice_cols(in[0], start, len)};
                }};
  });
  ck.run("stack_steps", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 3);
    return Case{{random_tensor(rng, {n, d}), random_tensor(rng, {n, d})}, nullptr,
                [](Tape&, std::span<const Var> in) { return Outputs{stack_steps(in)}; }};
  });
  ck.run("tile_rows", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3);
    return Case{{random_tensor(rng, {1, pick(rng, 1, 3), pick(rng, 1, 3)})}, nullptr,
                [n](Tape&, std::span<const Var> in) { return Outputs{tile_rows(in[0], n)}; }};
  });
  ck.run("layer_norm", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 2, 5);
    return Case{{random_tensor(rng, {n, d}, -2, 2), random_tensor(rng, {d}), random_tensor(rng, {d})},
                nullptr, [](Tape&, std::span<const Var> in) {
                  return Outputs{layer_norm(in[0], in[1], in[2], kLayerNormEpsilon)};
                }};
  });
  ck.run("hard_sigmoid", [](Rng& rng) {
    const Real slope = static_cast<Real>(uniform(rng, 1, 5));
    Case c = unary(rng, sigmoid);
    avoid_kinks(c.leaves[0], {-1.0 / slope, 1.0 / slope}, 0.01);
    c.forward = [slope](Tape&, std::span<const Var> in) { return Outputs{hard_sigmoid(in[0], slope)}; };
    return c;
  });
  ck.run("dropout", [](Rng& rng) {
    const std::uint64_t seed = rng();
    Case c = unary(rng, sigmoid);
    c.forward = [seed](Tape&, std::span<const Var> in) {
      Rng local(seed);
      return Outputs{dropout(in[0], Real(0.3), true, local)};
    };
    return c;
  });
  ck.run("lstm_pointwise", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), h = pick(rng, 1, 3);
    return Case{{random_tensor(rng, {n, 4 * h}, -2, 2), random_tensor(rng, {n, h})}, nullptr,
                [](Tape&, std::span<const Var> in) {
                  LstmOut o = lstm_pointwise(in[0], in[1]);
                  return Outputs{o.h, o.c};
                }};
  });
  ck.run("blend", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 4);
    return Case{{random_tensor(rng, {n, 1}, 0.1, 0.9), random_tensor(rng, {n, d}),
                 random_tensor(rng, {n, d})},
                nullptr,
                [](Tape&, std::span<const Var> in) { return Outputs{blend(in[0], in[1], in[2])}; }};
  });
  ck.run("scale_rows", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 4);
    return Case{{random_tensor(rng, {n, d}), random_tensor(rng, {n, 1})}, nullptr,
                [](Tape&, std::span<const Var> in) { return Outputs{scale_rows(in[0], in[1])}; }};
  });
  ck.run("embedding", [](Rng& rng) {
    const std::size_t v = pick(rng, 2, 5), d = pick(rng, 1, 3), n = pick(rng, 1, 4);
    std::vector<int> ids(n);
    for (int& i : ids) i = static_cast<int>(pick(rng, 0, v - 1));
    return Case{{random_tensor(rng, {v, d})}, nullptr, [ids](Tape&, std::span<const Var> in) {
                  return Outputs{embedding(in[0], ids)};
                }};
  });
  ck.run("attention_scores", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), t = pick(rng, 1, 4), a = pick(rng, 1, 3);
    return Case{{random_tensor(rng, {n, a}), random_tensor(rng, {n, t, a}), random_tensor(rng, {a})},
                nullptr, [](Tape&, std::span<const Var> in) {
                  return Outputs{attention_scores(in[0], in[1], in[2])};
                }};
  });
  ck.run("masked_softmax", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), t = pick(rng, 1, 5);
    Tensor mask = random_mask(rng, n, t);
    return Case{{random_tensor(rng, {n, t}, -3, 3)}, nullptr, [mask](Tape&, std::span<const Var> in) {
                  return Outputs{masked_softmax(in[0], mask)};
                }};
  });
  ck.run("weighted_sum", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), t = pick(rng, 1, 4), d = pick(rng, 1, 3);
    return Case{{random_tensor(rng, {n, t}), random_tensor(rng, {n, t, d})}, nullptr,
                [](Tape&, std::span<const Var> in) { return Outputs{weighted_sum(in[0], in[1])}; }};
  });
  ck.run("cross_entropy", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 4), v = pick(rng, 2, 6);
    std::vector<int> targets(n);
    std::vector<Real> weights(n);
    for (std::size_t i = 0; i < n; ++i) {
      targets[i] = static_cast<int>(pick(rng, 0, v - 1));
      weights[i] = static_cast<Real>(pick(rng, 0, 2)) / 2;
    }
    return Case{{random_tensor(rng, {n, v}, -3, 3)}, nullptr,
                [targets, weights](Tape&, std::span<const Var> in) {
                  return Outputs{cross_entropy(in[0], targets, weights)};
                }};
  });
  ck.run("weighted_combine", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 3), k = pick(rng, 1, 3);
    Tensor w = random_tensor(rng, {n, k});
    Case c{{}, nullptr, [w](Tape&, std::span<const Var> in) { return Outputs{weighted_combine(in, w)}; }};
    for (std::size_t i = 0; i < k; ++i) c.leaves.push_back(random_tensor(rng, {n, d}));
    return c;
  });
  ck.run("masked_max", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 3), k = pick(rng, 1, 3);
    Tensor mask = random_mask(rng, n, k);
    Case c{{}, nullptr, [mask](Tape&, std::span<const Var> in) { return Outputs{masked_max(in, mask)}; }};
    // members spaced apart so that no perturbation flips the maximum
    for (std::size_t i = 0; i < k; ++i) {
      Tensor t = random_tensor(rng, {n, d}, -0.4, 0.4);
      for (Real& v : t.data()) v = static_cast<Real>(v + static_cast<double>(i));
      c.leaves.push_back(std::move(t));
    }
    std::shuffle(c.leaves.begin(), c.leaves.end(), rng);
    return c;
  });
  ck.run("gather_rows", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 1, 3), t = pick(rng, 1, 3);
    std::vector<std::ptrdiff_t> index(n);
    for (auto& i : index) i = static_cast<std::ptrdiff_t>(pick(rng, 0, t)) - 1;
    Case c{{}, nullptr, [index](Tape&, std::span<const Var> in) { return Outputs{gather_rows(in, index)}; }};
    for (std::size_t i = 0; i < t; ++i) c.leaves.push_back(random_tensor(rng, {n, d}));
    return c;
  });
  ck.run("compression_penalty", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), L = pick(rng, 1, 3);
    const bool literal = pick(rng, 0, 1) == 1;
    std::vector<Real> lengths(n);
    Tensor counts(Shape{n, L});
    for (std::size_t r = 0; r < n; ++r) {
      lengths[r] = static_cast<Real>(pick(rng, 4, 20));
      const double T = lengths[r];
      for (std::size_t l = 0; l < L; ++l) {
        double z = uniform(rng, 0.05 * T, 0.95 * T);
        for (double k : {0.1 * T, 0.9 * T, 0.5 * T})
          if (std::abs(z - k) < 0.05) z = k + 0.1;
        counts[r * L + l] = static_cast<Real>(z);
      }
    }
    return Case{{counts}, nullptr, [lengths, literal](Tape&, std::span<const Var> in) {
                  return Outputs{compression_penalty(in[0], lengths, Real(0.1), Real(0.9), literal)};
                }};
  });
}

void composite_checks(Checker& ck) {
  ck.run("lstm_cell", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), in = pick(rng, 1, 3), h = pick(rng, 1, 3);
    auto store = std::make_unique<ParameterStore>();
    LstmCell cell = LstmCell::create(*store, "cell", in, h);
    randomize(*store, rng);
    return Case{{random_tensor(rng, {n, in}), random_tensor(rng, {n, h}), random_tensor(rng, {n, h})},
                std::move(store), [cell](Tape& tape, std::span<const Var> v) {
                  LstmOut o = cell.step(tape, v[0], v[1], v[2]);
                  return Outputs{o.h, o.c};
                }};
  });
  ck.run("layer_norm_module", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 3), d = pick(rng, 2, 5);
    auto store = std::make_unique<ParameterStore>();
    LayerNorm ln = LayerNorm::create(*store, "ln", d);
    randomize(*store, rng, 1.5);
    return Case{{random_tensor(rng, {n, d}, -2, 2)}, std::move(store),
                [ln](Tape& tape, std::span<const Var> v) { return Outputs{ln(tape, v[0])}; }};
  });
  ck.run("bilstm_layer", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 2), h = pick(rng, 1, 2), T = pick(rng, 1, 3);
    auto store = std::make_unique<ParameterStore>();
    BiLstmLayer layer = BiLstmLayer::create(*store, "bi", in, h);
    randomize(*store, rng);
    std::vector<std::size_t> lengths{T, pick(rng, 1, T)};
    Case c{{}, std::move(store), [layer, lengths](Tape& tape, std::span<const Var> v) {
             SequenceBatch seq{{v.begin(), v.end()}, lengths};
             SequenceBatch out = layer(tape, seq);
             Outputs o;
             for (std::size_t t = 0; t < out.time(); ++t)
               o.push_back(scale_rows(out.steps[t], tape.constant(seq.step_mask(t))));
             return o;
           }};
    for (std::size_t t = 0; t < T; ++t) c.leaves.push_back(random_tensor(rng, {2, in}));
    return c;
  });
  ck.run("additive_attention", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), t = pick(rng, 1, 4), q = pick(rng, 1, 3),
                      k = pick(rng, 1, 3), a = pick(rng, 1, 3);
    auto store = std::make_unique<ParameterStore>();
    AdditiveAttention att = AdditiveAttention::create(*store, "att", q, k, a);
    randomize(*store, rng);
    Tensor mask = random_mask(rng, n, t);
    return Case{{random_tensor(rng, {n, q}), random_tensor(rng, {n, t, k})}, std::move(store),
                [att, mask](Tape& tape, std::span<const Var> v) {
                  AttentionResult r =
                      additive_attention(tape, att, v[0], att.project_keys(tape, v[1]), v[1], mask);
                  return Outputs{r.context, r.weights};
                }};
  });
  ck.run("hm_cell_gate_open", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), in = pick(rng, 1, 3), h = pick(rng, 1, 3);
    auto store = std::make_unique<ParameterStore>();
    HmLayer layer = HmLayer::create(*store, "hm", in, h, 1.0);
    randomize(*store, rng);
    const Real slope = static_cast<Real>(uniform(rng, 1, 5));
    return Case{{random_tensor(rng, {n, in}), random_tensor(rng, {n, h}), random_tensor(rng, {n, h})},
                std::move(store), [layer, n, slope](Tape& tape, std::span<const Var> v) {
                  Var open = tape.constant(Tensor(Shape{n, 1}, Real(1)));
                  HmCellOut o = hm_cell_step(tape, layer, v[0], v[1], v[2], open, slope);
                  return Outputs{o.h, o.c};
                }};
  });
  ck.run("hm_stack_gate_open", [](Rng& rng) {
    const std::size_t in = pick(rng, 1, 2), h = pick(rng, 1, 2), T = pick(rng, 1, 3),
                      L = pick(rng, 2, 3);
    auto store = std::make_unique<ParameterStore>();
    std::vector<HmLayer> layers;
    for (std::size_t l = 0; l < L; ++l)
      layers.push_back(HmLayer::create(*store, "hm" + std::to_string(l), l ? h : in, h, 1.0));
    randomize(*store, rng, 0.2);
    // the saturated gate keeps every boundary open, so the straight-through
    // path contributes nothing and the gradient is exact
    for (auto& l : layers) l.gate_bias->value.fill(Real(10));
    Case c{{}, std::move(store), [layers](Tape& tape, std::span<const Var> v) {
             SequenceBatch seq{{v.begin(), v.end()}, {v.size()}};
             HmStackResult r = hm_stack_forward(tape, seq, layers, Real(1));
             Outputs o;
             for (const auto& layer : r.h) o.insert(o.end(), layer.begin(), layer.end());
             return o;
           }};
    for (std::size_t t = 0; t < T; ++t) c.leaves.push_back(random_tensor(rng, {1, in}));
    return c;
  });
  ck.run("gated_output", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), L = pick(rng, 1, 3), h = pick(rng, 1, 3),
                      out = pick(rng, 1, 3);
    for (;;) {
      auto store = std::make_unique<ParameterStore>();
      GatedOutput g = GatedOutput::create(*store, "gated", L, h, out);
      randomize(*store, rng);
      std::vector<Tensor> states;
      for (std::size_t l = 0; l < L; ++l) states.push_back(random_tensor(rng, {n, h}));
      // resample points whose relu input lies near the kink
      Tape probe(false);
      std::vector<Var> vs;
      for (const auto& s : states) vs.push_back(probe.constant(s));
      Var gates = sigmoid(add_row_bias(matmul(L == 1 ? vs[0] : concat_cols(vs),
                                              probe.param(*g.gate_weight)),
                                       probe.param(*g.gate_bias)));
      std::vector<Var> terms;
      for (std::size_t l = 0; l < L; ++l)
        terms.push_back(scale_rows(matmul(vs[l], probe.param(*g.projections[l])),
                                   slice_cols(gates, l, 1)));
      const Tensor& pre = add_n(terms).value();
      if (std::any_of(pre.data().begin(), pre.data().end(),
                      [](Real v) { return std::abs(v) < Real(1e-3); }))
        continue;
      return Case{std::move(states), std::move(store),
                  [g](Tape& tape, std::span<const Var> v) { return Outputs{g(tape, v)}; }};
    }
  });
  ck.run("decoder_step", [](Rng& rng) {
    const std::size_t n = pick(rng, 1, 2), t = pick(rng, 1, 3), m = pick(rng, 1, 3);
    DecoderConfig cfg;
    cfg.num_layers = 2;
    cfg.model_dim = 2;
    cfg.residual_start_layer = 2;
    cfg.dropout = 0;
    const std::size_t V = 6;
    auto store = std::make_unique<ParameterStore>();
    auto dec = std::make_shared<Decoder>(*store, cfg, m, V, "dec");
    randomize(*store, rng);
    std::vector<int> prev(n);
    for (int& p : prev) p = static_cast<int>(pick(rng, 0, V - 1));
    Tensor mask = random_mask(rng, n, t);
    return Case{{random_tensor(rng, {n, t, m}), random_tensor(rng, {n, 2}), random_tensor(rng, {n, 2})},
                std::move(store), [dec, prev, mask](Tape& tape, std::span<const Var> v) {
                  AttentionMemory mem = dec->prepare(tape, v[0], mask);
                  DecoderState s = dec->initial_state(tape, prev.size());
                  s.h[0] = v[1];
                  s.c[0] = v[2];
                  Rng unused;
                  DecoderStepOutput o = dec->step(tape, prev, s, mem, false, unused);
                  return Outputs{o.logits, o.state.h[1], o.state.c[0]};
                }};
  });
}

}  // namespace

GradSuiteReport run_gradient_suite(const GradSuiteOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  Checker ck(options);
  primitive_checks(ck);
  composite_checks(ck);
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
  return ck.finish(elapsed.count());
}

}  // namespace charnmt
