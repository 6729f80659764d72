#include "charnmt/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

namespace charnmt::inline CHARNMT_ABI {
namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

ConstMatMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMatMap(t.ptr(), static_cast<Eigen::Index>(rows),
                     static_cast<Eigen::Index>(cols));
}
MatMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MatMap(t.ptr(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(op) + ": shape mismatch " +
                            shape_string(a.shape()) + " vs " +
                            shape_string(b.shape()));
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank)
    throw ContractViolation(std::string(op) + ": expected rank " +
                            std::to_string(rank) + ", got " +
                            shape_string(a.shape()));
}

Tape& tape_of(std::span<const Var> xs, const char* op) {
  CHARNMT_REQUIRE(!xs.empty(), std::string(op) + ": empty input list");
  return *xs.front().tape;
}

bool any_requires_grad(const Tape& t, std::span<const Var> xs) {
  for (const Var& v : xs)
    if (t.requires_grad(v)) return true;
  return false;
}

// Pushes `out` and, if needed, a closure receiving the output gradient.
template <class Backward>
Var record(Tape& t, Tensor out, bool needs_grad, Backward&& backward) {
  Var o = t.push(std::move(out), needs_grad);
  if (t.requires_grad(o)) {
    t.on_backward([o, bw = std::forward<Backward>(backward)](Tape& tp) {
      const Tensor* g = tp.grad_or_null(o.id);
      if (g) bw(tp, *g);
    });
  }
  return o;
}

template <class F>
Var unary(Var a, F&& f) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (auto& x : out.data()) x = f(x);
  return t.push(std::move(out), t.requires_grad(a));
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(t.value(a), t.value(b), "add");
  Tensor out = t.value(a);
  out.add_scaled(t.value(b));
  return record(t, std::move(out), t.requires_grad_any({a, b}),
                [a, b](Tape& tp, const Tensor& g) {
                  if (tp.requires_grad(a)) tp.grad_ref(a.id).add_scaled(g);
                  if (tp.requires_grad(b)) tp.grad_ref(b.id).add_scaled(g);
                });
}

Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(t.value(a), t.value(b), "sub");
  Tensor out = t.value(a);
  out.add_scaled(t.value(b), Real(-1));
  return record(t, std::move(out), t.requires_grad_any({a, b}),
                [a, b](Tape& tp, const Tensor& g) {
                  if (tp.requires_grad(a)) tp.grad_ref(a.id).add_scaled(g);
                  if (tp.requires_grad(b)) tp.grad_ref(b.id).add_scaled(g, Real(-1));
                });
}

Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return record(t, std::move(out), t.requires_grad_any({a, b}),
                [a, b](Tape& tp, const Tensor& g) {
                  const Tensor& av = tp.value(a);
                  const Tensor& bv = tp.value(b);
                  if (tp.requires_grad(a)) {
                    Tensor& ga = tp.grad_ref(a.id);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                  }
                  if (tp.requires_grad(b)) {
                    Tensor& gb = tp.grad_ref(b.id);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                  }
                });
}

Var scale(Var a, Real s) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (auto& x : out.data()) x *= s;
  return record(t, std::move(out), t.requires_grad(a),
                [a, s](Tape& tp, const Tensor& g) {
                  tp.grad_ref(a.id).add_scaled(g, s);
                });
}

Var add_n(std::span<const Var> xs) {
  Tape& t = tape_of(xs, "add_n");
  Tensor out = t.value(xs[0]);
  for (std::size_t i = 1; i < xs.size(); ++i) {
    require_same_shape(out, t.value(xs[i]), "add_n");
    out.add_scaled(t.value(xs[i]));
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  return record(t, std::move(out), any_requires_grad(t, xs),
                [ins](Tape& tp, const Tensor& g) {
                  for (const Var& v : ins)
                    if (tp.requires_grad(v)) tp.grad_ref(v.id).add_scaled(g);
                });
}

Var add_row_bias(Var x, Var bias) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(bias);
  const std::size_t d = xv.cols();
  CHARNMT_REQUIRE(bv.size() == d, "add_row_bias: bias size " +
                                      std::to_string(bv.size()) + " vs " +
                                      std::to_string(d));
  Tensor out = xv;
  const std::size_t n = xv.rows();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] += bv[c];
  return record(t, std::move(out), t.requires_grad_any({x, bias}),
                [x, bias, n, d](Tape& tp, const Tensor& g) {
                  if (tp.requires_grad(x)) tp.grad_ref(x.id).add_scaled(g);
                  if (tp.requires_grad(bias)) {
                    Tensor& gb = tp.grad_ref(bias.id);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
                  }
                });
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  CHARNMT_REQUIRE(bv.dim(0) == k, "matmul: inner dims " + shape_string(av.shape()) +
                                      " . " + shape_string(bv.shape()));
  Tensor out(Shape{m, n});
  as_matrix(out, m, n).noalias() = as_matrix(av, m, k) * as_matrix(bv, k, n);
  return record(t, std::move(out), t.requires_grad_any({a, b}),
                [a, b, m, k, n](Tape& tp, const Tensor& g) {
                  auto gm = as_matrix(g, m, n);
                  if (tp.requires_grad(a)) {
                    Tensor& ga = tp.grad_ref(a.id);
                    as_matrix(ga, m, k).noalias() +=
                        gm * as_matrix(tp.value(b), k, n).transpose();
                  }
                  if (tp.requires_grad(b)) {
                    Tensor& gb = tp.grad_ref(b.id);
                    as_matrix(gb, k, n).noalias() +=
                        as_matrix(tp.value(a), m, k).transpose() * gm;
                  }
                });
}

Var affine(Var x, Var w, Var b) {
  const Shape in_shape = x.shape();
  CHARNMT_REQUIRE(!in_shape.empty(), "affine: scalar input");
  const std::size_t d = in_shape.back();
  const std::size_t rows = shape_size(in_shape) / std::max<std::size_t>(d, 1);
  Var flat = in_shape.size() == 2 ? x : reshape(x, Shape{rows, d});
  Var y = add_row_bias(matmul(flat, w), b);
  if (in_shape.size() == 2) return y;
  Shape out_shape = in_shape;
  out_shape.back() = y.shape()[1];
  return reshape(y, out_shape);
}

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Var o = unary(a, [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); });
  if (t.requires_grad(o)) {
    t.on_backward([a, o](Tape& tp) {
      const Tensor* g = tp.grad_or_null(o.id);
      if (!g) return;
      const Tensor& y = tp.value(o);
      Tensor& ga = tp.grad_ref(a.id);
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] += (*g)[i] * y[i] * (1 - y[i]);
    });
  }
  return o;
}

Var tanh(Var a) {
  Tape& t = *a.tape;
  Var o = unary(a, [](Real x) { return std::tanh(x); });
  if (t.requires_grad(o)) {
    t.on_backward([a, o](Tape& tp) {
      const Tensor* g = tp.grad_or_null(o.id);
      if (!g) return;
      const Tensor& y = tp.value(o);
      Tensor& ga = tp.grad_ref(a.id);
      for (std::size_t i = 0; i < y.size(); ++i) ga[i] += (*g)[i] * (1 - y[i] * y[i]);
    });
  }
  return o;
}

Var relu(Var a) {
  Tape& t = *a.tape;
  Var o = unary(a, [](Real x) { return x > 0 ? x : Real(0); });
  if (t.requires_grad(o)) {
    t.on_backward([a, o](Tape& tp) {
      const Tensor* g = tp.grad_or_null(o.id);
      if (!g) return;
      const Tensor& x = tp.value(a);
      Tensor& ga = tp.grad_ref(a.id);
      for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] > 0) ga[i] += (*g)[i];
    });
  }
  return o;
}

Var sum(Var a) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  Real s = 0;
  for (Real x : av.data()) s += x;
  return record(t, Tensor::scalar(s), t.requires_grad(a),
                [a](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad_ref(a.id);
                  const Real gv = g[0];
                  for (auto& x : ga.data()) x += gv;
                });
}

Var dot_const(Var a, const Tensor& w) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  CHARNMT_REQUIRE(av.size() == w.size(), "dot_const: size mismatch");
  Real s = 0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * w[i];
  return record(t, Tensor::scalar(s), t.requires_grad(a),
                [a, w](Tape& tp, const Tensor& g) {
                  tp.grad_ref(a.id).add_scaled(w, g[0]);
                });
}

Var reshape(Var a, Shape shape) {
  Tape& t = *a.tape;
  CHARNMT_REQUIRE(shape_size(shape) == t.value(a).size(),
                  "reshape: " + shape_string(t.value(a).shape()) + " -> " +
                      shape_string(shape));
  Tensor out = t.value(a).reshaped(std::move(shape));
  return record(t, std::move(out), t.requires_grad(a),
                [a](Tape& tp, const Tensor& g) { tp.grad_ref(a.id).add_scaled(g); });
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var concat_cols(std::span<const Var> xs) {
  Tape& t = tape_of(xs, "concat_cols");
  const std::size_t n = t.value(xs[0]).rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& v : xs) {
    const Tensor& tv = t.value(v);
    require_rank(tv, 2, "concat_cols");
    CHARNMT_REQUIRE(tv.rows() == n, "concat_cols: row count mismatch");
    widths.push_back(tv.cols());
    total += tv.cols();
  }
  Tensor out(Shape{n, total});
  std::size_t off = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const Tensor& tv = t.value(xs[i]);
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(tv.ptr() + r * widths[i], widths[i], out.ptr() + r * total + off);
    off += widths[i];
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  return record(t, std::move(out), any_requires_grad(t, xs),
                [ins, widths, n, total](Tape& tp, const Tensor& g) {
                  std::size_t off = 0;
                  for (std::size_t i = 0; i < ins.size(); ++i) {
                    if (tp.requires_grad(ins[i])) {
                      Tensor& gi = tp.grad_ref(ins[i].id);
                      for (std::size_t r = 0; r < n; ++r)
                        for (std::size_t c = 0; c < widths[i]; ++c)
                          gi[r * widths[i] + c] += g[r * total + off + c];
                    }
                    off += widths[i];
                  }
                });
}

Var slice_cols(Var a, std::size_t start, std::size_t len) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  require_rank(av, 2, "slice_cols");
  const std::size_t n = av.rows(), d = av.cols();
  CHARNMT_REQUIRE(start + len <= d, "slice_cols: range out of bounds");
  Tensor out(Shape{n, len});
  for (std::size_t r = 0; r < n; ++r)
    std::copy_n(av.ptr() + r * d + start, len, out.ptr() + r * len);
  return record(t, std::move(out), t.requires_grad(a),
                [a, n, d, start, len](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad_ref(a.id);
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < len; ++c)
                      ga[r * d + start + c] += g[r * len + c];
                });
}

Var stack_steps(std::span<const Var> steps) {
  Tape& t = tape_of(steps, "stack_steps");
  const Tensor& first = t.value(steps[0]);
  require_rank(first, 2, "stack_steps");
  const std::size_t n = first.rows(), d = first.cols(), T = steps.size();
  Tensor out(Shape{n, T, d});
  for (std::size_t s = 0; s < T; ++s) {
    const Tensor& sv = t.value(steps[s]);
    CHARNMT_REQUIRE(sv.rows() == n && sv.cols() == d, "stack_steps: step shape mismatch");
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(sv.ptr() + r * d, d, out.ptr() + (r * T + s) * d);
  }
  std::vector<Var> ins(steps.begin(), steps.end());
  return record(t, std::move(out), any_requires_grad(t, steps),
                [ins, n, d, T](Tape& tp, const Tensor& g) {
                  for (std::size_t s = 0; s < T; ++s) {
                    if (!tp.requires_grad(ins[s])) continue;
                    Tensor& gs = tp.grad_ref(ins[s].id);
                    for (std::size_t r = 0; r < n; ++r)
                      for (std::size_t c = 0; c < d; ++c)
                        gs[r * d + c] += g[(r * T + s) * d + c];
                  }
                });
}

Var tile_rows(Var a, std::size_t n) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  CHARNMT_REQUIRE(av.rank() >= 1 && av.dim(0) == 1, "tile_rows: leading dim must be 1");
  Shape shape = av.shape();
  shape[0] = n;
  const std::size_t block = av.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < n; ++r) std::copy_n(av.ptr(), block, out.ptr() + r * block);
  return record(t, std::move(out), t.requires_grad(a),
                [a, n, block](Tape& tp, const Tensor& g) {
                  Tensor& ga = tp.grad_ref(a.id);
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t i = 0; i < block; ++i) ga[i] += g[r * block + i];
                });
}

Var layer_norm(Var x, Var gain, Var bias, Real epsilon) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  CHARNMT_REQUIRE(xv.rank() >= 1 && xv.cols() >= 1, "layer_norm: last dimension is 0");
  const std::size_t d = xv.cols(), n = xv.rows();
  const Tensor& gv = t.value(gain);
  const Tensor& bv = t.value(bias);
  CHARNMT_REQUIRE(gv.size() == d && bv.size() == d, "layer_norm: gain/bias size");
  Tensor normed(xv.shape());
  Tensor inv_std(Shape{n});
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const Real* row = xv.ptr() + r * d;
    Real mean = 0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= Real(d);
    Real var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= Real(d);
    const Real is = Real(1) / std::sqrt(var + epsilon);
    inv_std[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const Real nh = (row[c] - mean) * is;
      normed[r * d + c] = nh;
      out[r * d + c] = gv[c] * nh + bv[c];
    }
  }
  return record(
      t, std::move(out), t.requires_grad_any({x, gain, bias}),
      [x, gain, bias, normed, inv_std, n, d](Tape& tp, const Tensor& g) {
        const Tensor& gv = tp.value(gain);
        if (tp.requires_grad(gain)) {
          Tensor& gg = tp.grad_ref(gain.id);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * normed[r * d + c];
        }
        if (tp.requires_grad(bias)) {
          Tensor& gb = tp.grad_ref(bias.id);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
        }
        if (tp.requires_grad(x)) {
          Tensor& gx = tp.grad_ref(x.id);
          std::vector<Real> gn(d);
          for (std::size_t r = 0; r < n; ++r) {
            Real mean_gn = 0, mean_gn_n = 0;
            for (std::size_t c = 0; c < d; ++c) {
              gn[c] = g[r * d + c] * gv[c];
              mean_gn += gn[c];
              mean_gn_n += gn[c] * normed[r * d + c];
            }
            mean_gn /= Real(d);
            mean_gn_n /= Real(d);
            for (std::size_t c = 0; c < d; ++c)
              gx[r * d + c] +=
                  inv_std[r] * (gn[c] - mean_gn - normed[r * d + c] * mean_gn_n);
          }
        }
      });
}

namespace {
Real hard_sigmoid_value(Real a, Real slope) {
  return std::clamp((slope * a + Real(1)) / Real(2), Real(0), Real(1));
}
Real hard_sigmoid_slope(Real a, Real slope) {
  const Real y = (slope * a + Real(1)) / Real(2);
  return (y > 0 && y < 1) ? slope / Real(2) : Real(0);
}
Var hard_gate(Var a, Real slope, bool binary) {
  CHARNMT_REQUIRE(slope > 0, "hard sigmoid: slope must be positive");
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (auto& x : out.data())
    x = binary ? (x > 0 ? Real(1) : Real(0)) : hard_sigmoid_value(x, slope);
  return record(t, std::move(out), t.requires_grad(a),
                [a, slope](Tape& tp, const Tensor& g) {
                  const Tensor& av = tp.value(a);
                  Tensor& ga = tp.grad_ref(a.id);
                  for (std::size_t i = 0; i < av.size(); ++i)
                    ga[i] += g[i] * hard_sigmoid_slope(av[i], slope);
                });
}
}  // namespace

Var hard_sigmoid(Var a, Real slope) { return hard_gate(a, slope, false); }

Var straight_through_step(Var a, Real slope) { return hard_gate(a, slope, true); }

Var dropout(Var x, Real rate, bool training, Rng& rng) {
  CHARNMT_REQUIRE(rate >= 0 && rate < 1, "dropout: rate must be in [0, 1)");
  if (!training || rate == 0) return x;
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  Tensor mask(xv.shape());
  const Real keep_scale = Real(1) / (Real(1) - rate);
  for (auto& m : mask.data()) m = uniform(rng, 0.0, 1.0) < rate ? Real(0) : keep_scale;
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return record(t, std::move(out), t.requires_grad(x),
                [x, mask](Tape& tp, const Tensor& g) {
                  Tensor& gx = tp.grad_ref(x.id);
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                });
}

LstmOut lstm_pointwise(Var preact, Var c_prev) {
  Tape& t = *preact.tape;
  const Tensor& pv = t.value(preact);
  const Tensor& cv = t.value(c_prev);
  require_rank(pv, 2, "lstm_pointwise");
  const std::size_t n = pv.rows(), H = cv.cols();
  CHARNMT_REQUIRE(pv.cols() == 4 * H && cv.rows() == n, "lstm_pointwise: shapes " +
                                                            shape_string(pv.shape()) + ", " +
                                                            shape_string(cv.shape()));
  Tensor act(pv.shape());
  Tensor h(Shape{n, H}), c(Shape{n, H});
  for (std::size_t r = 0; r < n; ++r) {
    const Real* p = pv.ptr() + r * 4 * H;
    Real* a = act.ptr() + r * 4 * H;
    for (std::size_t k = 0; k < H; ++k) {
      const Real i = Real(1) / (Real(1) + std::exp(-p[k]));
      const Real f = Real(1) / (Real(1) + std::exp(-p[H + k]));
      const Real gg = std::tanh(p[2 * H + k]);
      const Real o = Real(1) / (Real(1) + std::exp(-p[3 * H + k]));
      a[k] = i;
      a[H + k] = f;
      a[2 * H + k] = gg;
      a[3 * H + k] = o;
      const Real cn = f * cv[r * H + k] + i * gg;
      c[r * H + k] = cn;
      h[r * H + k] = o * std::tanh(cn);
    }
  }
  const bool needs = t.requires_grad_any({preact, c_prev});
  Var hv = t.push(std::move(h), needs);
  Var cvv = t.push(std::move(c), needs);
  if (t.requires_grad(hv)) {
    t.on_backward([preact, c_prev, hv, cvv, act = std::move(act), n, H](Tape& tp) {
      const Tensor* gh = tp.grad_or_null(hv.id);
      const Tensor* gc = tp.grad_or_null(cvv.id);
      if (!gh && !gc) return;
      const Tensor& cn = tp.value(cvv);
      const Tensor& cp = tp.value(c_prev);
      Tensor* gp = tp.requires_grad(preact) ? &tp.grad_ref(preact.id) : nullptr;
      Tensor* gcp = tp.requires_grad(c_prev) ? &tp.grad_ref(c_prev.id) : nullptr;
      for (std::size_t r = 0; r < n; ++r) {
        const Real* a = act.ptr() + r * 4 * H;
        for (std::size_t k = 0; k < H; ++k) {
          const std::size_t idx = r * H + k;
          const Real i = a[k], f = a[H + k], gg = a[2 * H + k], o = a[3 * H + k];
          const Real tc = std::tanh(cn[idx]);
          const Real dh = gh ? (*gh)[idx] : Real(0);
          const Real dc = (gc ? (*gc)[idx] : Real(0)) + dh * o * (1 - tc * tc);
          if (gp) {
            Real* d = gp->ptr() + r * 4 * H;
            d[k] += dc * gg * i * (1 - i);
            d[H + k] += dc * cp[idx] * f * (1 - f);
            d[2 * H + k] += dc * i * (1 - gg * gg);
            d[3 * H + k] += dh * tc * o * (1 - o);
          }
          if (gcp) (*gcp)[idx] += dc * f;
        }
      }
    });
  }
  return {hv, cvv};
}

Var blend(Var gate, Var a, Var b) {
  Tape& t = *gate.tape;
  const Tensor& gv = t.value(gate);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "blend");
  const std::size_t n = av.rows(), d = av.cols();
  CHARNMT_REQUIRE(gv.size() == n, "blend: gate must be [N x 1]");
  Tensor out(av.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const Real z = gv[r];
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t i = r * d + c;
      if (z == Real(1))
        out[i] = av[i];
      else if (z == Real(0))
        out[i] = bv[i];
      else
        out[i] = z * av[i] + (Real(1) - z) * bv[i];
    }
  }
  return record(t, std::move(out), t.requires_grad_any({gate, a, b}),
                [gate, a, b, n, d](Tape& tp, const Tensor& g) {
                  const Tensor& gv = tp.value(gate);
                  const Tensor& av = tp.value(a);
                  const Tensor& bv = tp.value(b);
                  Tensor* gg = tp.requires_grad(gate) ? &tp.grad_ref(gate.id) : nullptr;
                  Tensor* ga = tp.requires_grad(a) ? &tp.grad_ref(a.id) : nullptr;
                  Tensor* gb = tp.requires_grad(b) ? &tp.grad_ref(b.id) : nullptr;
                  for (std::size_t r = 0; r < n; ++r) {
                    const Real z = gv[r];
                    Real acc = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                      const std::size_t i = r * d + c;
                      if (ga) (*ga)[i] += z * g[i];
                      if (gb) (*gb)[i] += (Real(1) - z) * g[i];
                      acc += (av[i] - bv[i]) * g[i];
                    }
                    if (gg) (*gg)[r] += acc;
                  }
                });
}

Var scale_rows(Var x, Var s) {
  Tape& t = *x.tape;
  const Tensor& xv = t.value(x);
  const Tensor& sv = t.value(s);
  const std::size_t n = xv.rows(), d = xv.cols();
  CHARNMT_REQUIRE(sv.size() == n, "scale_rows: scale must be [N x 1]");
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] * sv[r];
  return record(t, std::move(out), t.requires_grad_any({x, s}),
                [x, s, n, d](Tape& tp, const Tensor& g) {
                  const Tensor& xv = tp.value(x);
                  const Tensor& sv = tp.value(s);
                  Tensor* gx = tp.requires_grad(x) ? &tp.grad_ref(x.id) : nullptr;
                  Tensor* gs = tp.requires_grad(s) ? &tp.grad_ref(s.id) : nullptr;
                  for (std::size_t r = 0; r < n; ++r) {
                    Real acc = 0;
                    for (std::size_t c = 0; c < d; ++c) {
                      const std::size_t i = r * d + c;
                      if (gx) (*gx)[i] += g[i] * sv[r];
                      acc += g[i] * xv[i];
                    }
                    if (gs) (*gs)[r] += acc;
                  }
                });
}

Var embedding(Var table, std::span<const int> ids) {
  Tape& t = *table.tape;
  const Tensor& tv = t.value(table);
  require_rank(tv, 2, "embedding");
  const std::size_t V = tv.dim(0), e = tv.dim(1), n = ids.size();
  Tensor out(Shape{n, e});
  for (std::size_t r = 0; r < n; ++r) {
    CHARNMT_REQUIRE(ids[r] >= 0 && static_cast<std::size_t>(ids[r]) < V,
                    "embedding: id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(tv.ptr() + static_cast<std::size_t>(ids[r]) * e, e, out.ptr() + r * e);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  return record(t, std::move(out), t.requires_grad(table),
                [table, idv, e](Tape& tp, const Tensor& g) {
                  Tensor& gt = tp.grad_ref(table.id);
                  for (std::size_t r = 0; r < idv.size(); ++r)
                    for (std::size_t c = 0; c < e; ++c)
                      gt[static_cast<std::size_t>(idv[r]) * e + c] += g[r * e + c];
                });
}

Var attention_scores(Var query, Var keys, Var v) {
  Tape& t = *query.tape;
  const Tensor& qv = t.value(query);
  const Tensor& kv = t.value(keys);
  const Tensor& vv = t.value(v);
  require_rank(kv, 3, "attention_scores");
  const std::size_t n = kv.dim(0), T = kv.dim(1), a = kv.dim(2);
  CHARNMT_REQUIRE(qv.rows() == n && qv.cols() == a && vv.size() == a,
                  "attention_scores: shapes " + shape_string(qv.shape()) + ", " +
                      shape_string(kv.shape()) + ", " + shape_string(vv.shape()));
  Tensor act(kv.shape());
  Tensor out(Shape{n, T});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t s = 0; s < T; ++s) {
      Real acc = 0;
      const std::size_t base = (r * T + s) * a;
      for (std::size_t k = 0; k < a; ++k) {
        const Real u = std::tanh(qv[r * a + k] + kv[base + k]);
        act[base + k] = u;
        acc += vv[k] * u;
      }
      out[r * T + s] = acc;
    }
  return record(t, std::move(out), t.requires_grad_any({query, keys, v}),
                [query, keys, v, act, n, T, a](Tape& tp, const Tensor& g) {
                  const Tensor& vv = tp.value(v);
                  Tensor* gq = tp.requires_grad(query) ? &tp.grad_ref(query.id) : nullptr;
                  Tensor* gk = tp.requires_grad(keys) ? &tp.grad_ref(keys.id) : nullptr;
                  Tensor* gv = tp.requires_grad(v) ? &tp.grad_ref(v.id) : nullptr;
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t s = 0; s < T; ++s) {
                      const Real gs = g[r * T + s];
                      const std::size_t base = (r * T + s) * a;
                      for (std::size_t k = 0; k < a; ++k) {
                        const Real u = act[base + k];
                        if (gv) (*gv)[k] += gs * u;
                        const Real dp = gs * vv[k] * (1 - u * u);
                        if (gq) (*gq)[r * a + k] += dp;
                        if (gk) (*gk)[base + k] += dp;
                      }
                    }
                });
}

Var masked_softmax(Var scores, const Tensor& mask) {
  Tape& t = *scores.tape;
  const Tensor& sv = t.value(scores);
  require_rank(sv, 2, "masked_softmax");
  CHARNMT_REQUIRE(mask.size() == sv.size(), "masked_softmax: mask shape mismatch");
  const std::size_t n = sv.dim(0), T = sv.dim(1);
  Tensor out(sv.shape());
  for (std::size_t r = 0; r < n; ++r) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t s = 0; s < T; ++s)
      if (mask[r * T + s] != 0) mx = std::max(mx, sv[r * T + s]);
    CHARNMT_REQUIRE(std::isfinite(mx), "masked_softmax: every position is masked");
    Real z = 0;
    for (std::size_t s = 0; s < T; ++s) {
      if (mask[r * T + s] != 0) {
        out[r * T + s] = std::exp(sv[r * T + s] - mx);
        z += out[r * T + s];
      }
    }
    for (std::size_t s = 0; s < T; ++s) out[r * T + s] /= z;
  }
  Var o = t.push(std::move(out), t.requires_grad(scores));
  if (t.requires_grad(o)) {
    t.on_backward([scores, o, n, T](Tape& tp) {
      const Tensor* g = tp.grad_or_null(o.id);
      if (!g) return;
      const Tensor& y = tp.value(o);
      Tensor& gs = tp.grad_ref(scores.id);
      for (std::size_t r = 0; r < n; ++r) {
        Real dot = 0;
        for (std::size_t s = 0; s < T; ++s) dot += y[r * T + s] * (*g)[r * T + s];
        for (std::size_t s = 0; s < T; ++s)
          gs[r * T + s] += y[r * T + s] * ((*g)[r * T + s] - dot);
      }
    });
  }
  return o;
}

Var weighted_sum(Var weights, Var values) {
  Tape& t = *weights.tape;
  const Tensor& wv = t.value(weights);
  const Tensor& vv = t.value(values);
  require_rank(vv, 3, "weighted_sum");
  const std::size_t n = vv.dim(0), T = vv.dim(1), d = vv.dim(2);
  CHARNMT_REQUIRE(wv.rows() == n && wv.cols() == T, "weighted_sum: weights shape");
  Tensor out(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t s = 0; s < T; ++s) {
      const Real w = wv[r * T + s];
      if (w == 0) continue;
      const Real* row = vv.ptr() + (r * T + s) * d;
      for (std::size_t c = 0; c < d; ++c) out[r * d + c] += w * row[c];
    }
  return record(t, std::move(out), t.requires_grad_any({weights, values}),
                [weights, values, n, T, d](Tape& tp, const Tensor& g) {
                  const Tensor& wv = tp.value(weights);
                  const Tensor& vv = tp.value(values);
                  Tensor* gw = tp.requires_grad(weights) ? &tp.grad_ref(weights.id) : nullptr;
                  Tensor* gv = tp.requires_grad(values) ? &tp.grad_ref(values.id) : nullptr;
                  for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t s = 0; s < T; ++s) {
                      const std::size_t base = (r * T + s) * d;
                      Real acc = 0;
                      for (std::size_t c = 0; c < d; ++c) {
                        acc += g[r * d + c] * vv[base + c];
                        if (gv) (*gv)[base + c] += wv[r * T + s] * g[r * d + c];
                      }
                      if (gw) (*gw)[r * T + s] += acc;
                    }
                });
}

Var cross_entropy(Var logits, std::span<const int> targets,
                  std::span<const Real> weights) {
  Tape& t = *logits.tape;
  const Tensor& lv = t.value(logits);
  require_rank(lv, 2, "cross_entropy");
  const std::size_t n = lv.rows(), V = lv.cols();
  CHARNMT_REQUIRE(targets.size() == n && weights.size() == n,
                  "cross_entropy: targets/weights length must match logits rows");
  Tensor probs(lv.shape());
  double total = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = targets[r];
    if (y < 0 || static_cast<std::size_t>(y) >= V)
      throw ContractViolation("cross_entropy: target id " + std::to_string(y) +
                              " outside vocabulary of " + std::to_string(V));
    const Real* row = lv.ptr() + r * V;
    const Real mx = *std::max_element(row, row + V);
    double z = 0;
    for (std::size_t c = 0; c < V; ++c) {
      const Real e = std::exp(row[c] - mx);
      probs[r * V + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < V; ++c) probs[r * V + c] = Real(probs[r * V + c] / z);
    if (weights[r] != 0)
      total += weights[r] * (std::log(z) + mx - row[static_cast<std::size_t>(y)]);
  }
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<Real> wv(weights.begin(), weights.end());
  return record(t, Tensor::scalar(Real(total)), t.requires_grad(logits),
                [logits, probs, tv, wv, n, V](Tape& tp, const Tensor& g) {
                  Tensor& gl = tp.grad_ref(logits.id);
                  const Real go = g[0];
                  for (std::size_t r = 0; r < n; ++r) {
                    if (wv[r] == 0) continue;
                    const Real w = go * wv[r];
                    for (std::size_t c = 0; c < V; ++c) gl[r * V + c] += w * probs[r * V + c];
                    gl[r * V + static_cast<std::size_t>(tv[r])] -= w;
                  }
                });
}

Var weighted_combine(std::span<const Var> xs, const Tensor& w) {
  Tape& t = tape_of(xs, "weighted_combine");
  const std::size_t k = xs.size();
  const Tensor& first = t.value(xs[0]);
  const std::size_t n = first.rows(), d = first.cols();
  CHARNMT_REQUIRE(w.size() == n * k, "weighted_combine: weights must be [N x k]");
  Tensor out(first.shape());
  for (std::size_t i = 0; i < k; ++i) {
    const Tensor& xv = t.value(xs[i]);
    require_same_shape(first, xv, "weighted_combine");
    for (std::size_t r = 0; r < n; ++r) {
      const Real wi = w[r * k + i];
      if (wi == 0) continue;
      for (std::size_t c = 0; c < d; ++c) out[r * d + c] += wi * xv[r * d + c];
    }
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  return record(t, std::move(out), any_requires_grad(t, xs),
                [ins, w, n, d, k](Tape& tp, const Tensor& g) {
                  for (std::size_t i = 0; i < k; ++i) {
                    if (!tp.requires_grad(ins[i])) continue;
                    Tensor& gi = tp.grad_ref(ins[i].id);
                    for (std::size_t r = 0; r < n; ++r) {
                      const Real wi = w[r * k + i];
                      for (std::size_t c = 0; c < d; ++c) gi[r * d + c] += wi * g[r * d + c];
                    }
                  }
                });
}

Var masked_max(std::span<const Var> xs, const Tensor& mask) {
  Tape& t = tape_of(xs, "masked_max");
  const std::size_t k = xs.size();
  const Tensor& first = t.value(xs[0]);
  const std::size_t n = first.rows(), d = first.cols();
  CHARNMT_REQUIRE(mask.size() == n * k, "masked_max: mask must be [N x k]");
  Tensor out(first.shape());
  std::vector<int> arg(n * d, -1);
  for (std::size_t i = 0; i < k; ++i) {
    const Tensor& xv = t.value(xs[i]);
    require_same_shape(first, xv, "masked_max");
    for (std::size_t r = 0; r < n; ++r) {
      if (mask[r * k + i] == 0) continue;
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t j = r * d + c;
        if (arg[j] < 0 || xv[j] > out[j]) {
          out[j] = xv[j];
          arg[j] = static_cast<int>(i);
        }
      }
    }
  }
  std::vector<Var> ins(xs.begin(), xs.end());
  return record(t, std::move(out), any_requires_grad(t, xs),
                [ins, arg](Tape& tp, const Tensor& g) {
                  for (std::size_t j = 0; j < arg.size(); ++j) {
                    if (arg[j] < 0) continue;
                    const Var& src = ins[static_cast<std::size_t>(arg[j])];
                    if (tp.requires_grad(src)) tp.grad_ref(src.id)[j] += g[j];
                  }
                });
}

Var gather_rows(std::span<const Var> steps, std::span<const std::ptrdiff_t> index) {
  Tape& t = tape_of(steps, "gather_rows");
  const Tensor& first = t.value(steps[0]);
  const std::size_t n = first.rows(), d = first.cols();
  CHARNMT_REQUIRE(index.size() == n, "gather_rows: one index per row required");
  Tensor out(first.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const std::ptrdiff_t s = index[r];
    if (s < 0) continue;
    CHARNMT_REQUIRE(static_cast<std::size_t>(s) < steps.size(), "gather_rows: index out of range");
    const Tensor& sv = t.value(steps[static_cast<std::size_t>(s)]);
    std::copy_n(sv.ptr() + r * d, d, out.ptr() + r * d);
  }
  std::vector<Var> ins(steps.begin(), steps.end());
  std::vector<std::ptrdiff_t> idx(index.begin(), index.end());
  bool needs = false;
  for (std::ptrdiff_t s : idx)
    if (s >= 0 && t.requires_grad(ins[static_cast<std::size_t>(s)])) needs = true;
  return record(t, std::move(out), needs, [ins, idx, d](Tape& tp, const Tensor& g) {
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] < 0) continue;
      const Var& src = ins[static_cast<std::size_t>(idx[r])];
      if (!tp.requires_grad(src)) continue;
      Tensor& gs = tp.grad_ref(src.id);
      for (std::size_t c = 0; c < d; ++c) gs[r * d + c] += g[r * d + c];
    }
  });
}

Var compression_penalty(Var counts, std::span<const Real> lengths, Real alpha1,
                        Real alpha2, bool literal) {
  Tape& t = *counts.tape;
  const Tensor& cv = t.value(counts);
  const std::size_t n = cv.rows(), L = cv.cols();
  CHARNMT_REQUIRE(lengths.size() == n, "compression_penalty: one length per row");
  // branch: 0 -> zero, +1 -> d/dZ = +1, -1 -> d/dZ = -1
  std::vector<int> branch(n * L, 0);
  Real total = 0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t l = 0; l < L; ++l) {
      const Real Z = cv[r * L + l], T = lengths[r];
      CHARNMT_REQUIRE(Z <= T + Real(1e-4), "compression_penalty: count exceeds length");
      const Real up = literal ? Z - alpha1 * T : Z - alpha2 * T;
      const Real down = literal ? alpha2 * T - Z : alpha1 * T - Z;
      Real best = 0;
      int b = 0;
      if (up > best) { best = up; b = 1; }
      if (down > best) { best = down; b = -1; }
      branch[r * L + l] = b;
      total += best;
    }
  return record(t, Tensor::scalar(total), t.requires_grad(counts),
                [counts, branch](Tape& tp, const Tensor& g) {
                  Tensor& gc = tp.grad_ref(counts.id);
                  for (std::size_t i = 0; i < branch.size(); ++i)
                    gc[i] += g[0] * Real(branch[i]);
                });
}

}  // namespace charnmt
