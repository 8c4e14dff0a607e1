#include "cmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace cmt {

namespace {

void ensure_single_threaded_blas() {
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}

void check_axis(const Array& x, int axis, const char* op) {
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(x.shape));
}

// strides for iterating slices along `axis`: outer x extent x inner
struct AxisView {
  int64_t outer, extent, inner;
};

AxisView axis_view(const Shape& s, int axis) {
  AxisView v{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

bool Array::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

Array matrix(int64_t rows, int64_t cols, std::initializer_list<double> v) {
  return Array(Shape{rows, cols}, std::vector<double>(v));
}

Array identity(int64_t n) {
  Array a(Shape{n, n});
  for (int64_t i = 0; i < n; ++i) a.at(i, i) = 1.0;
  return a;
}

// ---- Tape ----

Var Tape::leaf(Array value, bool requires_grad) {
  if (check_finite && !value.all_finite())
    throw std::domain_error("leaf: non-finite value");
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Array out, const std::vector<int>& inputs, BackwardFn bw, const char* op_name) {
  if (check_finite && !out.all_finite())
    throw std::domain_error(std::string(op_name) + ": non-finite output");
  Node n;
  n.value = std::move(out);
  n.inputs = inputs;
  n.op = op_name;
  for (int i : inputs)
    if (node(i).requires_grad) n.requires_grad = true;
  if (n.requires_grad) n.backward = std::move(bw);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Array& Tape::grad(Var v) const {
  const Node& n = node(v.id);
  if (!n.grad_ready) throw std::logic_error("grad requested before backward");
  return n.grad;
}

Array& Tape::grad_mut(int id) {
  Node& n = node(id);
  if (!n.grad_ready) {
    n.grad = Array(n.value.shape);
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::accumulate_grad(int id, const Array& g) {
  if (!node(id).requires_grad) return;
  Array& dst = grad_mut(id);
  for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
}

void Tape::backward(Var out) {
  if (out.tape != this) throw std::logic_error("backward: var from another tape");
  if (val(out).numel() != 1)
    throw std::invalid_argument("backward: output must be scalar, got shape " +
                                shape_str(val(out).shape));
  for (Node& n : nodes_) {
    n.grad = Array();
    n.grad_ready = false;
  }
  grad_mut(out.id).data[0] = 1.0;
  for (int id = out.id; id >= 0; --id) {
    Node& n = node(id);
    if (!n.requires_grad || !n.grad_ready || !n.backward) continue;
    n.backward(*this, id);
  }
  // leaves that never received a contribution still expose a zero grad
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].requires_grad && !nodes_[i].grad_ready) grad_mut(static_cast<int>(i));
}

// ---- primitives ----

namespace {

void require_same_tape(Var a, Var b, const char* op) {
  if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": vars from different tapes");
}

void dgemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const double* a, const double* b,
           double* c, double beta) {
  ensure_single_threaded_blas();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), 1.0, a,
              static_cast<int>(ta ? m : k), b, static_cast<int>(tb ? k : n), beta, c,
              static_cast<int>(n));
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape) + " and " +
                                shape_str(bv.shape));
  const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Array out(Shape{m, n});
  if (m && n && k) dgemm(false, false, m, n, k, av.data.data(), bv.data.data(), out.data.data(), 0.0);
  int aid = a.id, bid = b.id;
  return t.record(std::move(out), {aid, bid}, [aid, bid, m, n, k](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    const Array& A = tp.val(Var{&tp, aid});
    const Array& B = tp.val(Var{&tp, bid});
    if (tp.needs_grad(Var{&tp, aid}) && m && n && k)
      dgemm(false, true, m, k, n, g.data.data(), B.data.data(), tp.grad_mut(aid).data.data(), 1.0);
    if (tp.needs_grad(Var{&tp, bid}) && m && n && k)
      dgemm(true, false, k, n, m, A.data.data(), g.data.data(), tp.grad_mut(bid).data.data(), 1.0);
  }, "matmul");
}

Var transpose(Var a) {
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  if (av.rank() != 2)
    throw std::invalid_argument("transpose: expected rank 2, got " + shape_str(av.shape));
  const int64_t m = av.dim(0), n = av.dim(1);
  Array out(Shape{n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
  int aid = a.id;
  return t.record(std::move(out), {aid}, [aid, m, n](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    Array& ga = tp.grad_mut(aid);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) ga.at(i, j) += g.at(j, i);
  }, "transpose");
}

Var softmax_axis(Var x, int axis) {
  Tape& t = *x.tape;
  const Array& xv = t.val(x);
  check_axis(xv, axis, "softmax_axis");
  AxisView v = axis_view(xv.shape, axis);
  Array out(xv.shape);
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t in = 0; in < v.inner; ++in) {
      const int64_t base = o * v.extent * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t e = 0; e < v.extent; ++e)
        mx = std::max(mx, xv.data[static_cast<size_t>(base + e * v.inner)]);
      double sum = 0.0;
      for (int64_t e = 0; e < v.extent; ++e) {
        double ev = std::exp(xv.data[static_cast<size_t>(base + e * v.inner)] - mx);
        out.data[static_cast<size_t>(base + e * v.inner)] = ev;
        sum += ev;
      }
      for (int64_t e = 0; e < v.extent; ++e)
        out.data[static_cast<size_t>(base + e * v.inner)] /= sum;
    }
  int xid = x.id;
  return t.record(std::move(out), {xid}, [xid, v](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    const Array& y = tp.val(Var{&tp, out_id});
    Array& gx = tp.grad_mut(xid);
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t in = 0; in < v.inner; ++in) {
        const int64_t base = o * v.extent * v.inner + in;
        double dot = 0.0;
        for (int64_t e = 0; e < v.extent; ++e) {
          size_t i = static_cast<size_t>(base + e * v.inner);
          dot += g.data[i] * y.data[i];
        }
        for (int64_t e = 0; e < v.extent; ++e) {
          size_t i = static_cast<size_t>(base + e * v.inner);
          gx.data[i] += y.data[i] * (g.data[i] - dot);
        }
      }
  }, "softmax_axis");
}

namespace {

// elementwise binary over identical shapes
Var binary_op(Var a, Var b, const char* name, double (*fwd)(double, double),
              void (*bwd)(double va, double vb, double g, double& ga, double& gb)) {
  require_same_tape(a, b, name);
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  if (av.shape != bv.shape)
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(av.shape) +
                                " vs " + shape_str(bv.shape));
  Array out(av.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = fwd(av.data[i], bv.data[i]);
  int aid = a.id, bid = b.id;
  return t.record(std::move(out), {aid, bid}, [aid, bid, bwd](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    const Array& A = tp.val(Var{&tp, aid});
    const Array& B = tp.val(Var{&tp, bid});
    const bool na = tp.needs_grad(Var{&tp, aid});
    const bool nb = tp.needs_grad(Var{&tp, bid});
    Array zero;
    Array& ga = na ? tp.grad_mut(aid) : zero;
    Array& gb = nb ? tp.grad_mut(bid) : zero;
    if (!na) ga = Array(A.shape);
    if (!nb) gb = Array(B.shape);
    for (size_t i = 0; i < g.data.size(); ++i)
      bwd(A.data[i], B.data[i], g.data[i], ga.data[i], gb.data[i]);
  }, name);
}

Var unary_op(Var x, const char* name, const std::function<double(double)>& fwd,
             const std::function<double(double x, double y)>& dfdx) {
  Tape& t = *x.tape;
  const Array& xv = t.val(x);
  Array out(xv.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = fwd(xv.data[i]);
  int xid = x.id;
  return t.record(std::move(out), {xid}, [xid, dfdx](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    const Array& xval = tp.val(Var{&tp, xid});
    const Array& yval = tp.val(Var{&tp, out_id});
    Array& gx = tp.grad_mut(xid);
    for (size_t i = 0; i < g.data.size(); ++i)
      gx.data[i] += g.data[i] * dfdx(xval.data[i], yval.data[i]);
  }, name);
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op(a, b, "add", [](double x, double y) { return x + y; },
                   [](double, double, double g, double& ga, double& gb) {
                     ga += g;
                     gb += g;
                   });
}

Var sub(Var a, Var b) {
  return binary_op(a, b, "sub", [](double x, double y) { return x - y; },
                   [](double, double, double g, double& ga, double& gb) {
                     ga += g;
                     gb -= g;
                   });
}

Var mul(Var a, Var b) {
  return binary_op(a, b, "mul", [](double x, double y) { return x * y; },
                   [](double x, double y, double g, double& ga, double& gb) {
                     ga += g * y;
                     gb += g * x;
                   });
}

Var divide(Var a, Var b) {
  return binary_op(a, b, "divide", [](double x, double y) { return x / y; },
                   [](double x, double y, double g, double& ga, double& gb) {
                     ga += g / y;
                     gb -= g * x / (y * y);
                   });
}

Var sigmoid(Var x) {
  return unary_op(x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(x, "gelu",
                  [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
                  [](double v, double) {
                    return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) +
                           v * inv_sqrt2pi * std::exp(-0.5 * v * v);
                  });
}

Var log_(Var x) {
  const Array& xv = x.tape->val(x);
  if (x.tape->check_finite)
    for (double v : xv.data)
      if (v <= 0.0) throw std::domain_error("log: non-positive input " + std::to_string(v));
  // backward divides instead of multiplying by 1/x: for denormal x the
  // reciprocal overflows and a zero upstream grad would turn into 0*inf = NaN
  Tape& t = *x.tape;
  Array out(xv.shape);
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::log(xv.data[i]);
  const int xid = x.id;
  return t.record(std::move(out), {xid}, [xid](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    const Array& xval = tp.val(Var{&tp, xid});
    Array& gx = tp.grad_mut(xid);
    for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i] / xval.data[i];
  }, "log");
}

Var exp_(Var x) {
  return unary_op(x, "exp", [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Var abs_(Var x) {
  // subgradient 0 at 0
  return unary_op(x, "abs", [](double v) { return std::fabs(v); },
                  [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var sqrt_(Var x) {
  return unary_op(x, "sqrt", [](double v) { return std::sqrt(v); },
                  [](double, double y) { return 0.5 / y; });
}

Var scale(Var x, double c) {
  return unary_op(x, "scale", [c](double v) { return c * v; },
                  [c](double, double) { return c; });
}

Var add_scalar(Var x, double c) {
  return unary_op(x, "add_scalar", [c](double v) { return v + c; },
                  [](double, double) { return 1.0; });
}

Var reduce(Var x, Reduce kind, int axis) {
  Tape& t = *x.tape;
  const Array& xv = t.val(x);
  check_axis(xv, axis, "reduce");
  AxisView v = axis_view(xv.shape, axis);
  if (v.extent == 0) throw std::domain_error("reduce: empty axis in shape " + shape_str(xv.shape));
  Shape oshape = xv.shape;
  oshape[static_cast<size_t>(axis)] = 1;
  Array out(oshape);
  // argext: for min/max, flat index of the first attaining element per slice
  std::vector<int64_t> argext;
  if (kind == Reduce::Min || kind == Reduce::Max)
    argext.resize(static_cast<size_t>(v.outer * v.inner));
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t in = 0; in < v.inner; ++in) {
      const int64_t base = o * v.extent * v.inner + in;
      const size_t oi = static_cast<size_t>(o * v.inner + in);
      if (kind == Reduce::Sum || kind == Reduce::Mean) {
        double s = 0.0;
        for (int64_t e = 0; e < v.extent; ++e) s += xv.data[static_cast<size_t>(base + e * v.inner)];
        out.data[oi] = kind == Reduce::Mean ? s / static_cast<double>(v.extent) : s;
      } else {
        double best = xv.data[static_cast<size_t>(base)];
        int64_t bi = base;
        for (int64_t e = 1; e < v.extent; ++e) {
          double cur = xv.data[static_cast<size_t>(base + e * v.inner)];
          // first attaining index wins ties
          if ((kind == Reduce::Min && cur < best) || (kind == Reduce::Max && cur > best)) {
            best = cur;
            bi = base + e * v.inner;
          }
        }
        out.data[oi] = best;
        argext[oi] = bi;
      }
    }
  int xid = x.id;
  return t.record(std::move(out), {xid},
                  [xid, kind, v, argext = std::move(argext)](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    Array& gx = tp.grad_mut(xid);
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t in = 0; in < v.inner; ++in) {
        const int64_t base = o * v.extent * v.inner + in;
        const size_t oi = static_cast<size_t>(o * v.inner + in);
        switch (kind) {
          case Reduce::Sum:
            for (int64_t e = 0; e < v.extent; ++e)
              gx.data[static_cast<size_t>(base + e * v.inner)] += g.data[oi];
            break;
          case Reduce::Mean:
            for (int64_t e = 0; e < v.extent; ++e)
              gx.data[static_cast<size_t>(base + e * v.inner)] +=
                  g.data[oi] / static_cast<double>(v.extent);
            break;
          case Reduce::Min:
          case Reduce::Max:
            gx.data[static_cast<size_t>(argext[oi])] += g.data[oi];
            break;
        }
      }
  }, "reduce");
}

Var reduce_sum_all(Var x) {
  Tape& t = *x.tape;
  const Array& xv = t.val(x);
  double s = 0.0;
  for (double v : xv.data) s += v;
  int xid = x.id;
  return t.record(Array(Shape{1}, std::vector<double>{s}), {xid}, [xid](Tape& tp, int out_id) {
    const double g = tp.grad_mut(out_id).data[0];
    Array& gx = tp.grad_mut(xid);
    for (double& v : gx.data) v += g;
  }, "reduce_sum_all");
}

Var concat(Var a, Var b, int axis) {
  require_same_tape(a, b, "concat");
  Tape& t = *a.tape;
  const Array& av = t.val(a);
  const Array& bv = t.val(b);
  if (av.rank() != bv.rank())
    throw std::invalid_argument("concat: rank mismatch " + shape_str(av.shape) + " vs " +
                                shape_str(bv.shape));
  check_axis(av, axis, "concat");
  for (int i = 0; i < av.rank(); ++i)
    if (i != axis && av.dim(i) != bv.dim(i))
      throw std::invalid_argument("concat: shape mismatch " + shape_str(av.shape) + " vs " +
                                  shape_str(bv.shape) + " on axis " + std::to_string(i));
  Shape oshape = av.shape;
  oshape[static_cast<size_t>(axis)] += bv.dim(axis);
  AxisView va = axis_view(av.shape, axis);
  AxisView vb = axis_view(bv.shape, axis);
  Array out(oshape);
  const int64_t arow = va.extent * va.inner, brow = vb.extent * vb.inner;
  for (int64_t o = 0; o < va.outer; ++o) {
    std::memcpy(out.data.data() + o * (arow + brow), av.data.data() + o * arow,
                static_cast<size_t>(arow) * sizeof(double));
    std::memcpy(out.data.data() + o * (arow + brow) + arow, bv.data.data() + o * brow,
                static_cast<size_t>(brow) * sizeof(double));
  }
  int aid = a.id, bid = b.id;
  return t.record(std::move(out), {aid, bid}, [aid, bid, va, arow, brow](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    const bool na = tp.needs_grad(Var{&tp, aid});
    const bool nb = tp.needs_grad(Var{&tp, bid});
    for (int64_t o = 0; o < va.outer; ++o) {
      if (na) {
        Array& ga = tp.grad_mut(aid);
        for (int64_t i = 0; i < arow; ++i)
          ga.data[static_cast<size_t>(o * arow + i)] +=
              g.data[static_cast<size_t>(o * (arow + brow) + i)];
      }
      if (nb) {
        Array& gb = tp.grad_mut(bid);
        for (int64_t i = 0; i < brow; ++i)
          gb.data[static_cast<size_t>(o * brow + i)] +=
              g.data[static_cast<size_t>(o * (arow + brow) + arow + i)];
      }
    }
  }, "concat");
}

Var slice(Var x, int axis, int64_t start, int64_t len) {
  Tape& t = *x.tape;
  const Array& xv = t.val(x);
  check_axis(xv, axis, "slice");
  if (start < 0 || len < 0 || start + len > xv.dim(axis))
    throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of bounds for " +
                                shape_str(xv.shape));
  AxisView v = axis_view(xv.shape, axis);
  Shape oshape = xv.shape;
  oshape[static_cast<size_t>(axis)] = len;
  Array out(oshape);
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t e = 0; e < len; ++e)
      std::memcpy(out.data.data() + (o * len + e) * v.inner,
                  xv.data.data() + (o * v.extent + start + e) * v.inner,
                  static_cast<size_t>(v.inner) * sizeof(double));
  int xid = x.id;
  return t.record(std::move(out), {xid}, [xid, v, start, len](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    Array& gx = tp.grad_mut(xid);
    for (int64_t o = 0; o < v.outer; ++o)
      for (int64_t e = 0; e < len; ++e)
        for (int64_t i = 0; i < v.inner; ++i)
          gx.data[static_cast<size_t>((o * v.extent + start + e) * v.inner + i)] +=
              g.data[static_cast<size_t>((o * len + e) * v.inner + i)];
  }, "slice");
}

Var gather_pad(Var x, std::vector<int64_t> idx, Shape out_shape) {
  Tape& t = *x.tape;
  const Array& xv = t.val(x);
  if (static_cast<int64_t>(idx.size()) != shape_numel(out_shape))
    throw std::invalid_argument("gather_pad: index count does not match output shape");
  Array out(out_shape);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= xv.numel())
      throw std::invalid_argument("gather_pad: index out of range");
    out.data[i] = idx[i] < 0 ? 0.0 : xv.data[static_cast<size_t>(idx[i])];
  }
  int xid = x.id;
  return t.record(std::move(out), {xid}, [xid, idx = std::move(idx)](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    Array& gx = tp.grad_mut(xid);
    for (size_t i = 0; i < idx.size(); ++i)
      if (idx[i] >= 0) gx.data[static_cast<size_t>(idx[i])] += g.data[i];
  }, "gather_pad");
}

Var gather_rows(Var x, const std::vector<int64_t>& rows) {
  const Array& xv = x.tape->val(x);
  if (xv.rank() != 2) throw std::invalid_argument("gather_rows: expected rank 2");
  const int64_t d = xv.dim(1);
  std::vector<int64_t> idx;
  idx.reserve(rows.size() * static_cast<size_t>(d));
  for (int64_t r : rows) {
    if (r < 0 || r >= xv.dim(0)) throw std::invalid_argument("gather_rows: row out of range");
    for (int64_t j = 0; j < d; ++j) idx.push_back(r * d + j);
  }
  return gather_pad(x, std::move(idx), Shape{static_cast<int64_t>(rows.size()), d});
}

Var broadcast_col(Var v, int64_t cols) {
  Tape& t = *v.tape;
  const Array& vv = t.val(v);
  if (vv.rank() != 2 || vv.dim(1) != 1)
    throw std::invalid_argument("broadcast_col: expected m x 1, got " + shape_str(vv.shape));
  const int64_t m = vv.dim(0);
  Array out(Shape{m, cols});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < cols; ++j) out.at(i, j) = vv.data[static_cast<size_t>(i)];
  int vid = v.id;
  return t.record(std::move(out), {vid}, [vid, m, cols](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    Array& gv = tp.grad_mut(vid);
    for (int64_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < cols; ++j) s += g.at(i, j);
      gv.data[static_cast<size_t>(i)] += s;
    }
  }, "broadcast_col");
}

Var add_rowvec(Var x, Var b) {
  require_same_tape(x, b, "add_rowvec");
  Tape& t = *x.tape;
  const Array& xv = t.val(x);
  const Array& bv = t.val(b);
  if (xv.rank() != 2 || bv.rank() != 2 || bv.dim(0) != 1 || bv.dim(1) != xv.dim(1))
    throw std::invalid_argument("add_rowvec: shapes " + shape_str(xv.shape) + " and " +
                                shape_str(bv.shape));
  const int64_t m = xv.dim(0), n = xv.dim(1);
  Array out(xv.shape);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) + bv.data[static_cast<size_t>(j)];
  int xid = x.id, bid = b.id;
  return t.record(std::move(out), {xid, bid}, [xid, bid, m, n](Tape& tp, int out_id) {
    const Array& g = tp.grad_mut(out_id);
    if (tp.needs_grad(Var{&tp, xid})) {
      Array& gx = tp.grad_mut(xid);
      for (size_t i = 0; i < g.data.size(); ++i) gx.data[i] += g.data[i];
    }
    if (tp.needs_grad(Var{&tp, bid})) {
      Array& gb = tp.grad_mut(bid);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) gb.data[static_cast<size_t>(j)] += g.at(i, j);
    }
  }, "add_rowvec");
}

// ---- finite differences ----

double finite_diff_check(const ScalarFn& f, const std::vector<Array>& inputs, double eps,
                         double denom_floor) {
  std::vector<Array> analytic;
  {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(inputs.size());
    for (const Array& a : inputs) leaves.push_back(tape.leaf(a, true));
    Var out = f(tape, leaves);
    if (tape.val(out).numel() != 1)
      throw std::logic_error("finite_diff_check: f must be scalar-valued");
    tape.backward(out);
    for (Var l : leaves) analytic.push_back(tape.grad(l));
  }
  auto eval = [&](const std::vector<Array>& in) {
    Tape tape;
    std::vector<Var> leaves;
    for (const Array& a : in) leaves.push_back(tape.leaf(a, false));
    return tape.val(f(tape, leaves)).data[0];
  };
  double max_rel = 0.0;
  std::vector<Array> work = inputs;
  for (size_t k = 0; k < inputs.size(); ++k)
    for (size_t i = 0; i < inputs[k].data.size(); ++i) {
      const double orig = work[k].data[i];
      work[k].data[i] = orig + eps;
      const double fp = eval(work);
      work[k].data[i] = orig - eps;
      const double fm = eval(work);
      work[k].data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[k].data[i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), denom_floor});
      max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
  return max_rel;
}

// ---- RNG ----

uint64_t SplitMix64::next() {
  state += 0x9E3779B97f4A7C15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double SplitMix64::next_double() {
  return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

uint64_t SplitMix64::next_below(uint64_t n) { return n ? next() % n : 0; }

double SplitMix64::next_gaussian() {
  double u1 = next_double(), u2 = next_double();
  while (u1 <= 0.0) u1 = next_double();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Array random_array(Shape s, SplitMix64& rng, double lo, double hi) {
  Array a(std::move(s));
  for (double& v : a.data) v = lo + (hi - lo) * rng.next_double();
  return a;
}

Array gaussian_array(Shape s, SplitMix64& rng, double stddev) {
  Array a(std::move(s));
  for (double& v : a.data) v = stddev * rng.next_gaussian();
  return a;
}

}  // namespace cmt
