#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

// Dense arrays with a reverse-mode gradient tape. The op set is exactly what
// the decoder, losses and model need: matmul, axis softmax, elementwise maps,
// axis reductions, concat/slice/gather and a couple of broadcast helpers.
// Everything is double precision; tapes are single-threaded.

namespace cmt {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Array {
  Shape shape;
  std::vector<double> data;

  Array() = default;
  Array(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {}
  Array(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("Array: shape " + shape_str(shape) +
                                  " does not match data length " + std::to_string(data.size()));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // 2-D accessors (row-major)
  double& at(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  double at(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

  bool all_finite() const;
};

Array matrix(int64_t rows, int64_t cols, std::initializer_list<double> v);
Array identity(int64_t n);

enum class Reduce { Sum, Mean, Min, Max };

class Tape;

// Handle into a tape; cheap to copy.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  // When set, every op output (and leaf) is scanned for NaN/Inf.
  bool check_finite = true;

  Var leaf(Array value, bool requires_grad = true);
  Var constant(Array value) { return leaf(std::move(value), false); }
  Var scalar(double v, bool requires_grad = false) {
    return leaf(Array(Shape{1}, std::vector<double>{v}), requires_grad);
  }

  const Array& val(Var v) const { return node(v.id).value; }
  const Array& grad(Var v) const;
  bool needs_grad(Var v) const { return node(v.id).requires_grad; }
  size_t size() const { return nodes_.size(); }
  // debugging aid: name of the op that produced a node ("leaf" for leaves)
  const char* op_name(int id) const { return node(id).op; }

  // Seeds d(out)/d(out) = 1 and sweeps the tape in reverse recording order.
  void backward(Var scalar_out);

  // --- op-implementation interface ---
  using BackwardFn = std::function<void(Tape&, int out_id)>;
  Var record(Array out, const std::vector<int>& inputs, BackwardFn bw, const char* op_name);
  Array& grad_mut(int id);
  void accumulate_grad(int id, const Array& g);

 private:
  struct Node {
    Array value;
    Array grad;            // allocated during backward
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<int> inputs;
    BackwardFn backward;
    const char* op = "leaf";
  };
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  std::vector<Node> nodes_;
};

// ---- primitives ----
Var matmul(Var a, Var b);
Var transpose(Var a);
Var softmax_axis(Var x, int axis);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);
Var sigmoid(Var x);
Var gelu(Var x);  // exact erf form
Var log_(Var x);
Var exp_(Var x);
Var abs_(Var x);
Var sqrt_(Var x);
Var scale(Var x, double c);
Var add_scalar(Var x, double c);

Var reduce(Var x, Reduce kind, int axis);  // keeps the axis with extent 1
Var reduce_sum_all(Var x);                 // -> shape {1}

Var concat(Var a, Var b, int axis);
Var slice(Var x, int axis, int64_t start, int64_t len);

// out[i] = idx[i] < 0 ? 0 : x.data[idx[i]]; gradient scatter-adds.
Var gather_pad(Var x, std::vector<int64_t> idx, Shape out_shape);
// rows of a 2-D array
Var gather_rows(Var x, const std::vector<int64_t>& rows);

Var broadcast_col(Var v, int64_t cols);  // m x 1 -> m x n
Var add_rowvec(Var x, Var b);            // x: m x n, b: 1 x n

// ---- finite-difference oracle ----
// f receives leaves built from `inputs` (in order) and must return a scalar.
// Returns the max relative error between tape gradients and central
// differences, denominator max(|analytic|, |numeric|, denom_floor). A larger
// floor turns the check into a mixed absolute/relative criterion, which deep
// composites need: elements whose gradients are ~1e-6 sit at the
// central-difference noise floor and would otherwise report spurious error.
using ScalarFn = std::function<Var(Tape&, const std::vector<Var>&)>;
double finite_diff_check(const ScalarFn& f, const std::vector<Array>& inputs,
                         double eps = 1e-5, double denom_floor = 1e-8);

// deterministic test/model RNG helpers
struct SplitMix64 {
  uint64_t state;
  explicit SplitMix64(uint64_t seed) : state(seed) {}
  uint64_t next();
  // uniform in [0,1)
  double next_double();
  // uniform integer in [0, n)
  uint64_t next_below(uint64_t n);
  // standard normal (Box-Muller on two uniforms)
  double next_gaussian();
};

Array random_array(Shape s, SplitMix64& rng, double lo = -1.0, double hi = 1.0);
Array gaussian_array(Shape s, SplitMix64& rng, double stddev = 1.0);

}  // namespace cmt
