#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "cmt/tensor.hpp"
#include "doctest.h"

using namespace cmt;

namespace {

Var sum_weighted(Tape& t, Var x, const Array& w) { return reduce_sum_all(mul(x, t.constant(w))); }

}  // namespace

TEST_CASE("matmul matches the naive triple loop") {
  SplitMix64 rng(11);
  for (int it = 0; it < 20; ++it) {
    const int64_t m = 1 + rng.next_below(8), k = 1 + rng.next_below(8), n = 1 + rng.next_below(8);
    Array a = random_array(Shape{m, k}, rng), b = random_array(Shape{k, n}, rng);
    Tape t;
    const Array& c = t.val(matmul(t.constant(a), t.constant(b)));
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        double want = 0.0;
        for (int64_t l = 0; l < k; ++l) want += a.at(i, l) * b.at(l, j);
        CHECK(c.at(i, j) == doctest::Approx(want).epsilon(1e-12));
      }
  }
}

TEST_CASE("every primitive passes the finite-difference oracle on random instances") {
  SplitMix64 rng(42);
  int instances = 0;
  for (int it = 0; it < 100; ++it) {
    const int64_t m = 2 + rng.next_below(5), n = 2 + rng.next_below(5);
    Array a = random_array(Shape{m, n}, rng);
    Array b = random_array(Shape{m, n}, rng);
    Array w = random_array(Shape{m, n}, rng);
    Array pos = random_array(Shape{m, n}, rng, 0.2, 2.0);

    auto fd = [&](const ScalarFn& f, std::vector<Array> in) {
      CHECK(finite_diff_check(f, std::move(in)) < 1e-5);
      ++instances;
    };
    fd([&](Tape& t, const std::vector<Var>& v) { return sum_weighted(t, add(v[0], v[1]), w); },
       {a, b});
    fd([&](Tape& t, const std::vector<Var>& v) { return sum_weighted(t, mul(v[0], v[1]), w); },
       {a, b});
    fd([&](Tape& t, const std::vector<Var>& v) { return sum_weighted(t, divide(v[0], v[1]), w); },
       {a, pos});
    fd([&](Tape& t, const std::vector<Var>& v) { return sum_weighted(t, gelu(v[0]), w); }, {a});
    fd([&](Tape& t, const std::vector<Var>& v) { return sum_weighted(t, sigmoid(v[0]), w); }, {a});
    fd([&](Tape& t, const std::vector<Var>& v) {
      return sum_weighted(t, softmax_axis(v[0], 1), w);
    }, {a});
    fd([&](Tape& t, const std::vector<Var>& v) {
      return sum_weighted(t, softmax_axis(v[0], 0), w);
    }, {a});
    fd([&](Tape& t, const std::vector<Var>& v) { return reduce_sum_all(log_(v[0])); }, {pos});
    fd([&](Tape& t, const std::vector<Var>& v) { return reduce_sum_all(sqrt_(v[0])); }, {pos});
  }
  CHECK(instances >= 900);
}

TEST_CASE("matmul gradients match finite differences") {
  SplitMix64 rng(7);
  for (int it = 0; it < 20; ++it) {
    const int64_t m = 1 + rng.next_below(5), k = 1 + rng.next_below(5), n = 1 + rng.next_below(5);
    Array a = random_array(Shape{m, k}, rng), b = random_array(Shape{k, n}, rng);
    Array w = random_array(Shape{m, n}, rng);
    const double err = finite_diff_check(
        [&](Tape& t, const std::vector<Var>& v) {
          return sum_weighted(t, matmul(v[0], v[1]), w);
        },
        {a, b});
    CHECK(err < 1e-6);
  }
}

TEST_CASE("softmax rows sum to 1 and are shift invariant") {
  SplitMix64 rng(3);
  Array x = random_array(Shape{6, 9}, rng, -50.0, 50.0);
  Array shifted = x;
  for (int64_t i = 0; i < 6; ++i)
    for (int64_t j = 0; j < 9; ++j) shifted.at(i, j) += 123.0;
  Tape t;
  // copies: val() references are invalidated when the tape grows
  const Array y = t.val(softmax_axis(t.constant(x), 1));
  const Array ys = t.val(softmax_axis(t.constant(shifted), 1));
  for (int64_t i = 0; i < 6; ++i) {
    double s = 0.0;
    for (int64_t j = 0; j < 9; ++j) {
      s += y.at(i, j);
      CHECK(y.at(i, j) == doctest::Approx(ys.at(i, j)).epsilon(1e-12));
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("softmax survives extreme logits") {
  Tape t;
  Array x = matrix(1, 3, {1000.0, 0.0, -1000.0});
  const Array& y = t.val(softmax_axis(t.constant(x), 1));
  CHECK(y.at(0, 0) == doctest::Approx(1.0));
  CHECK(std::isfinite(y.at(0, 1)));
  CHECK(std::isfinite(y.at(0, 2)));
}

TEST_CASE("min/max reductions route gradient to the first attaining index") {
  Tape t;
  Array x = matrix(1, 4, {3.0, 1.0, 1.0, 2.0});
  Var leaf = t.leaf(x, true);
  t.backward(reduce_sum_all(reduce(leaf, Reduce::Min, 1)));
  const Array& g = t.grad(leaf);
  CHECK(g.at(0, 0) == 0.0);
  CHECK(g.at(0, 1) == 1.0);  // first of the tied minima
  CHECK(g.at(0, 2) == 0.0);
  CHECK(g.at(0, 3) == 0.0);
}

TEST_CASE("reduce values") {
  Tape t;
  Var x = t.constant(matrix(2, 3, {1, 2, 3, 4, 5, 6}));
  CHECK(t.val(reduce(x, Reduce::Sum, 1)).at(0, 0) == 6.0);
  CHECK(t.val(reduce(x, Reduce::Mean, 1)).at(1, 0) == 5.0);
  CHECK(t.val(reduce(x, Reduce::Min, 0)).at(0, 2) == 3.0);
  CHECK(t.val(reduce(x, Reduce::Max, 0)).at(0, 0) == 4.0);
  CHECK(t.val(reduce_sum_all(x)).data[0] == 21.0);
}

TEST_CASE("concat/slice/transpose round trips") {
  SplitMix64 rng(5);
  Array a = random_array(Shape{3, 4}, rng), b = random_array(Shape{3, 2}, rng);
  Tape t;
  Var cat = concat(t.constant(a), t.constant(b), 1);
  const Array left = t.val(slice(cat, 1, 0, 4));
  const Array right = t.val(slice(cat, 1, 4, 2));
  CHECK(left.data == a.data);
  CHECK(right.data == b.data);
  const Array& tt = t.val(transpose(transpose(t.constant(a))));
  CHECK(tt.data == a.data);
}

TEST_CASE("gather_pad reads zeros at -1 and scatter-adds the gradient") {
  Tape t;
  Var x = t.leaf(matrix(2, 2, {1, 2, 3, 4}), true);
  Var g = gather_pad(x, {3, -1, 3, 0}, Shape{2, 2});
  CHECK(t.val(g).data == std::vector<double>{4, 0, 4, 1});
  t.backward(reduce_sum_all(g));
  CHECK(t.grad(x).data == std::vector<double>{1, 0, 0, 2});
}

TEST_CASE("log backward stays finite for denormal inputs with zero upstream grad") {
  // regression: g * (1/x) overflows for denormal x and 0 * inf = NaN
  Tape t;
  Array x = matrix(1, 2, {1.0, 1e-320});
  Array w = matrix(1, 2, {1.0, 0.0});
  Var leaf = t.leaf(x, true);
  t.backward(sum_weighted(t, log_(leaf), w));
  CHECK(t.grad(leaf).at(0, 0) == 1.0);
  CHECK(t.grad(leaf).at(0, 1) == 0.0);
}

TEST_CASE("log rejects non-positive input") {
  Tape t;
  CHECK_THROWS_AS(log_(t.constant(matrix(1, 2, {1.0, 0.0}))), std::domain_error);
  CHECK_THROWS_AS(log_(t.constant(matrix(1, 1, {-2.0}))), std::domain_error);
}

TEST_CASE("backward requires a scalar output") {
  Tape t;
  Var x = t.leaf(matrix(2, 2, {1, 2, 3, 4}), true);
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("tape evaluation is deterministic") {
  auto run = [] {
    SplitMix64 rng(99);
    Tape t;
    Var a = t.leaf(random_array(Shape{7, 7}, rng), true);
    Var b = t.leaf(random_array(Shape{7, 7}, rng), true);
    Var out = reduce_sum_all(mul(softmax_axis(matmul(a, b), 1), gelu(a)));
    t.backward(out);
    std::vector<double> r = t.val(out).data;
    const Array& g = t.grad(a);
    r.insert(r.end(), g.data.begin(), g.data.end());
    return r;
  };
  CHECK(run() == run());
}

TEST_CASE("splitmix64 is deterministic and uniform-ish") {
  SplitMix64 a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
  SplitMix64 c(5);
  double mean = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) mean += c.next_double();
  mean /= n;
  CHECK(mean == doctest::Approx(0.5).epsilon(0.05));
  SplitMix64 d(6);
  for (int i = 0; i < 1000; ++i) CHECK(d.next_below(17) < 17);
}

TEST_CASE("finite_diff_check reports disagreement at a subgradient kink") {
  // max over a tied pair: the tape routes the full gradient to the first
  // element, the symmetric difference sees only half the slope
  Array x = matrix(1, 2, {2.0, 2.0});
  const double err = finite_diff_check(
      [](Tape& t, const std::vector<Var>& v) {
        return reduce_sum_all(reduce(v[0], Reduce::Max, 1));
      },
      {x});
  CHECK(err >= 0.5);
}
