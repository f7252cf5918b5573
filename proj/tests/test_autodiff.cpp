#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "privpart/autodiff.hpp"
#include "privpart/grad_check.hpp"

using namespace privpart;
using Catch::Approx;

// Worked by hand: [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]].
TEST_CASE("matmul value against hand computation") {
  Tape<double> t;
  Var a = t.leaf(Tensor<double>({2, 2}, {1, 2, 3, 4}), false);
  Var b = t.leaf(Tensor<double>({2, 2}, {5, 6, 7, 8}), false);
  const Tensor<double>& y = t.value(t.matmul(a, b));
  CHECK(y[0] == 19.0);
  CHECK(y[1] == 22.0);
  CHECK(y[2] == 43.0);
  CHECK(y[3] == 50.0);

  Var bad = t.leaf(Tensor<double>({3, 2}), false);
  CHECK_THROWS_AS(t.matmul(a, bad), ShapeError);
}

TEST_CASE("activation values at known points") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>({4}, {0.0, 1.0, -2.0, std::log(3.0)}), false);
  const Tensor<double>& s = t.value(t.sigmoid(x));
  CHECK(s[0] == Approx(0.5));
  CHECK(s[3] == Approx(0.75));
  const Tensor<double>& th = t.value(t.tanh_(x));
  CHECK(th[1] == Approx(0.7615941559557649));
  const Tensor<double>& r = t.value(t.relu(x));
  CHECK(r[1] == 1.0);
  CHECK(r[2] == 0.0);
}

// 4x4 ones, 3x3 ones kernel, stride 1 pad 1: the output counts how much of
// the window lands inside the image, so corners 4, edges 6, interior 9.
TEST_CASE("conv2d value against overlap counting") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>::full({1, 1, 4, 4}, 1.0), false);
  Var w = t.leaf(Tensor<double>::full({1, 1, 3, 3}, 1.0), false);
  const Tensor<double>& y = t.value(t.conv2d(x, w, 1, 1));
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  CHECK(y[0] == 4.0);
  CHECK(y[1] == 6.0);
  CHECK(y[5] == 9.0);
  CHECK(y[15] == 4.0);
}

// Stride-2 2x2 ones deconv paints each input pixel over a 2x2 block.
TEST_CASE("deconv2d value on a block upsampler") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}), false);
  Var w = t.leaf(Tensor<double>::full({1, 1, 2, 2}, 1.0), false);
  const Tensor<double>& y = t.value(t.deconv2d(x, w, 2, 0));
  REQUIRE(y.shape() == Shape{1, 1, 4, 4});
  const double want[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (int i = 0; i < 16; ++i) CHECK(y[i] == want[i]);
}

// Difference kernel [1,0,-1] with pad 1 gives out[t] = x[t-1] - x[t+1].
TEST_CASE("conv1d value against hand computation") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>({1, 4}, {1, 2, 3, 4}), false);
  Var w = t.leaf(Tensor<double>({3}, {1, 0, -1}), false);
  const Tensor<double>& y = t.value(t.conv1d(x, w, 1, 1));
  REQUIRE(y.shape() == Shape{1, 4});
  CHECK(y[0] == -2.0);
  CHECK(y[1] == -2.0);
  CHECK(y[2] == -2.0);
  CHECK(y[3] == 3.0);
}

TEST_CASE("maxpool2d routes gradient to the first max") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>({1, 1, 2, 4}, {5, 5, 3, 1, 0, 2, 3, 3}), true);
  Var y = t.maxpool2d(x, 2, 2);
  const Tensor<double>& yv = t.value(y);
  REQUIRE(yv.shape() == Shape{1, 1, 1, 2});
  CHECK(yv[0] == 5.0);
  CHECK(yv[1] == 3.0);
  t.backward(t.sum(y));
  Tensor<double> g = t.grad(x);
  // First 5 is at flat index 0; the 3s tie and the row-major first sits at
  // index 2.
  const double want[8] = {1, 0, 1, 0, 0, 0, 0, 0};
  for (int i = 0; i < 8; ++i) CHECK(g[i] == want[i]);
}

// Uniform logits over 10 classes: loss is ln 10 whatever the labels.
TEST_CASE("cross entropy of uniform logits") {
  Tape<double> t;
  Var logits = t.leaf(Tensor<double>({3, 10}), true);
  Var loss = t.cross_entropy(logits, {0, 5, 9});
  CHECK(t.scalar_value(loss) == Approx(std::log(10.0)));
  CHECK_THROWS_AS(t.cross_entropy(logits, {0, 1}), ShapeError);
  CHECK_THROWS_AS(t.cross_entropy(logits, {0, 5, 10}), Error);
}

TEST_CASE("backward demands a scalar loss") {
  Tape<double> t;
  Var x = t.leaf(Tensor<double>({2, 2}), true);
  CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("unused parameters report zero gradients") {
  Tape<double> t;
  Var used = t.leaf(Tensor<double>({3}, {1, 2, 3}), true);
  Var unused = t.leaf(Tensor<double>({4}, {1, 1, 1, 1}), true);
  t.backward(t.sum(t.mul(used, used)));
  Tensor<double> gu = t.grad(used);
  CHECK(gu[0] == 2.0);
  CHECK(gu[2] == 6.0);
  Tensor<double> gz = t.grad(unused);
  REQUIRE(gz.shape() == Shape{4});
  for (size_t i = 0; i < 4; ++i) CHECK(gz[i] == 0.0);
}

TEST_CASE("dropout scales survivors and zeroes the rest") {
  Rng rng(9);
  Tape<double> t;
  Var x = t.leaf(Tensor<double>::full({1000}, 1.0), true);
  Var y = t.dropout(x, 0.5, rng);
  const Tensor<double>& yv = t.value(y);
  size_t kept = 0;
  for (size_t i = 0; i < yv.size(); ++i) {
    CHECK((yv[i] == 0.0 || yv[i] == 2.0));
    kept += yv[i] != 0.0;
  }
  CHECK(kept > 400);
  CHECK(kept < 600);

  Rng rng2(9);
  Tape<double> t2;
  Var x2 = t2.leaf(Tensor<double>::full({1000}, 1.0), true);
  CHECK(t2.value(t2.dropout(x2, 0.5, rng2)).bitwise_equal(yv));

  Rng rng3(1);
  CHECK_THROWS_AS(t.dropout(x, 1.0, rng3), Error);
}

TEST_CASE("dropout with p 0 is the identity") {
  Rng rng(4);
  Tape<double> t;
  Var x = t.leaf(Tensor<double>({3}, {1.5, -2.0, 0.25}), true);
  CHECK(t.value(t.dropout(x, 0.0, rng)).bitwise_equal(t.value(x)));
}

namespace {

// Runs central differences against one tape-built scalar expression.
void check_expr(
    const std::vector<Tensor<double>>& params,
    const std::function<Var(Tape<double>&, const std::vector<Var>&)>& build,
    double tol = 1e-6) {
  auto loss_fn = [&](const std::vector<Tensor<double>>& ps) {
    Tape<double> t;
    std::vector<Var> vars;
    for (const auto& p : ps) vars.push_back(t.leaf(p.clone(), true));
    return t.scalar_value(build(t, vars));
  };
  Tape<double> t;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(t.leaf(p.clone(), true));
  t.backward(build(t, vars));
  std::vector<Tensor<double>> analytic;
  for (Var v : vars) analytic.push_back(t.grad(v));
  std::vector<Tensor<double>> copy;
  for (const auto& p : params) copy.push_back(p.clone());
  GradCheckResult res = check_gradients(loss_fn, copy, analytic);
  INFO(res.describe());
  CHECK(res.ok(tol));
}

Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                             double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i)
    t[i] = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace

TEST_CASE("gradients of a dense chain match finite differences") {
  Rng rng(17);
  std::vector<Tensor<double>> params{
      random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
      random_tensor({5}, rng), random_tensor({5, 2}, rng)};
  check_expr(params, [](Tape<double>& t, const std::vector<Var>& v) {
    Var h = t.relu(t.add_rowvec(t.matmul(v[0], v[1]), v[2]));
    Var y = t.sigmoid(t.matmul(h, v[3]));
    return t.mean(t.mul(y, y));
  });
}

TEST_CASE("gradients of elementwise ops match finite differences") {
  Rng rng(23);
  std::vector<Tensor<double>> params{random_tensor({6}, rng, 0.5, 2.0),
                                     random_tensor({6}, rng, 0.5, 2.0)};
  check_expr(params, [](Tape<double>& t, const std::vector<Var>& v) {
    Var q = t.div(v[0], v[1]);
    Var s = t.sub(t.scale(q, 3.0), t.add_scalar(v[1], -0.25));
    return t.mean(t.mul(s, t.tanh_(t.add(v[0], v[1]))));
  });
}

TEST_CASE("gradients of conv2d match finite differences") {
  Rng rng(31);
  std::vector<Tensor<double>> params{random_tensor({2, 2, 5, 5}, rng),
                                     random_tensor({3, 2, 3, 3}, rng),
                                     random_tensor({3}, rng)};
  check_expr(params, [](Tape<double>& t, const std::vector<Var>& v) {
    Var y = t.relu(t.add_chanbias(t.conv2d(v[0], v[1], 2, 1), v[2]));
    return t.mean(t.mul(y, y));
  });
}

TEST_CASE("gradients of deconv2d match finite differences") {
  Rng rng(37);
  std::vector<Tensor<double>> params{random_tensor({2, 3, 3, 3}, rng),
                                     random_tensor({3, 2, 2, 2}, rng)};
  check_expr(params, [](Tape<double>& t, const std::vector<Var>& v) {
    Var y = t.sigmoid(t.deconv2d(v[0], v[1], 2, 0));
    return t.mean(t.mul(y, y));
  });
}

TEST_CASE("gradients of conv1d match finite differences") {
  Rng rng(41);
  std::vector<Tensor<double>> params{random_tensor({3, 8}, rng),
                                     random_tensor({3}, rng),
                                     random_tensor({1}, rng)};
  check_expr(params, [](Tape<double>& t, const std::vector<Var>& v) {
    Var y = t.tanh_(t.add_scalar_param(t.conv1d(v[0], v[1], 1, 1), v[2]));
    return t.mean(t.mul(y, y));
  });
}

TEST_CASE("gradients of maxpool and reshape match finite differences") {
  Rng rng(43);
  std::vector<Tensor<double>> params{random_tensor({2, 1, 4, 4}, rng)};
  check_expr(params, [](Tape<double>& t, const std::vector<Var>& v) {
    Var y = t.maxpool2d(v[0], 2, 2);
    Var flat = t.reshape(y, {2, 4});
    return t.mean(t.mul(flat, flat));
  });
}

TEST_CASE("gradients of cross entropy match finite differences") {
  Rng rng(47);
  std::vector<Tensor<double>> params{random_tensor({4, 6}, rng)};
  const std::vector<int32_t> labels{0, 3, 5, 2};
  check_expr(params, [&labels](Tape<double>& t, const std::vector<Var>& v) {
    return t.cross_entropy(t.scale(v[0], 2.0), labels);
  });
}

TEST_CASE("gradients flow through a reused subexpression") {
  Rng rng(53);
  std::vector<Tensor<double>> params{random_tensor({5}, rng)};
  // x appears on both sides of the product, so accumulation must add.
  check_expr(params, [](Tape<double>& t, const std::vector<Var>& v) {
    Var s = t.sigmoid(v[0]);
    return t.mean(t.mul(s, t.add(s, v[0])));
  });
}
