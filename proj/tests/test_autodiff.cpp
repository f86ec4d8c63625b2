#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "mssm/checks.hpp"
#include "mssm/gradcheck.hpp"
#include "mssm/ops.hpp"
#include "mssm/rng.hpp"
#include "mssm/tape.hpp"

using namespace mssm;
using Catch::Approx;

TEST_CASE("layer_norm per-token values") {
  Tape tape;
  SECTION("constant token collapses to bias") {
    Var x = tape.leaf(Tensor({1, 4}, {5, 5, 5, 5}));
    Var g = tape.leaf(Tensor::full({4}, 1.0));
    Var b = tape.leaf(Tensor({4}));
    Var y = layer_norm(x, g, b, 1e-5);
    for (int i = 0; i < 4; ++i) REQUIRE(y.value()[i] == Approx(0.0).margin(1e-12));
  }
  SECTION("already normalized token is unchanged at eps = 0") {
    Var x = tape.leaf(Tensor({1, 2}, {1, -1}));
    Var g = tape.leaf(Tensor::full({2}, 1.0));
    Var b = tape.leaf(Tensor({2}));
    Var y = layer_norm(x, g, b, 0.0);
    REQUIRE(y.value()[0] == Approx(1.0).margin(1e-12));
    REQUIRE(y.value()[1] == Approx(-1.0).margin(1e-12));
  }
  SECTION("hand-computed case: mean 2, std sqrt(8/3)") {
    Var x = tape.leaf(Tensor({1, 3}, {0, 2, 4}));
    Var g = tape.leaf(Tensor::full({3}, 2.0));
    Var b = tape.leaf(Tensor::full({3}, 1.0));
    Var y = layer_norm(x, g, b, 0.0);
    REQUIRE(y.value()[0] == Approx(-1.449).margin(1e-3));
    REQUIRE(y.value()[1] == Approx(1.0).margin(1e-3));
    REQUIRE(y.value()[2] == Approx(3.449).margin(1e-3));
  }
  SECTION("non-finite input is rejected") {
    Tensor bad({1, 2}, {1.0, 0.0});
    bad[1] = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_AS(tape.leaf(bad), std::invalid_argument);
  }
  SECTION("zero variance with eps = 0 is rejected") {
    Var x = tape.leaf(Tensor({1, 2}, {3, 3}));
    Var g = tape.leaf(Tensor::full({2}, 1.0));
    Var b = tape.leaf(Tensor({2}));
    REQUIRE_THROWS_AS(layer_norm(x, g, b, 0.0), std::invalid_argument);
  }
}

TEST_CASE("layer_norm token independence is bit-exact") {
  Rng rng(5);
  const Tensor x = rng.normal_tensor({5, 4});
  Tensor x2 = x;
  for (int j = 0; j < 4; ++j) x2.at({2, j}) += rng.normal();
  const Tensor gain = rng.normal_tensor({4});
  const Tensor bias = rng.normal_tensor({4});
  const auto run = [&](const Tensor& input) {
    Tape tape;
    return layer_norm(tape.leaf(input), tape.leaf(gain), tape.leaf(bias), 1e-5).value();
  };
  const Tensor y1 = run(x);
  const Tensor y2 = run(x2);
  for (std::int64_t t = 0; t < 5; ++t) {
    if (t == 2) continue;
    for (std::int64_t j = 0; j < 4; ++j) {
      REQUIRE(std::memcmp(&y1[t * 4 + j], &y2[t * 4 + j], sizeof(double)) == 0);
    }
  }
}

TEST_CASE("backward on simple graphs") {
  SECTION("sum gives unit gradient") {
    Tape tape;
    Var x = tape.leaf(Tensor({3}, {4, 5, 6}), true);
    tape.backward(sum(x));
    const Tensor g = tape.grad(x);
    for (int i = 0; i < 3; ++i) REQUIRE(g[i] == 1.0);
  }
  SECTION("quadratic gives 2x") {
    Tape tape;
    Var x = tape.leaf(Tensor({3}, {1, 2, 3}), true);
    tape.backward(sum(mul(x, x)));
    const Tensor g = tape.grad(x);
    REQUIRE(g[0] == Approx(2.0));
    REQUIRE(g[1] == Approx(4.0));
    REQUIRE(g[2] == Approx(6.0));
  }
  SECTION("layer_norm matches finite differences") {
    Rng rng(17);
    const double err = check_graph_grads(
        {rng.normal_tensor({4, 5}), rng.normal_tensor({5}), rng.normal_tensor({5})},
        [](Tape&, std::vector<Var>& v) { return sum(layer_norm(v[0], v[1], v[2], 1e-5)); });
    REQUIRE(err < 1e-4);
  }
  SECTION("non-scalar loss is rejected") {
    Tape tape;
    Var x = tape.leaf(Tensor({3}, {1, 2, 3}), true);
    REQUIRE_THROWS_AS(tape.backward(mul(x, x)), std::invalid_argument);
  }
  SECTION("detached graph is rejected") {
    Tape tape;
    Var x = tape.leaf(Tensor({3}, {1, 2, 3}), false);
    REQUIRE_THROWS_AS(tape.backward(sum(x)), std::invalid_argument);
  }
  SECTION("off-path tensors receive zero gradient") {
    Tape tape;
    Var x = tape.leaf(Tensor({2}, {1, 2}), true);
    Var unused = tape.leaf(Tensor({2}, {3, 4}), true);
    tape.backward(sum(x));
    REQUIRE(max_abs(tape.grad(unused)) == 0.0);
  }
}

TEST_CASE("gradients accumulate additively across consumers") {
  Rng rng(23);
  const Tensor x = rng.normal_tensor({3, 2});
  const Tensor w = rng.normal_tensor({2, 2});

  Tape tape;
  Var xv = tape.leaf(x, true);
  Var wv = tape.leaf(w);
  Var f = gelu(xv);
  Var g = linear(xv, wv);
  tape.backward(add(sum(f), sum(g)));
  const Tensor combined = tape.grad(xv);

  Tape t1;
  Var x1 = t1.leaf(x, true);
  t1.backward(sum(gelu(x1)));
  Tape t2;
  Var x2 = t2.leaf(x, true);
  t2.backward(sum(linear(x2, t2.leaf(w))));
  const Tensor ga = t1.grad(x1);
  const Tensor gb = t2.grad(x2);
  for (std::int64_t i = 0; i < combined.size(); ++i) {
    REQUIRE(combined[i] == Approx(ga[i] + gb[i]).margin(1e-14));
  }
}

TEST_CASE("finite_diff_grad oracle behaviour") {
  SECTION("gradient of sum is all ones") {
    Rng rng(3);
    const Tensor x = rng.normal_tensor({4});
    const Tensor g = finite_diff_grad(
        [](const Tensor& t) {
          double s = 0;
          for (std::int64_t i = 0; i < t.size(); ++i) s += t[i];
          return s;
        },
        x, 1e-5);
    for (int i = 0; i < 4; ++i) REQUIRE(g[i] == Approx(1.0).margin(1e-9));
  }
  SECTION("derivative of x^2 at 3 is 6") {
    const Tensor x = Tensor::scalar(3.0);
    const Tensor g = finite_diff_grad([](const Tensor& t) { return t[0] * t[0]; }, x, 1e-5);
    REQUIRE(g[0] == Approx(6.0).margin(1e-8));
  }
  SECTION("invalid step size and non-finite functions are rejected") {
    const Tensor x = Tensor::scalar(1.0);
    REQUIRE_THROWS_AS(finite_diff_grad([](const Tensor& t) { return t[0]; }, x, 0.0),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(
        finite_diff_grad([](const Tensor&) { return std::nan(""); }, x, 1e-5),
        std::invalid_argument);
  }
}

TEST_CASE("every operation passes the finite-difference check, 10 seeds") {
  double worst = 0.0;
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    worst = std::max(worst, check_op_grads_once(seed));
  }
  INFO("worst rel err " << worst);
  REQUIRE(worst < 1e-4);
}

TEST_CASE("backward can only run once per tape") {
  Tape tape;
  Var x = tape.leaf(Tensor({2}, {1, 2}), true);
  Var loss = sum(x);
  tape.backward(loss);
  REQUIRE_THROWS_AS(tape.backward(loss), std::logic_error);
}
