#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "fd_oracle.hpp"
#include "popmeta/kernels.hpp"
#include "popmeta/optim.hpp"
#include "popmeta/rng.hpp"
#include "popmeta/tape.hpp"

using namespace popmeta;
using namespace popmeta::ad;
using popmeta::testing::central_differences;
using popmeta::testing::max_relative_error;

namespace {

Tensor random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& v : t.data()) v = scale * (2.0 * rng.uniform() - 1.0);
  return t;
}

double eval(const ParameterStore& p, const LossFn& f) {
  Tape tape;
  NoGradGuard g(tape);
  auto vars = p.bind(tape, false);
  return f(tape, vars).value().item();
}

// Checks reverse mode against central differences for a loss over a store.
double fd_check(const ParameterStore& p, const LossFn& f) {
  auto analytic = plain_gradient(p, f).grad;
  auto numeric = central_differences(p, [&](const ParameterStore& q) { return eval(q, f); });
  return max_relative_error(analytic, numeric);
}

}  // namespace

TEST_CASE("matmul by identity returns the operand") {
  Tape t;
  Var i2 = t.constant(Tensor(2, 2, {1, 0, 0, 1}));
  Var a = t.constant(Tensor(2, 2, {1.5, -2, 3, 4.25}));
  CHECK(matmul(i2, a).value() == a.value());
}

TEST_CASE("softmax of equal logits is uniform") {
  Tape t;
  Var s = softmax(t.constant(Tensor(1, 3, {0, 0, 0})));
  for (double v : s.value().data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("derivative of x*x at 3 is 6") {
  Tape t;
  Var x = t.leaf(Tensor::scalar(3.0));
  Var y = mul(x, x);
  auto g = t.gradients(y, std::vector<Var>{x});
  CHECK(g[0].value().item() == 6.0);
}

TEST_CASE("gradient of sum(W x) with respect to W is x broadcast") {
  Tape t;
  Var w = t.leaf(Tensor(3, 2, {1, 2, 3, 4, 5, 6}));
  Var x = t.constant(Tensor(2, 1, {0.5, -1.25}));
  auto g = t.gradients(sum(matmul(w, x)), std::vector<Var>{w});
  for (std::size_t r = 0; r < 3; ++r) {
    CHECK(g[0].value()(r, 0) == 0.5);
    CHECK(g[0].value()(r, 1) == -1.25);
  }
}

TEST_CASE("gradient of a constant is zero") {
  Tape t;
  Var w = t.leaf(Tensor(2, 2, 1.0));
  Var c = t.scalar(4.0);
  auto g = t.gradients(add_scalar(c, 1.0), std::vector<Var>{w});
  for (double v : g[0].value().data()) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar outputs") {
  Tape t;
  Var w = t.leaf(Tensor(2, 2, 1.0));
  CHECK_THROWS_AS(t.gradients(tanh(w), std::vector<Var>{w}), std::invalid_argument);
}

TEST_CASE("shape errors name the primitive and shapes") {
  Tape t;
  Var a = t.leaf(Tensor(2, 3));
  Var b = t.leaf(Tensor(2, 2));
  try {
    (void)add(a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("2x3") != std::string::npos);
    CHECK(msg.find("2x2") != std::string::npos);
  }
  CHECK_THROWS_WITH_AS((void)matmul(a, a), doctest::Contains("matmul"), std::invalid_argument);
}

TEST_CASE("every primitive matches central differences at random points") {
  Rng rng(7);
  // Each loss weights its primitive's output with a fixed random matrix so
  // that every output element contributes.
  struct Case {
    const char* name;
    std::size_t r0, c0, r1, c1;
    std::function<Var(Var, Var)> op;
  };
  const auto idx = make_indices({2, 0, 2, 1});
  const std::vector<Case> cases = {
      {"matmul", 3, 4, 4, 2, [](Var a, Var b) { return matmul(a, b); }},
      {"matmul_tn", 4, 3, 4, 2, [](Var a, Var b) { return matmul(a, b, kernels::Trans::kLeft); }},
      {"matmul_nt", 3, 4, 2, 4, [](Var a, Var b) { return matmul(a, b, kernels::Trans::kRight); }},
      {"add", 2, 3, 2, 3, [](Var a, Var b) { return add(a, b); }},
      {"sub", 2, 3, 2, 3, [](Var a, Var b) { return sub(a, b); }},
      {"mul", 2, 3, 2, 3, [](Var a, Var b) { return mul(a, b); }},
      {"add_row", 3, 4, 1, 4, [](Var a, Var b) { return add_row(a, b); }},
      {"scale", 2, 3, 1, 1, [](Var a, Var) { return scale(a, -1.7); }},
      {"add_scalar", 2, 3, 1, 1, [](Var a, Var) { return mul(add_scalar(a, 0.3), a); }},
      {"tanh", 2, 3, 1, 1, [](Var a, Var) { return tanh(a); }},
      {"sigmoid", 2, 3, 1, 1, [](Var a, Var) { return sigmoid(a); }},
      {"exp", 2, 3, 1, 1, [](Var a, Var) { return exp(a); }},
      {"log_softmax", 3, 5, 1, 1, [](Var a, Var) { return log_softmax(a); }},
      {"softmax", 3, 5, 1, 1, [](Var a, Var) { return softmax(a); }},
      {"sum", 3, 2, 1, 1, [](Var a, Var) { return mul(sum(a), sum(a)); }},
      {"mean", 3, 2, 1, 1, [](Var a, Var) { return mul(mean(a), sum(a)); }},
      {"sum_rows", 3, 4, 1, 1, [](Var a, Var) { return sum_rows(mul(a, a)); }},
      {"sum_cols", 3, 4, 1, 1, [](Var a, Var) { return sum_cols(mul(a, a)); }},
      {"broadcast_scalar", 1, 1, 1, 1, [](Var a, Var) { return broadcast_scalar(tanh(a), 2, 3); }},
      {"broadcast_rows", 1, 4, 1, 1, [](Var a, Var) { return broadcast_rows(tanh(a), 3); }},
      {"broadcast_cols", 3, 1, 1, 1, [](Var a, Var) { return broadcast_cols(tanh(a), 4); }},
      {"slice_cols", 2, 5, 1, 1, [](Var a, Var) { return slice_cols(tanh(a), 1, 3); }},
      {"pad_cols", 2, 2, 1, 1, [](Var a, Var) { return pad_cols(tanh(a), 1, 5); }},
      {"concat_cols", 2, 2, 2, 3, [](Var a, Var b) { return concat_cols(a, tanh(b)); }},
      {"gather_rows", 3, 2, 1, 1, [idx](Var a, Var) { return gather_rows(tanh(a), idx); }},
      {"scatter_rows", 4, 2, 1, 1, [idx](Var a, Var) { return scatter_rows(tanh(a), idx, 3); }},
      {"pick", 4, 3, 1, 1, [idx](Var a, Var) { return pick(tanh(a), idx); }},
      {"scatter_pick", 4, 1, 1, 1, [idx](Var a, Var) { return scatter_pick(tanh(a), idx, 3); }},
      {"reshape", 2, 6, 1, 1, [](Var a, Var) { return reshape(tanh(a), 3, 4); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    for (int trial = 0; trial < 5; ++trial) {
      ParameterStore p;
      p.add("a", random_tensor(c.r0, c.c0, rng));
      p.add("b", random_tensor(c.r1, c.c1, rng));
      // Output shape for the weighting matrix.
      Tensor out_shape;
      {
        Tape t;
        auto v = p.bind(t, false);
        out_shape = c.op(v[0], v[1]).value();
      }
      Tensor w = random_tensor(out_shape.rows(), out_shape.cols(), rng);
      LossFn f = [&](Tape& t, std::span<const Var> v) {
        return sum(mul(c.op(v[0], v[1]), t.constant(w)));
      };
      CHECK(fd_check(p, f) < 1e-4);
    }
  }
}

TEST_CASE("second derivatives of every nonlinearity match differences of gradients") {
  // d/dx of (dL/dx . v) computed by create_graph against differences.
  Rng rng(11);
  const std::vector<std::function<Var(Var)>> fns = {
      [](Var a) { return tanh(a); },     [](Var a) { return sigmoid(a); },
      [](Var a) { return exp(a); },      [](Var a) { return log_softmax(a); },
      [](Var a) { return mul(a, a); },   [](Var a) { return softmax(a); },
  };
  for (const auto& fn : fns) {
    ParameterStore p;
    p.add("x", random_tensor(2, 4, rng));
    Tensor w = random_tensor(2, 4, rng);
    Tensor v = random_tensor(2, 4, rng);
    LossFn grad_dot = [&](Tape& t, std::span<const Var> x) {
      Var l = sum(mul(fn(x[0]), t.constant(w)));
      auto g = t.gradients(l, x, /*create_graph=*/true);
      return sum(mul(g[0], t.constant(v)));
    };
    auto analytic = plain_gradient(p, grad_dot).grad;
    auto numeric = central_differences(p, [&](const ParameterStore& q) {
      Tape t;
      auto x = q.bind(t);
      return grad_dot(t, x).value().item();
    });
    CHECK(max_relative_error(analytic, numeric) < 1e-4);
  }
}

TEST_CASE("meta-gradient of theta^2 through one step") {
  ParameterStore p;
  p.add("theta", Tensor::scalar(1.0));
  LossFn sq = [](Tape&, std::span<const Var> v) { return sum(mul(v[0], v[0])); };

  SUBCASE("second order: 2 theta (1 - 2 alpha)^2") {
    auto mg = grad_through_update(p, sq, sq, 0.1, false);
    CHECK(mg.grad[0] == doctest::Approx(1.28).epsilon(1e-12));
  }
  SUBCASE("first order: 2 theta (1 - 2 alpha)") {
    auto mg = grad_through_update(p, sq, sq, 0.1, true);
    CHECK(mg.grad[0] == doctest::Approx(1.6).epsilon(1e-12));
  }
  SUBCASE("negative step size is rejected") {
    CHECK_THROWS_AS(grad_through_update(p, sq, sq, -0.1, false), std::invalid_argument);
  }
}

TEST_CASE("alpha = 0 reduces the meta-gradient to the outer gradient bitwise") {
  Rng rng(3);
  ParameterStore p;
  p.add("w", random_tensor(3, 4, rng));
  p.add("b", random_tensor(1, 4, rng));
  Tensor x = random_tensor(5, 3, rng);
  LossFn inner = [&](Tape& t, std::span<const Var> v) {
    return sum(tanh(add_row(matmul(t.constant(x), v[0]), v[1])));
  };
  LossFn outer = [&](Tape& t, std::span<const Var> v) {
    return mean(exp(log_softmax(add_row(matmul(t.constant(x), v[0]), v[1]))));
  };
  auto plain = plain_gradient(p, outer).grad;
  CHECK(grad_through_update(p, inner, outer, 0.0, false).grad == plain);
  CHECK(grad_through_update(p, inner, outer, 0.0, true).grad == plain);
}

TEST_CASE("second-order meta-gradient matches differences of the composed objective") {
  Rng rng(5);
  Tensor x_in = random_tensor(6, 3, rng);
  Tensor x_out = random_tensor(6, 3, rng);
  LossFn inner = [&](Tape& t, std::span<const Var> v) {
    Var h = tanh(add_row(matmul(t.constant(x_in), v[0]), v[1]));
    return mean(mul(h, h));
  };
  LossFn outer = [&](Tape& t, std::span<const Var> v) {
    Var lp = log_softmax(add_row(matmul(t.constant(x_out), v[0]), v[1]));
    return scale(sum(pick(lp, make_indices({0, 1, 2, 3, 0, 1}))), -1.0);
  };
  const double alpha = 0.3;
  for (int trial = 0; trial < 20; ++trial) {
    ParameterStore p;
    p.add("w", random_tensor(3, 4, rng));
    p.add("b", random_tensor(1, 4, rng));
    auto mg = grad_through_update(p, inner, outer, alpha, false).grad;
    auto composed = [&](const ParameterStore& q) {
      auto g = plain_gradient(q, inner).grad;
      ParameterStore adapted = q;
      auto flat = q.flat();
      for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= alpha * g[i];
      adapted.set_flat(flat);
      return eval(adapted, outer);
    };
    CHECK(max_relative_error(mg, central_differences(p, composed)) < 1e-3);
  }
}

TEST_CASE("two backward passes over the same tape agree exactly") {
  Rng rng(9);
  Tape t;
  Var w = t.leaf(random_tensor(4, 4, rng));
  Var x = t.constant(random_tensor(3, 4, rng));
  Var l = sum(log_softmax(tanh(matmul(x, w))));
  auto g1 = t.gradients(l, std::vector<Var>{w});
  auto g2 = t.gradients(l, std::vector<Var>{w});
  CHECK(g1[0].value() == g2[0].value());
}

TEST_CASE("no-grad guard stops recording") {
  Tape t;
  Var w = t.leaf(Tensor::scalar(2.0));
  Var y;
  {
    NoGradGuard g(t);
    y = mul(w, w);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(mul(w, w).requires_grad());
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters and advances the step") {
    ParameterStore p;
    p.add("w", Tensor(1, 3, {1.0, -2.0, 0.5}));
    auto before = p;
    auto s = AdamState::for_store(p, 1e-2);
    adam_step(p, FlatVector(3, 0.0), s);
    CHECK(p == before);
    CHECK(s.step == 1);
  }
  SUBCASE("first step with g = 1 moves by the learning rate") {
    ParameterStore p;
    p.add("w", Tensor::scalar(0.0));
    auto s = AdamState::for_store(p, 1e-3);
    adam_step(p, FlatVector{1.0}, s);
    CHECK(p.at("w").item() == doctest::Approx(-1e-3).epsilon(1e-6));
  }
  SUBCASE("minimises a quadratic") {
    ParameterStore p;
    p.add("w", Tensor(1, 2, {3.0, -4.0}));
    auto s = AdamState::for_store(p, 0.05);
    for (int i = 0; i < 2000; ++i) {
      auto w = p.flat();
      adam_step(p, FlatVector{2.0 * (w[0] - 1.0), 2.0 * (w[1] + 0.5)}, s);
    }
    CHECK(p.at("w")[0] == doctest::Approx(1.0).epsilon(1e-3));
    CHECK(p.at("w")[1] == doctest::Approx(-0.5).epsilon(1e-3));
  }
  SUBCASE("length mismatch is an error") {
    ParameterStore p;
    p.add("w", Tensor::scalar(0.0));
    auto s = AdamState::for_store(p, 1e-3);
    CHECK_THROWS_AS(adam_step(p, FlatVector{1.0, 2.0}, s), std::invalid_argument);
  }
}

TEST_CASE("reptile direction on a quadratic") {
  // loss = 0.5 * ||w - c||^2, one SGD step: adapted = w - alpha (w - c)
  ParameterStore p;
  p.add("w", Tensor(1, 2, {2.0, -1.0}));
  const Tensor c(1, 2, {0.5, 0.5});
  LossFn q = [&](Tape& t, std::span<const Var> v) {
    Var d = sub(v[0], t.constant(c));
    return scale(sum(mul(d, d)), 0.5);
  };
  std::vector<LossFn> losses{q};
  auto r = reptile_direction(p, losses, 0.25);
  CHECK(r.grad[0] == doctest::Approx(0.25 * 1.5));
  CHECK(r.grad[1] == doctest::Approx(0.25 * -1.5));
}

TEST_CASE("parameter store") {
  ParameterStore p;
  p.add("a", Tensor(2, 2, 1.0));
  p.add("b", Tensor(1, 3, 2.0));
  CHECK(p.flat_size() == 7);
  CHECK_THROWS_AS(p.add("a", Tensor(1, 1)), std::invalid_argument);
  ParameterStore q = p;
  q.at("a")(0, 0) = 5.0;
  CHECK(p.at("a")(0, 0) == 1.0);
  CHECK(p.hash() != q.hash());
  auto flat = p.flat();
  flat[6] = -1.0;
  p.set_flat(flat);
  CHECK(p.at("b")[2] == -1.0);
}

TEST_CASE("parallel gemm agrees with the serial reference") {
  Rng rng(1);
  const auto prev = kernels::parallel_threshold();
  kernels::set_parallel_threshold(0);
  for (auto trans : {kernels::Trans::kNone, kernels::Trans::kLeft, kernels::Trans::kRight}) {
    Tensor a = trans == kernels::Trans::kLeft ? random_tensor(7, 5, rng) : random_tensor(5, 7, rng);
    Tensor b = trans == kernels::Trans::kRight ? random_tensor(6, 7, rng) : random_tensor(7, 6, rng);
    CHECK(kernels::gemm(a, b, trans) == kernels::gemm_reference(a, b, trans));
  }
  kernels::set_parallel_threshold(prev);
}
