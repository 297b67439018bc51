#include <cmath>
#include <limits>

#include "doctest.h"
#include "ngsll/errors.hpp"
#include "suites.hpp"

using namespace ngsll;
using ad::Tensor;

TEST_CASE("every primitive matches central differences") {
  testing::GradientSuite suite(101);
  testing::run_primitive_gradients(suite, 100);
  for (const auto& e : suite.results()) {
    INFO(e.name << " over " << e.instances << " instances");
    CHECK(e.instances >= 100);
    CHECK(e.worst <= 1e-4);
  }
}

TEST_CASE("soft gate and full model gradients match central differences") {
  testing::GradientSuite suite(202);
  testing::run_gate_gradients(suite, 50);
  testing::run_model_gradients(suite, 10);
  for (const auto& e : suite.results()) {
    INFO(e.name << " over " << e.instances << " instances");
    CHECK(e.worst <= 1e-4);
  }
}

TEST_CASE("square and sum give 2x") {
  ad::Graph g;
  const Tensor x = g.variable(Tensor::vector({1.0, -2.0, 3.0}));
  g.backward(ad::sum(ad::square(x)));
  const auto gx = g.grad(x);
  CHECK(gx[0] == 2.0);
  CHECK(gx[1] == -4.0);
  CHECK(gx[2] == 6.0);
}

TEST_CASE("gradients accumulate when a tensor is used twice") {
  ad::Graph g;
  const Tensor x = g.variable(Tensor::vector({0.5, 2.0}));
  g.backward(ad::sum(ad::add(ad::scale(x, 3.0), x)));
  CHECK(g.grad(x)[0] == 4.0);
  CHECK(g.grad(x)[1] == 4.0);
}

TEST_CASE("parameters receive gradients through the graph") {
  ad::Parameter p{"w", Tensor::vector({1.0, 2.0}), {}};
  p.zero_grad();
  for (int pass = 0; pass < 2; ++pass) {
    ad::Graph g;
    const Tensor w = g.parameter(p);
    g.backward(ad::sum(ad::mul(w, Tensor::vector({3.0, -1.0}))));
  }
  CHECK(p.grad[0] == 6.0);
  CHECK(p.grad[1] == -2.0);
}

TEST_CASE("constants build no graph") {
  const Tensor y = ad::add(Tensor::vector({1.0}), Tensor::vector({2.0}));
  CHECK(y.is_constant());
  CHECK(y.item() == 3.0);
}

TEST_CASE("matmul and transpose values") {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b({3, 1}, {1, 0, -1});
  const Tensor c = ad::matmul(a, b);
  REQUIRE(c.shape() == ad::Shape{2, 1});
  CHECK(c[0] == -2.0);
  CHECK(c[1] == -2.0);
  const Tensor t = ad::transpose(a);
  CHECK(t.shape() == ad::Shape{3, 2});
  CHECK(t[1] == 4.0);
}

TEST_CASE("conv2d matches a hand-computed cross-correlation") {
  const Tensor x({1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  const Tensor k({1, 1, 2, 2}, {1, 0, 0, -1});
  const Tensor y = ad::conv2d(x, k, Tensor::vector({0.5}));
  REQUIRE(y.shape() == ad::Shape{1, 2, 2});
  for (double v : y.data()) CHECK(v == -3.5);
  const Tensor padded = ad::conv2d(x, k, {}, {1, 1});
  CHECK(padded.shape() == ad::Shape{1, 4, 4});
  CHECK(padded[0] == -1.0);
}

TEST_CASE("max_pool2d routes the gradient to the window maximum") {
  ad::Graph g;
  const Tensor x = g.variable(Tensor({1, 2, 2}, {1, 4, 3, 2}));
  const Tensor y = ad::max_pool2d(x, 2, 2);
  CHECK(y.item() == 4.0);
  g.backward(ad::sum(y));
  const auto gx = g.grad(x);
  CHECK(gx[0] == 0.0);
  CHECK(gx[1] == 1.0);
  CHECK(gx[2] == 0.0);
}

TEST_CASE("softmax excludes -inf entries exactly") {
  const double inf = std::numeric_limits<double>::infinity();
  const Tensor p = ad::softmax(Tensor::vector({0.0, -inf, 0.0}), 0);
  CHECK(p[0] == doctest::Approx(0.5));
  CHECK(p[1] == 0.0);
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-15));
  const Tensor lp = ad::log_softmax(Tensor::vector({1.0, -inf}), 0);
  CHECK(lp[0] == 0.0);
  CHECK(std::isinf(lp[1]));
  CHECK_THROWS_AS(ad::softmax(Tensor::vector({-inf, -inf}), 0), DomainError);
}

TEST_CASE("softplus is stable for large inputs") {
  const Tensor y = ad::softplus(Tensor::vector({800.0, -800.0, 0.0}));
  CHECK(y[0] == doctest::Approx(800.0));
  CHECK(y[1] >= 0.0);
  CHECK(y[1] < 1e-300);
  CHECK(y[2] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("finite differences and relative error helpers") {
  const Tensor fd = ad::finite_difference_grad(
      [](const Tensor& x) { return x[0] * x[0] * x[0]; }, Tensor::vector({2.0}));
  CHECK(fd[0] == doctest::Approx(12.0).epsilon(1e-7));
  const std::vector<double> a{1.0, 0.0}, b{1.0001, 0.0};
  CHECK(ad::relative_error(a, b) == doctest::Approx(1e-4 / 1.0001));
  CHECK_THROWS_AS(ad::finite_difference_grad([](const Tensor&) { return 0.0; },
                                             Tensor::vector({1.0}), 0.0),
                  ContractError);
}

TEST_CASE("misuse raises typed errors") {
  CHECK_THROWS_AS(ad::add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), DimensionError);
  CHECK_THROWS_AS(ad::matmul(Tensor({2, 3}, std::vector<double>(6)), Tensor({2, 3}, std::vector<double>(6))),
                  DimensionError);
  CHECK_THROWS_AS(ad::log(Tensor::vector({1.0, 0.0})), DomainError);
  CHECK_THROWS_AS(ad::log(Tensor::vector({-1.0})), DomainError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), DimensionError);
  CHECK_THROWS_AS(ad::reshape(Tensor::vector({1, 2, 3}), {2, 2}), DimensionError);
  CHECK_THROWS_AS(ad::gather_rows(Tensor({2, 1}, {1, 2}), std::vector<std::size_t>{2}), DimensionError);
  CHECK_THROWS_AS(ad::conv2d(Tensor({1, 2, 2}, {1, 2, 3, 4}), Tensor({1, 1, 3, 3}, std::vector<double>(9))),
                  DimensionError);
  CHECK_THROWS_AS(Tensor::vector({1, 2}).item(), ContractError);

  ad::Graph g1, g2;
  const Tensor a = g1.variable(Tensor::vector({1.0}));
  const Tensor b = g2.variable(Tensor::vector({1.0}));
  CHECK_THROWS_AS(ad::add(a, b), ContractError);
  CHECK_THROWS_AS(g1.backward(ad::add(a, Tensor::vector({1.0, 2.0}))), ContractError);
  const Tensor loss = ad::sum(a);
  g1.backward(loss);
  CHECK_THROWS_AS(g1.backward(loss), ContractError);
}
