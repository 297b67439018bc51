#include <cmath>
#include <random>

#include "doctest.h"
#include "ngsll/baselines.hpp"
#include "ngsll/errors.hpp"

using namespace ngsll;
using namespace ngsll::baselines;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng) {
  std::normal_distribution<double> dist;
  Eigen::MatrixXd z(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < d; ++j) z(i, j) = dist(rng);
  }
  return z;
}

// Columns scaled so ZᵀZ / n = I.
Eigen::MatrixXd orthonormal_design(Eigen::Index n, Eigen::Index d, std::mt19937_64& rng) {
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(n, d, rng));
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, d);
  return q * std::sqrt(static_cast<double>(n));
}

}  // namespace

TEST_CASE("ridge examples") {
  const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(2, 2);
  const Eigen::VectorXd y = Eigen::Vector2d(1, -1);
  const Eigen::VectorXd w = ridge_fit(eye, y, 0.0);
  CHECK(w(0) == doctest::Approx(1.0));
  CHECK(w(1) == doctest::Approx(-1.0));
  CHECK(ridge_fit(eye, y, 1e12).norm() < 1e-11);
}

TEST_CASE("ridge solves the normal equations") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd z = random_matrix(40, 6, rng);
    const Eigen::VectorXd y = random_matrix(40, 1, rng);
    const double alpha = std::pow(10.0, static_cast<double>(trial % 5) - 2.0);
    const Eigen::VectorXd w = ridge_fit(z, y, alpha);
    Eigen::MatrixXd a = z.transpose() * z;
    a.diagonal().array() += alpha;
    const Eigen::VectorXd ref = a.colPivHouseholderQr().solve(z.transpose() * y);
    CHECK((w - ref).cwiseAbs().maxCoeff() <= 1e-8);
  }
}

TEST_CASE("ridge on a rank-deficient design") {
  Eigen::MatrixXd z(3, 2);
  z << 1, 2, 2, 4, 3, 6;
  const Eigen::VectorXd y = Eigen::Vector3d(1, -1, 1);
  CHECK_THROWS_AS(ridge_fit(z, y, 0.0), SolverError);
  CHECK_NOTHROW(ridge_fit(z, y, 1e-2));
  CHECK_THROWS_AS(ridge_fit(z, Eigen::Vector2d(1, 1), 1.0), DimensionError);
  CHECK_THROWS_AS(ridge_fit(z, y, -1.0), ContractError);
}

TEST_CASE("lasso matches soft thresholding on an orthonormal design") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::Index n = 50, d = 5;
    const Eigen::MatrixXd z = orthonormal_design(n, d, rng);
    const Eigen::VectorXd y = random_matrix(n, 1, rng);
    const double alpha = 0.05 * (trial + 1);
    const auto fit = lasso_fit(z, y, alpha);
    CHECK(fit.converged);
    const Eigen::VectorXd ols = z.transpose() * y / static_cast<double>(n);
    for (Eigen::Index j = 0; j < d; ++j) {
      CHECK(std::abs(fit.w(j) - soft_threshold(ols(j), alpha)) <= 1e-6);
    }
  }
}

TEST_CASE("lasso satisfies its optimality conditions") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const Eigen::MatrixXd z = random_matrix(60, 8, rng);
    const Eigen::VectorXd y = random_matrix(60, 1, rng);
    const double alpha = 0.01 + 0.03 * trial;
    const auto fit = lasso_fit(z, y, alpha);
    CHECK(fit.converged);
    CHECK(lasso_kkt_violation(z, y, fit.w, alpha) <= 1e-6);
  }
}

TEST_CASE("large alpha zeroes every lasso weight") {
  std::mt19937_64 rng(4);
  const Eigen::MatrixXd z = random_matrix(30, 4, rng);
  const Eigen::VectorXd y = random_matrix(30, 1, rng);
  const double alpha_max = (z.transpose() * y).cwiseAbs().maxCoeff() / 30.0;
  CHECK(lasso_fit(z, y, alpha_max * 1.01).w.isZero(0.0));
  CHECK(!lasso_fit(z, y, alpha_max * 0.5).w.isZero(0.0));
  CHECK_THROWS_AS(lasso_fit(z, y, 0.0), ContractError);
}

TEST_CASE("lasso reports non-convergence") {
  std::mt19937_64 rng(5);
  const Eigen::MatrixXd z = random_matrix(30, 10, rng);
  const Eigen::VectorXd y = random_matrix(30, 1, rng);
  const auto fit = lasso_fit(z, y, 1e-4, {1e-30, 2, false});
  CHECK(!fit.converged);
  CHECK(fit.sweeps == 2);
}

TEST_CASE("soft threshold") {
  CHECK(soft_threshold(3.0, 1.0) == 2.0);
  CHECK(soft_threshold(-3.0, 1.0) == -2.0);
  CHECK(soft_threshold(0.5, 1.0) == 0.0);
}

TEST_CASE("top-K truncation") {
  const std::vector<double> w{3, -1, 2};
  CHECK(topk_indices(w, 2) == std::vector<std::size_t>{0, 2});
  const std::vector<double> tie{1, -1, 1};
  CHECK(topk_indices(tie, 2) == std::vector<std::size_t>{0, 1});
  const Eigen::VectorXd t = truncate_topk(Eigen::Vector3d(3, -1, 2), 2);
  CHECK(t == Eigen::Vector3d(3, 0, 2));

  std::mt19937_64 rng(6);
  Design data{random_matrix(50, 3, rng), Eigen::VectorXd(50)};
  for (Eigen::Index i = 0; i < 50; ++i) data.y(i) = i % 2 ? 1.0 : -1.0;
  const Eigen::VectorXd w3 = Eigen::Vector3d(0.3, -1, 2);
  CHECK(topk_truncate_eval(w3, data, 3) == linear_accuracy(data.z, data.y, w3));
  CHECK_THROWS_AS(topk_truncate_eval(w3, data, 0), ContractError);
  CHECK_THROWS_AS(topk_truncate_eval(w3, data, 4), ContractError);
}

TEST_CASE("linear accuracy counts zero scores as negative") {
  Eigen::MatrixXd z(3, 1);
  z << 1, -1, 0;
  const Eigen::VectorXd y = Eigen::Vector3d(1, -1, -1);
  CHECK(linear_accuracy(z, y, Eigen::VectorXd::Ones(1)) == 1.0);
}

TEST_CASE("alpha selection keeps the best validation accuracy") {
  std::mt19937_64 rng(7);
  const Eigen::MatrixXd z = random_matrix(200, 5, rng);
  Eigen::VectorXd y(200);
  for (Eigen::Index i = 0; i < 200; ++i) y(i) = z(i, 2) - 0.2 * z(i, 0) > 0 ? 1.0 : -1.0;
  const Design tr{z.topRows(150), y.head(150)};
  const Design va{z.bottomRows(50), y.tail(50)};
  const auto grid = default_alpha_grid();
  CHECK(grid.size() == 7);
  for (Kind kind : {Kind::kRidge, Kind::kLasso}) {
    const auto sel = select_alpha(kind, tr, va, 1, grid);
    CHECK(sel.kind == kind);
    CHECK(sel.w.size() == 5);
    CHECK((sel.w.array() != 0.0).count() <= 1);
    CHECK(sel.w(2) != 0.0);
    for (double alpha : grid) {
      Eigen::VectorXd w = kind == Kind::kRidge ? ridge_fit(tr.z, tr.y, alpha)
                                               : lasso_fit(tr.z, tr.y, alpha).w;
      CHECK(linear_accuracy(va.z, va.y, truncate_topk(w, 1)) <= sel.validation_accuracy);
    }
  }
  const std::vector<double> none;
  CHECK_THROWS_AS(select_alpha(Kind::kRidge, tr, va, 1, none), ContractError);
}

TEST_CASE("design requires a binary dataset") {
  data::Dataset ds;
  ds.d = 2;
  ds.num_classes = 3;
  CHECK_THROWS_AS(design(ds), ContractError);
  ds.num_classes = 2;
  data::Sample s;
  s.z = {1.0, 2.0};
  s.label = -1;
  ds.samples.push_back(s);
  const auto dz = design(ds);
  CHECK(dz.z(0, 1) == 2.0);
  CHECK(dz.y(0) == -1.0);
}
