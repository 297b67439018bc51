#pragma once

// Global linear baselines on the simplified representation z, with per-model
// top-K truncation so they can be compared at the same explanation size.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ngsll/data.hpp"

namespace ngsll::baselines {

struct Design {
  Eigen::MatrixXd z;  // n × d
  Eigen::VectorXd y;  // ±1
};

/// Stacks z rows and ±1 labels of a binary dataset.
Design design(const data::Dataset& dataset);

/// Solves (ZᵀZ + αI) w = Zᵀy. Throws SolverError when the system is singular.
Eigen::VectorXd ridge_fit(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, double alpha);

struct LassoOptions {
  double tol = 1e-8;  // stop when no coordinate moved more than this in a sweep
  std::size_t max_sweeps = 10000;
  bool warn = true;  // report non-convergence on stderr
};

struct LassoResult {
  Eigen::VectorXd w;
  std::size_t sweeps = 0;
  bool converged = false;
};

/// Cyclic coordinate descent on (1/2n)‖y − Zw‖² + α‖w‖₁.
LassoResult lasso_fit(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, double alpha,
                      const LassoOptions& options = {});

/// Largest violation of the lasso optimality conditions at `w`.
double lasso_kkt_violation(const Eigen::MatrixXd& z, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& w, double alpha);

double soft_threshold(double v, double t);

/// Indices of the K largest |w_j|, lowest index first on ties.
std::vector<std::size_t> topk_indices(std::span<const double> w, std::size_t k);
/// Copy of `w` with all but the K largest-magnitude entries zeroed.
Eigen::VectorXd truncate_topk(const Eigen::VectorXd& w, std::size_t k);

/// Fraction of rows where sign(zᵀw) matches y (zero scores count as −1).
double linear_accuracy(const Eigen::MatrixXd& z, const Eigen::VectorXd& y,
                       const Eigen::VectorXd& w);

/// Accuracy of `w` after truncation to its K largest-magnitude entries.
double topk_truncate_eval(const Eigen::VectorXd& w, const Design& data, std::size_t k);

enum class Kind { kRidge, kLasso };
const char* to_string(Kind kind);

/// 1e-4, 1e-3, …, 1e2.
std::vector<double> default_alpha_grid();

struct Selection {
  Kind kind = Kind::kRidge;
  double alpha = 0.0;
  std::size_t k = 0;
  Eigen::VectorXd w;  // truncated to K
  double validation_accuracy = 0.0;
};

/// Fits every α on the grid, truncates each fit to K, and keeps the α with
/// the best validation accuracy (earliest grid entry on ties).
Selection select_alpha(Kind kind, const Design& train, const Design& validation, std::size_t k,
                       std::span<const double> grid, const LassoOptions& lasso = {});

}  // namespace ngsll::baselines
