#include "ngsll/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace ngsll::baselines {

Design design(const data::Dataset& dataset) {
  if (!dataset.binary()) throw ContractError("linear baselines need a binary dataset");
  if (dataset.empty()) throw ContractError("linear baselines: empty dataset");
  Design out;
  out.z.resize(static_cast<Eigen::Index>(dataset.size()), static_cast<Eigen::Index>(dataset.d));
  out.y.resize(static_cast<Eigen::Index>(dataset.size()));
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& s = dataset.samples[i];
    if (s.z.size() != dataset.d) throw DimensionError("linear baselines: ragged z");
    for (std::size_t j = 0; j < dataset.d; ++j) {
      out.z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s.z[j];
    }
    out.y(static_cast<Eigen::Index>(i)) = s.label;
  }
  return out;
}

Eigen::VectorXd ridge_fit(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, double alpha) {
  if (z.rows() != y.size()) throw DimensionError("ridge_fit: row count differs from label count");
  if (alpha < 0.0) throw ContractError("ridge_fit: alpha must be non-negative");
  Eigen::MatrixXd a = z.transpose() * z;
  a.diagonal().array() += alpha;
  const Eigen::LLT<Eigen::MatrixXd> llt(a);
  if (llt.info() != Eigen::Success || llt.rcond() < 1e-13) {
    throw SolverError("ridge_fit: normal equations are singular at alpha=" +
                      std::to_string(alpha));
  }
  return llt.solve(z.transpose() * y);
}

double soft_threshold(double v, double t) {
  if (v > t) return v - t;
  if (v < -t) return v + t;
  return 0.0;
}

LassoResult lasso_fit(const Eigen::MatrixXd& z, const Eigen::VectorXd& y, double alpha,
                      const LassoOptions& options) {
  if (z.rows() != y.size()) throw DimensionError("lasso_fit: row count differs from label count");
  if (!(alpha > 0.0)) throw ContractError("lasso_fit: alpha must be positive");
  const double n = static_cast<double>(z.rows());
  const Eigen::Index d = z.cols();
  const Eigen::VectorXd sq = z.colwise().squaredNorm().transpose() / n;
  LassoResult out;
  out.w = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd residual = y;
  double largest = 0.0;
  for (out.sweeps = 1; out.sweeps <= options.max_sweeps; ++out.sweeps) {
    largest = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      if (sq(j) == 0.0) continue;  // all-zero column: its weight stays 0
      const double old = out.w(j);
      const double rho = z.col(j).dot(residual) / n + sq(j) * old;
      const double next = soft_threshold(rho, alpha) / sq(j);
      if (next != old) {
        residual.noalias() -= (next - old) * z.col(j);
        out.w(j) = next;
        largest = std::max(largest, std::abs(next - old));
      }
    }
    if (largest <= options.tol) {
      out.converged = true;
      return out;
    }
  }
  out.sweeps = options.max_sweeps;
  if (options.warn) {
    std::cerr << "warning: lasso did not converge within " << options.max_sweeps
              << " sweeps (alpha=" << alpha << ", last change " << largest << ")\n";
  }
  return out;
}

double lasso_kkt_violation(const Eigen::MatrixXd& z, const Eigen::VectorXd& y,
                           const Eigen::VectorXd& w, double alpha) {
  const double n = static_cast<double>(z.rows());
  const Eigen::VectorXd corr = z.transpose() * (y - z * w) / n;
  double worst = 0.0;
  for (Eigen::Index j = 0; j < w.size(); ++j) {
    const double v = w(j) != 0.0 ? std::abs(corr(j) - alpha * (w(j) > 0 ? 1.0 : -1.0))
                                 : std::max(0.0, std::abs(corr(j)) - alpha);
    worst = std::max(worst, v);
  }
  return worst;
}

std::vector<std::size_t> topk_indices(std::span<const double> w, std::size_t k) {
  std::vector<std::size_t> idx(w.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(w[a]) > std::abs(w[b]); });
  if (idx.size() > k) idx.resize(k);
  return idx;
}

Eigen::VectorXd truncate_topk(const Eigen::VectorXd& w, std::size_t k) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(w.size());
  for (std::size_t j : topk_indices(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())), k)) {
    out(static_cast<Eigen::Index>(j)) = w(static_cast<Eigen::Index>(j));
  }
  return out;
}

double linear_accuracy(const Eigen::MatrixXd& z, const Eigen::VectorXd& y,
                       const Eigen::VectorXd& w) {
  if (z.rows() == 0) throw ContractError("linear_accuracy: no rows");
  const Eigen::VectorXd s = z * w;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    const double predicted = s(i) > 0.0 ? 1.0 : -1.0;
    if (predicted == y(i)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(s.size());
}

double topk_truncate_eval(const Eigen::VectorXd& w, const Design& data, std::size_t k) {
  if (k == 0 || k > static_cast<std::size_t>(w.size())) {
    throw ContractError("topk_truncate_eval: K must lie in [1, d]");
  }
  return linear_accuracy(data.z, data.y, truncate_topk(w, k));
}

const char* to_string(Kind kind) { return kind == Kind::kRidge ? "ridge" : "lasso"; }

std::vector<double> default_alpha_grid() { return {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2}; }

Selection select_alpha(Kind kind, const Design& train, const Design& validation, std::size_t k,
                       std::span<const double> grid, const LassoOptions& lasso) {
  if (grid.empty()) throw ContractError("select_alpha: empty alpha grid");
  Selection best;
  best.kind = kind;
  best.k = k;
  best.validation_accuracy = -1.0;
  for (double alpha : grid) {
    Eigen::VectorXd w;
    try {
      w = kind == Kind::kRidge ? ridge_fit(train.z, train.y, alpha)
                               : lasso_fit(train.z, train.y, alpha, lasso).w;
    } catch (const SolverError&) {
      continue;
    }
    w = truncate_topk(w, k);
    const double acc = linear_accuracy(validation.z, validation.y, w);
    if (acc > best.validation_accuracy) {
      best.alpha = alpha;
      best.w = std::move(w);
      best.validation_accuracy = acc;
    }
  }
  if (best.validation_accuracy < 0.0) {
    throw SolverError("select_alpha: every alpha on the grid failed");
  }
  return best;
}

}  // namespace ngsll::baselines
