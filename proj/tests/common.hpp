#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ngsll/autodiff.hpp"

namespace testing {

using ngsll::ad::Shape;
using ngsll::ad::Tensor;

inline std::vector<double> uniform(std::size_t n, std::mt19937_64& rng, double lo = -1.0,
                                   double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (double& v : out) v = dist(rng);
  return out;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  const std::size_t n = ngsll::ad::numel(shape);
  return Tensor(std::move(shape), uniform(n, rng, lo, hi));
}

// Reduces any output to a scalar with fixed random coefficients so every
// output entry contributes a distinct amount to the checked gradient.
inline Tensor project(const Tensor& out, const std::vector<double>& coeffs) {
  return ngsll::ad::sum(ngsll::ad::mul(out, Tensor(out.shape(), coeffs)));
}

struct GradCheck {
  double rel_error = 0.0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

// `f` must build the same computation for graph variables and constants.
inline GradCheck check_gradient(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                std::mt19937_64& rng, double eps = 1e-4) {
  const Tensor probe = f(x);
  const auto coeffs = probe.size() == 1 ? std::vector<double>{1.0} : uniform(probe.size(), rng, 0.5, 1.5);
  auto scalar = [&](const Tensor& in) {
    const Tensor out = f(in);
    return out.size() == 1 && out.dim() == 0 ? out : project(out, coeffs);
  };
  ngsll::ad::Graph g;
  const Tensor xv = g.variable(x);
  const Tensor loss = scalar(xv);
  g.backward(loss);
  GradCheck r;
  const auto ga = g.grad(xv);
  r.analytic.assign(ga.begin(), ga.end());
  const Tensor fd = ngsll::ad::finite_difference_grad(
      [&](const Tensor& in) { return scalar(in).item(); }, x, eps);
  r.numeric.assign(fd.data().begin(), fd.data().end());
  r.rel_error = ngsll::ad::relative_error(r.analytic, r.numeric);
  return r;
}

}  // namespace testing
