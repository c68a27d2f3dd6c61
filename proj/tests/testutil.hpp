#pragma once

// Shared helpers for the test suites, chiefly the central finite-difference
// gradient oracle used to validate every differentiable op.

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "bevnet/random.hpp"
#include "bevnet/tensor.hpp"

namespace testutil {

// Relative error with a floor so near-zero gradients compare absolutely.
inline double rel_err(double a, double b, double floor = 1e-3) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Checks d(loss)/d(param) for every listed parameter against central finite
// differences. loss_fn must rebuild the graph from the live parameter tensors
// on each call; parameters are perturbed in place for the difference quotient.
inline void expect_grads_match(
    std::vector<bevnet::Tensor<double>*> params,
    const std::function<bevnet::Tensor<double>()>& loss_fn, double tol,
    const char* label, double h = 1e-5) {
  using bevnet::Tape;
  using bevnet::TapeScope;
  using bevnet::Tensor;

  for (auto* p : params) {
    p->set_requires_grad(true);
    p->zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = loss_fn();
    ASSERT_EQ(loss.numel(), 1u) << label;
    tape.backward(loss);
  }
  for (auto* p : params) analytic.push_back(p->grad());

  // No active tape here, so these evaluations are forward-only.
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& data = params[pi]->vec();
    for (size_t i = 0; i < data.size(); ++i) {
      double saved = data[i];
      data[i] = saved + h;
      double fp = loss_fn().item();
      data[i] = saved - h;
      double fm = loss_fn().item();
      data[i] = saved;
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic[pi][i];
      EXPECT_LT(rel_err(an, fd), tol)
          << label << ": param " << pi << " elem " << i << " analytic=" << an
          << " fd=" << fd;
    }
  }
  for (auto* p : params) p->zero_grad();
}

inline bevnet::Tensor<double> random_tensor(bevnet::Rng& rng,
                                            bevnet::Shape shape, double lo,
                                            double hi) {
  size_t n = bevnet::shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return bevnet::Tensor<double>(std::move(shape), std::move(v));
}

// Uniform magnitudes in [0.2, 1.2] with random sign; keeps values away from
// the relu/abs kinks so finite differences stay clean.
inline bevnet::Tensor<double> random_signed_tensor(bevnet::Rng& rng,
                                                   bevnet::Shape shape) {
  size_t n = bevnet::shape_numel(shape);
  std::vector<double> v(n);
  for (auto& x : v)
    x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.2);
  return bevnet::Tensor<double>(std::move(shape), std::move(v));
}

}  // namespace testutil
