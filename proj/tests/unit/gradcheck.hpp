#pragma once

// Central finite-difference oracle, independent of the backward closures.

#include <cmath>
#include <algorithm>
#include <functional>
#include <random>
#include <vector>

#include "owt/ops.hpp"
#include "owt/tensor.hpp"

namespace owt::testing {

struct GradCheckResult {
  double relative_error = 0;
  double analytic_norm = 0;
  double numeric_norm = 0;
};

// Compares backward() against (f(x+h) - f(x-h)) / 2h for every element of
// every leaf. The loss closure must rebuild the graph from the leaves.
template <typename T>
GradCheckResult gradcheck(std::vector<BasicTensor<T>> leaves,
                          const std::function<BasicTensor<T>()>& loss, double step) {
  for (auto& leaf : leaves) leaf.zero_grad();
  loss().backward();

  double diff2 = 0, a2 = 0, n2 = 0;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T saved = values[i];
      double plus, minus;
      {
        NoGradGuard guard;
        values[i] = static_cast<T>(saved + step);
        plus = static_cast<double>(loss().item());
        values[i] = static_cast<T>(saved - step);
        minus = static_cast<double>(loss().item());
      }
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * step);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
  }
  GradCheckResult r;
  r.analytic_norm = std::sqrt(a2);
  r.numeric_norm = std::sqrt(n2);
  r.relative_error = std::sqrt(diff2) / std::max({r.analytic_norm, r.numeric_norm, 1e-12});
  return r;
}

template <typename T>
BasicTensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0, bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return BasicTensor<T>::from_data(std::move(shape), std::move(v), requires_grad);
}

// Random fixed weights turn any tensor into a scalar with informative gradients.
template <typename T>
BasicTensor<T> weighted_sum(const BasicTensor<T>& x, std::uint64_t seed) {
  return sum(mul(x, random_tensor<T>(x.shape(), seed, 1.0, false)));
}

}  // namespace owt::testing
