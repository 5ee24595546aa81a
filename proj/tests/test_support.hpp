#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "restnet/ops.hpp"
#include "restnet/rng.hpp"

namespace restnet::testing {

using T = Tensor<double>;

inline T random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  Buffer<double> d(numel(shape));
  for (Index i = 0; i < d.size(); ++i) d[i] = rng.uniform(lo, hi);
  return T(std::move(shape), std::move(d), requires_grad);
}

inline double max_abs_diff(const Buffer<double>& a, const Buffer<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  return a.size() == 0 ? 0.0 : (a - b).abs().maxCoeff();
}

// Largest relative error between the tape gradient and central differences
// of f over every coordinate of every input.
inline double fd_gradient_error(const std::function<T(const std::vector<T>&)>& f, std::vector<T> inputs,
                                double step = 1e-5) {
  for (auto& x : inputs) x.set_requires_grad(true);
  f(inputs).backward();
  double worst = 0;
  for (auto& x : inputs) {
    const Buffer<double> analytic = x.has_grad() ? x.grad() : Buffer<double>::Zero(x.size());
    for (Index i = 0; i < x.size(); ++i) {
      const double saved = x.data()[i];
      x.mutable_data()[i] = saved + step;
      const double plus = f(inputs).item();
      x.mutable_data()[i] = saved - step;
      const double minus = f(inputs).item();
      x.mutable_data()[i] = saved;
      const double numeric = (plus - minus) / (2 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
  }
  return worst;
}

// Fixed random projection so a tensor-valued op becomes a scalar loss.
inline T project(const T& y, std::uint64_t seed = 99) {
  Rng rng(seed);
  return sum(mul(y, random_tensor(y.shape(), rng)));
}

}  // namespace restnet::testing
