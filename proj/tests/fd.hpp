#pragma once

// Central finite differences against reverse mode, 64-bit.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "osfa/tensor.hpp"

namespace osfa::testing {

using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

inline Tensor<double> random_param(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::parameter(std::move(shape), std::move(v));
}

/// Max relative error over every input entry; f must return a scalar.
inline double max_fd_error(const Fn& f, std::vector<Tensor<double>> inputs, double h = 1e-5) {
  const GradMap<double> grads = backward(f(inputs));
  double worst = 0;
  for (auto& in : inputs) {
    const Tensor<double>* g = grads.find(in);
    auto v = in.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      double up = 0, down = 0;
      {
        NoGradGuard ng;
        v[i] = saved + h;
        up = f(inputs).item();
        v[i] = saved - h;
        down = f(inputs).item();
      }
      v[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = g != nullptr ? g->data()[i] : 0.0;
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace osfa::testing
