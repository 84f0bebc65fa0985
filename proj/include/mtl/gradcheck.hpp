#pragma once

#include <functional>

#include "mtl/error.hpp"
#include "mtl/tensor.hpp"

namespace mtl {

// Central-difference gradient of a scalar function: (f(p+h·eᵢ) − f(p−h·eᵢ)) / 2h.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& p, double h) {
  if (!(h > 0.0)) throw ValueError("finite_diff_grad: step must be positive");
  Tensor grad(p.shape());
  Tensor probe = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double original = probe[i];
    probe[i] = original + h;
    const double up = f(probe);
    probe[i] = original - h;
    const double down = f(probe);
    probe[i] = original;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

}  // namespace mtl
