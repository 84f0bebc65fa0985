#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "mtl/autodiff.hpp"
#include "mtl/error.hpp"
#include "mtl/model.hpp"

namespace mtl {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ValueError("adam: lr must be positive");
    if (!(eps > 0.0)) throw ValueError("adam: eps must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValueError("adam: beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValueError("adam: beta2 must lie in [0, 1)");
  }

  friend bool operator==(const AdamConfig&, const AdamConfig&) = default;
};

// Moments for one set of parameters with its own step counter.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::map<ParamId, Tensor> m;
  std::map<ParamId, Tensor> v;

  friend bool bit_identical(const AdamState& a, const AdamState& b) {
    if (!(a.config == b.config) || a.step != b.step || a.m.size() != b.m.size() || a.v.size() != b.v.size()) {
      return false;
    }
    for (const auto& [id, t] : a.m) {
      auto it = b.m.find(id);
      if (it == b.m.end() || !mtl::bit_identical(t, it->second)) return false;
    }
    for (const auto& [id, t] : a.v) {
      auto it = b.v.find(id);
      if (it == b.v.end() || !mtl::bit_identical(t, it->second)) return false;
    }
    return true;
  }
};

inline AdamState adam_init(const ParamStore& store, const std::vector<ParamId>& params, AdamConfig config = {}) {
  config.validate();
  AdamState state;
  state.config = config;
  for (auto id : params) {
    state.m.emplace(id, Tensor(store.value(id).shape(), 0.0));
    state.v.emplace(id, Tensor(store.value(id).shape(), 0.0));
  }
  return state;
}

// One Adam update over the parameters of `state` that appear in `grads`.
// Parameters absent from `grads` keep their values and moments; the step
// counter advances only when at least one parameter is touched.
inline void adam_step(AdamState& state, ParamStore& store, const GradMap& grads) {
  for (const auto& [id, g] : grads) {
    auto it = state.m.find(id);
    if (it == state.m.end()) {
      throw ValueError("adam_step: gradient for parameter " + std::to_string(id.value) + " outside this state");
    }
    if (g.shape() != it->second.shape()) {
      throw ShapeError("adam_step: gradient " + shape_string(g.shape()) + " does not match parameter " +
                       shape_string(it->second.shape()));
    }
  }
  if (grads.empty()) return;

  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(c.beta1, t);
  const double bias2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& [id, g] : grads) {
    auto m = state.m.at(id).data();
    auto v = state.v.at(id).data();
    auto theta = store.mutable_data(id);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      theta[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

}  // namespace mtl
