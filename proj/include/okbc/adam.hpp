#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "okbc/tensor.hpp"

namespace okbc {

template <class T>
using NamedParams = std::vector<std::pair<std::string, TensorT<T>>>;

// Bias-corrected Adam. Moment buffers are congruent with their parameters and
// the step counter advances by one per update.
template <class T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<std::vector<T>> m, v;

  AdamState() = default;
  AdamState(const NamedParams<T>& params, double learning_rate) : lr(learning_rate) {
    m.reserve(params.size());
    v.reserve(params.size());
    for (const auto& [name, p] : params) {
      (void)name;
      m.emplace_back(p.numel(), T(0));
      v.emplace_back(p.numel(), T(0));
    }
  }

  void step(NamedParams<T>& params) {
    if (params.size() != m.size())
      throw std::runtime_error("adam: parameter list changed size");
    ++step_count;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t pi = 0; pi < params.size(); ++pi) {
      auto& [name, p] = params[pi];
      if (!p.grad) continue;
      T* pv = p.ptr();
      const T* g = p.grad->data();
      std::vector<T>& mi = m[pi];
      std::vector<T>& vi = v[pi];
      size_t n = p.numel();
      for (size_t i = 0; i < n; ++i) {
        double gi = g[i];
        if (!std::isfinite(gi))
          throw std::runtime_error("adam: non-finite gradient in parameter '" + name + "'");
        double mh = (mi[i] = static_cast<T>(beta1 * mi[i] + (1.0 - beta1) * gi)) / bc1;
        double vh = (vi[i] = static_cast<T>(beta2 * vi[i] + (1.0 - beta2) * gi * gi)) / bc2;
        pv[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps));
      }
    }
  }
};

}  // namespace okbc
