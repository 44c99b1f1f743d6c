#pragma once

// Central finite differences for gradient verification. Everything runs in
// double; callers re-evaluate their forward pass through the supplied
// closure while one parameter slot is perturbed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vigilnet/tensor.hpp"

namespace fdcheck {

template <typename F>
double numeric_grad(F&& eval, double& slot, double eps = 1e-5) {
  double keep = slot;
  slot = keep + eps;
  double up = eval();
  slot = keep - eps;
  double dn = eval();
  slot = keep;
  return (up - dn) / (2.0 * eps);
}

struct GradStats {
  double max_abs = 0.0;
  double max_rel = 0.0;
  int checked = 0;

  void update(double analytic, double numeric) {
    double err = std::abs(analytic - numeric);
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    max_abs = std::max(max_abs, err);
    max_rel = std::max(max_rel, err / denom);
    ++checked;
  }
};

// Compares analytic gradients of `param` against finite differences of
// `eval` at the given flat indices (empty = every element).
template <typename F>
GradStats check_tensor_grad(F&& eval, vigilnet::Tensor64& param,
                            const vigilnet::Tensor64& analytic,
                            std::vector<std::int64_t> indices = {},
                            double eps = 1e-5) {
  GradStats stats;
  if (indices.empty()) {
    indices.resize(static_cast<std::size_t>(param.size()));
    for (std::int64_t i = 0; i < param.size(); ++i) {
      indices[static_cast<std::size_t>(i)] = i;
    }
  }
  for (std::int64_t i : indices) {
    double numeric = numeric_grad(eval, param[i], eps);
    stats.update(analytic[i], numeric);
  }
  return stats;
}

// Deterministic stride-based subsample of [0, size) with at most `max_count`
// entries, for large tensors.
inline std::vector<std::int64_t> sample_indices(std::int64_t size,
                                                std::int64_t max_count) {
  std::vector<std::int64_t> out;
  std::int64_t step = std::max<std::int64_t>(1, size / max_count);
  for (std::int64_t i = 0; i < size; i += step) out.push_back(i);
  return out;
}

}  // namespace fdcheck
