#pragma once

// Shared helpers for the test suites: seeded tensors, comparisons and a
// central finite-difference gradient probe that is independent of the
// autodiff path it checks.

#include <cmath>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include "idportrait/ops.hpp"
#include "idportrait/rng.hpp"

namespace idportrait::testing {

inline Tensor random_tensor(Shape shape, uint64_t seed, double scale = 1.0, bool requires_grad = false) {
  Rng rng(seed);
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (std::memcmp(&a.data()[static_cast<size_t>(i)], &b.data()[static_cast<size_t>(i)], sizeof(double)) != 0)
      return false;
  return true;
}

struct GradSample {
  double analytic = 0.0;
  double numeric = 0.0;

  double rel_error() const {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
    return std::abs(analytic - numeric) / denom;
  }
};

/// Central difference of loss() w.r.t. param[idx], plus the autodiff value.
/// loss() must rebuild its graph from the current parameter values.
inline GradSample probe_gradient(Tensor param, int64_t idx, const std::function<Tensor()>& loss, double h = 1e-4) {
  GradSample s;
  param.zero_grad();
  loss().backward();
  s.analytic = param.has_grad() ? param.grad()[static_cast<size_t>(idx)] : 0.0;
  param.zero_grad();
  NoGradGuard ng;
  auto data = param.mutable_data();
  const double orig = data[static_cast<size_t>(idx)];
  data[static_cast<size_t>(idx)] = orig + h;
  const double up = loss().item();
  data[static_cast<size_t>(idx)] = orig - h;
  const double down = loss().item();
  data[static_cast<size_t>(idx)] = orig;
  s.numeric = (up - down) / (2.0 * h);
  return s;
}

}  // namespace idportrait::testing
