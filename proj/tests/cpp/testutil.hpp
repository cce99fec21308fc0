#pragma once

#include <functional>
#include <random>

#include "factorizer/ops.hpp"

namespace factorizer::testutil {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (double& v : t.mutable_data()) v = dist(rng);
  return t;
}

inline Tensor<float> random_tensor_f(Shape shape, std::mt19937_64& rng, float lo = -1.0f,
                                     float hi = 1.0f) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor<float> t(std::move(shape));
  for (float& v : t.mutable_data()) v = dist(rng);
  return t;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0.0;
  auto pa = a.data();
  auto pb = b.data();
  for (size_t i = 0; i < pa.size(); ++i) m = std::max(m, std::abs(pa[i] - pb[i]));
  return m;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  auto pa = a.data();
  auto pb = b.data();
  for (size_t i = 0; i < pa.size(); ++i)
    if (std::memcmp(&pa[i], &pb[i], sizeof(T)) != 0) return false;
  return true;
}

/// Central finite-difference check of d f(x) / dx against the recorded
/// gradient. Returns max |analytic - numeric| / (max magnitude + tiny).
inline double grad_check(const Tensor<double>& x0,
                         const std::function<Var<double>(const Var<double>&)>& f,
                         double h = 1e-5) {
  Var<double> x(x0, true);
  Var<double> y = f(x);
  y.backward();
  Tensor<double> analytic = x.grad().clone();

  Tensor<double> numeric(x0.shape());
  auto pn = numeric.mutable_data();
  for (int64_t i = 0; i < x0.numel(); ++i) {
    NoGradGuard ng;
    Tensor<double> xp = x0.clone();
    xp.mutable_data()[i] += h;
    Tensor<double> xm = x0.clone();
    xm.mutable_data()[i] -= h;
    const double fp = f(Var<double>(xp)).value().item();
    const double fm = f(Var<double>(xm)).value().item();
    pn[i] = (fp - fm) / (2.0 * h);
  }
  double scale = 0.0;
  for (int64_t i = 0; i < x0.numel(); ++i)
    scale = std::max({scale, std::abs(analytic.data()[i]), std::abs(pn[i])});
  double err = 0.0;
  for (int64_t i = 0; i < x0.numel(); ++i)
    err = std::max(err, std::abs(analytic.data()[i] - pn[i]));
  return err / (scale + 1e-12);
}

}  // namespace factorizer::testutil
