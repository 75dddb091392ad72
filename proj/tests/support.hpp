#pragma once

#include <cmath>
#include <cstdint>

#include "fd2/fd2.hpp"

namespace fd2::testing {

template <Scalar T = double>
Tensor<T> uniform(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return random_uniform<T>(s, rng, lo, hi);
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  long double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(acc);
}

inline Tensor<double> axpby(double a, const Tensor<double>& x, double b, const Tensor<double>& y) {
  Tensor<double> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
  return out;
}

inline double max_abs(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace fd2::testing
