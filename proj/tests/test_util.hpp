#pragma once

#include <random>
#include <vector>

#include "dvc3/nn.hpp"

namespace dvc3::testing {

inline Tensor<double> random_tensor(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return normal_init<double>(r, c, scale, rng);
}

inline Parameter<double> random_param(const std::string& name, std::size_t r, std::size_t c, std::uint64_t seed,
                                      double scale = 1.0) {
  return Parameter<double>(name, random_tensor(r, c, seed, scale));
}

// Projects an arbitrary tensor output to a scalar with fixed random weights so
// every output element carries gradient.
inline Var<double> probe_sum(const Var<double>& y, std::uint64_t seed = 99) {
  if (y.value().rank() == 0) return y;
  auto w = random_tensor(y.rows(), y.cols(), seed);
  return ops::sum(ops::mul(y, constant(w)));
}

}  // namespace dvc3::testing
