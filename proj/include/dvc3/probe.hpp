#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "dvc3/nn.hpp"

namespace dvc3 {

struct ProbeOptions {
  double train_fraction = 0.7;
  std::size_t steps = 300;
  double learning_rate = 0.05;
  std::uint64_t seed = 7;
};

struct ProbeResult {
  double train_accuracy = 0;
  double test_accuracy = 0;
  std::size_t train_size = 0, test_size = 0;
};

// Multinomial logistic regression on standardised features, full-batch Adam,
// scored on a held-out split.
inline ProbeResult linear_probe(const Tensor<double>& x, const std::vector<std::size_t>& labels,
                                std::size_t classes, ProbeOptions opts = {}) {
  const std::size_t n = x.rows(), d = x.cols();
  if (labels.size() != n || n < 2) throw std::invalid_argument("linear_probe: need matching rows and labels");
  for (auto l : labels)
    if (l >= classes) throw std::out_of_range("linear_probe: label out of range");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(opts.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t ntr = std::clamp<std::size_t>(std::size_t(opts.train_fraction * double(n)), 1, n - 1);

  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < ntr; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(order[i], j) / double(ntr);
  for (std::size_t i = 0; i < ntr; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(x(order[i], j) - mean[j], 2) / double(ntr);
  for (auto& s : sd) s = s > 1e-12 ? std::sqrt(s) : 1.0;

  auto gather = [&](std::size_t b, std::size_t e, std::vector<std::size_t>& y) {
    Tensor<double> out(e - b, d);
    for (std::size_t i = b; i < e; ++i) {
      for (std::size_t j = 0; j < d; ++j) out(i - b, j) = (x(order[i], j) - mean[j]) / sd[j];
      y.push_back(labels[order[i]]);
    }
    return out;
  };
  std::vector<std::size_t> ytr, yte;
  Tensor<double> xtr = gather(0, ntr, ytr), xte = gather(ntr, n, yte);

  Linear<double> layer("probe", d, classes, rng);
  std::vector<Parameter<double>*> ps{&layer.w, &layer.b};
  AdamConfig ac;
  ac.lr = opts.learning_rate;
  Adam<double> opt(ac);
  Var<double> in = constant(xtr);
  for (std::size_t s = 0; s < opts.steps; ++s) {
    backward(cross_entropy(layer(in), ytr));
    opt.step(ps);
  }
  auto accuracy = [&](const Tensor<double>& xs, const std::vector<std::size_t>& ys) {
    NoGradGuard ng;
    auto logits = layer(constant(xs)).value();
    std::size_t hit = 0;
    for (std::size_t i = 0; i < xs.rows(); ++i) {
      const double* r = logits.row(i);
      hit += std::size_t(std::max_element(r, r + classes) - r) == ys[i];
    }
    return double(hit) / double(xs.rows());
  };
  return {accuracy(xtr, ytr), accuracy(xte, yte), ntr, n - ntr};
}

}  // namespace dvc3
