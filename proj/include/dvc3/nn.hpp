#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc3/autograd.hpp"
#include "dvc3/ops.hpp"
#include "dvc3/tensor.hpp"

namespace dvc3 {

using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Quiet softmax

// Softmax with an extra unit in the denominator. `allowed` (optional) marks the
// visible entries; hidden entries get 0. An all-hidden row is all zeros.
template <typename T>
std::vector<T> quiet_softmax(std::span<const T> logits, std::span<const std::uint8_t> allowed = {}) {
  if (!allowed.empty() && allowed.size() != logits.size()) {
    throw std::invalid_argument("quiet_softmax: mask length differs from logits");
  }
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if ((allowed.empty() || allowed[i]) && !std::isfinite(logits[i])) {
      throw std::domain_error("quiet_softmax: non-finite logit at " + std::to_string(i));
    }
  }
  std::vector<T> out(logits.size());
  ops::quiet_normalize_row(logits.data(), allowed.empty() ? nullptr : allowed.data(), logits.size(),
                           out.data());
  return out;
}

// ---------------------------------------------------------------------------
// Gumbel-Softmax

struct GumbelConfig {
  double temperature = 1.0;
  bool hard = true;
  std::uint64_t rng_seed = 0;
};

template <typename T>
Tensor<T> sample_gumbel_noise(std::size_t rows, std::size_t cols, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor<T> g(rows, cols);
  for (auto& v : g.values()) {
    double x = u(rng);
    x = std::clamp(x, 1e-12, 1.0 - 1e-12);
    v = static_cast<T>(-std::log(-std::log(x)));
  }
  return g;
}

template <typename T>
struct GumbelSample {
  Var<T> output;                     // one-hot (hard) or soft rows; flows downstream
  Tensor<T> soft;                    // relaxed distribution softmax((logits + g) / tau)
  std::vector<std::size_t> indices;  // sampled index per row
};

// Gumbel-Softmax with externally supplied noise. With hard=true the forward
// value is the one-hot of the sampled index and the backward pass uses the
// soft distribution (straight-through).
template <typename T>
GumbelSample<T> gumbel_softmax(const Var<T>& logits, const Tensor<T>& noise, double temperature, bool hard) {
  if (!(temperature > 0.0)) throw std::invalid_argument("gumbel_softmax: temperature must be > 0");
  const auto& L = logits.value();
  if (L.cols() < 2) throw std::invalid_argument("gumbel_softmax: need at least two classes");
  L.check_same(noise, "gumbel_softmax noise");
  const std::size_t n = L.rows(), c = L.cols();
  const T inv_tau = static_cast<T>(1.0 / temperature);
  Tensor<T> soft(n, c);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    T m = -std::numeric_limits<T>::infinity();
    std::size_t arg = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const T z = (L(i, j) + noise(i, j)) * inv_tau;
      soft(i, j) = z;
      if (z > m) {
        m = z;
        arg = j;
      }
    }
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      soft(i, j) = std::exp(soft(i, j) - m);
      s += soft(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) soft(i, j) /= s;
    idx[i] = arg;
  }
  Tensor<T> fwd = soft;
  if (hard) {
    fwd.fill(T(0));
    for (std::size_t i = 0; i < n; ++i) fwd(i, idx[i]) = T(1);
  }
  Var<T> out = make_result<T>(std::move(fwd), {logits}, [soft, inv_tau](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    for (std::size_t i = 0; i < soft.rows(); ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < soft.cols(); ++j) dot += soft(i, j) * self.grad(i, j);
      for (std::size_t j = 0; j < soft.cols(); ++j)
        g(i, j) += inv_tau * soft(i, j) * (self.grad(i, j) - dot);
    }
  });
  return {std::move(out), std::move(soft), std::move(idx)};
}

template <typename T>
GumbelSample<T> gumbel_softmax(const Var<T>& logits, const GumbelConfig& cfg) {
  Rng rng(cfg.rng_seed);
  auto noise = sample_gumbel_noise<T>(logits.rows(), logits.cols(), rng);
  return gumbel_softmax(logits, noise, cfg.temperature, cfg.hard);
}

// Linear temperature schedule from `start` to `end` over `total` steps.
inline double gumbel_temperature(std::size_t step, std::size_t total, double start = 2.0, double end = 0.5) {
  if (total == 0) return end;
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return start + (end - start) * f;
}

// ---------------------------------------------------------------------------
// Losses (scalar Vars)

// Mean over rows of -log softmax(row)[target]. Targets are 0-based class ids.
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const std::vector<std::size_t>& targets) {
  const auto& L = logits.value();
  const std::size_t n = L.rows(), c = L.cols();
  if (targets.size() != n) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(n) + " rows");
  }
  if (n == 0) throw std::invalid_argument("cross_entropy: empty input");
  Tensor<T> probs(n, c);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= c) throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    const T* r = L.row(i);
    const T m = *std::max_element(r, r + c);
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      probs(i, j) = std::exp(r[j] - m);
      s += probs(i, j);
    }
    for (std::size_t j = 0; j < c; ++j) probs(i, j) /= s;
    total += -(r[targets[i]] - m - std::log(s));
  }
  return make_result<T>(Tensor<T>::scalar(total / T(n)), {logits}, [probs, targets](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    const T k = self.grad[0] / T(probs.rows());
    for (std::size_t i = 0; i < probs.rows(); ++i) {
      for (std::size_t j = 0; j < probs.cols(); ++j) g(i, j) += k * probs(i, j);
      g(i, targets[i]) -= k;
    }
  });
}

template <typename T>
Var<T> mse(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "mse");
  const std::size_t n = a.value().size();
  if (n == 0) throw std::invalid_argument("mse: empty input");
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = a.value()[i] - b.value()[i];
    s += d * d;
  }
  return make_result<T>(Tensor<T>::scalar(s / T(n)), {a, b}, [n](Node<T>& self) {
    Node<T>* pa = self.parent(0);
    Node<T>* pb = self.parent(1);
    const T k = T(2) * self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T d = k * (pa->value()[i] - pb->value()[i]);
      if (pa->requires_grad) pa->ensure_grad()[i] += d;
      if (pb->requires_grad) pb->ensure_grad()[i] -= d;
    }
  });
}

// Mean absolute difference.
template <typename T>
Var<T> l1_loss(const Var<T>& a, const Var<T>& b) {
  a.value().check_same(b.value(), "l1_loss");
  const std::size_t n = a.value().size();
  if (n == 0) throw std::invalid_argument("l1_loss: empty input");
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(a.value()[i] - b.value()[i]);
  return make_result<T>(Tensor<T>::scalar(s / T(n)), {a, b}, [n](Node<T>& self) {
    Node<T>* pa = self.parent(0);
    Node<T>* pb = self.parent(1);
    const T k = self.grad[0] / T(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T diff = pa->value()[i] - pb->value()[i];
      const T d = diff > 0 ? k : (diff < 0 ? -k : T(0));
      if (pa->requires_grad) pa->ensure_grad()[i] += d;
      if (pb->requires_grad) pb->ensure_grad()[i] -= d;
    }
  });
}

// InfoNCE over a score matrix: row i is classified among the columns listed
// in candidates[i], whose first element is the positive.
template <typename T>
Var<T> contrastive_nll(const Var<T>& scores, const std::vector<std::vector<std::size_t>>& candidates) {
  const auto& S = scores.value();
  if (candidates.size() != S.rows()) throw std::invalid_argument("contrastive_nll: row count mismatch");
  if (candidates.empty()) throw std::invalid_argument("contrastive_nll: empty input");
  std::vector<std::vector<T>> probs(candidates.size());
  T total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto& cand = candidates[i];
    if (cand.empty()) throw std::invalid_argument("contrastive_nll: row without candidates");
    T m = -std::numeric_limits<T>::infinity();
    for (auto j : cand) m = std::max(m, S(i, j));
    T s = 0;
    probs[i].resize(cand.size());
    for (std::size_t k = 0; k < cand.size(); ++k) {
      probs[i][k] = std::exp(S(i, cand[k]) - m);
      s += probs[i][k];
    }
    for (auto& p : probs[i]) p /= s;
    total += -(S(i, cand[0]) - m - std::log(s));
  }
  const T n = T(candidates.size());
  return make_result<T>(Tensor<T>::scalar(total / n), {scores},
                        [probs = std::move(probs), candidates, n](Node<T>& self) {
                          auto& g = self.parent(0)->ensure_grad();
                          const T k = self.grad[0] / n;
                          for (std::size_t i = 0; i < candidates.size(); ++i) {
                            for (std::size_t c = 0; c < candidates[i].size(); ++c)
                              g(i, candidates[i][c]) += k * probs[i][c];
                            g(i, candidates[i][0]) -= k;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Parameter initialisation and small modules

template <typename T>
Tensor<T> uniform_init(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> t(rows, cols);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
Tensor<T> normal_init(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> d(0.0, stddev);
  Tensor<T> t(rows, cols);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
Tensor<T> xavier_init(std::size_t in, std::size_t out, Rng& rng) {
  return uniform_init<T>(in, out, std::sqrt(6.0 / static_cast<double>(in + out)), rng);
}

template <typename T>
struct Linear {
  Parameter<T> w;
  Parameter<T> b;
  bool has_bias = true;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias = true)
      : w(name + ".w", xavier_init<T>(in, out, rng)), b(name + ".b", Tensor<T>(1, bias ? out : 0)), has_bias(bias) {}

  Var<T> operator()(const Var<T>& x) const {
    if (has_bias) return ops::linear(x, leaf(w), leaf(b));
    return ops::matmul(x, leaf(w));
  }

  std::size_t in() const { return w.value.rows(); }
  std::size_t out() const { return w.value.cols(); }

  template <typename F>
  void visit(F&& f) {
    f(w);
    if (has_bias) f(b);
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T> gamma;
  Parameter<T> beta;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim)
      : gamma(name + ".gamma", Tensor<T>(1, dim, T(1))), beta(name + ".beta", Tensor<T>(1, dim)) {}

  Var<T> operator()(const Var<T>& x) const { return ops::layer_norm(x, leaf(gamma), leaf(beta)); }

  template <typename F>
  void visit(F&& f) {
    f(gamma);
    f(beta);
  }
};

template <typename T>
struct RmsNorm {
  Parameter<T> gamma;

  RmsNorm() = default;
  RmsNorm(const std::string& name, std::size_t dim) : gamma(name + ".gamma", Tensor<T>(1, dim, T(1))) {}

  Var<T> operator()(const Var<T>& x) const { return ops::rms_norm(x, leaf(gamma)); }

  template <typename F>
  void visit(F&& f) {
    f(gamma);
  }
};

template <typename T>
std::size_t count_parameters(std::span<Parameter<T>* const> params) {
  std::size_t n = 0;
  for (auto* p : params) n += p->value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // One bias-corrected update of every parameter; gradients are zeroed after.
  void step(std::span<Parameter<T>* const> params) {
    for (auto* p : params) {
      if (!p->grad.all_finite()) throw std::domain_error("adam_step: non-finite gradient in " + p->name);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto* p : params) {
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        const double m = cfg_.beta1 * p->m[i] + (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * p->v[i] + (1.0 - cfg_.beta2) * g * g;
        p->m[i] = static_cast<T>(m);
        p->v[i] = static_cast<T>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        p->value[i] = static_cast<T>(p->value[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
      p->zero_grad();
    }
  }

  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  AdamConfig& config() { return cfg_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckGroup {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;

  double max_rel_error() const {
    double m = 0.0;
    for (const auto& g : groups) m = std::max(m, g.max_rel_error);
    return m;
  }
  bool passed(double tolerance) const { return max_rel_error() < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  // 0 checks every element; otherwise an evenly spaced subset per parameter.
  std::size_t max_elements_per_param = 0;
};

// Central differences against backprop. `forward` must rebuild the graph and
// return the scalar loss deterministically (any sampling noise frozen).
inline GradCheckReport grad_check(const std::function<Var<double>()>& forward,
                                  const std::vector<Parameter<double>*>& params,
                                  GradCheckOptions opts = {}) {
  for (auto* p : params) p->zero_grad();
  {
    Var<double> loss = forward();
    backward(loss);
  }
  GradCheckReport report;
  for (auto* p : params) {
    GradCheckGroup g{p->name};
    const std::size_t n = p->value.size();
    const std::size_t stride =
        (opts.max_elements_per_param == 0 || n <= opts.max_elements_per_param) ? 1 : n / opts.max_elements_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = p->value[i];
      double plus, minus;
      {
        NoGradGuard ng;
        p->value[i] = orig + opts.step;
        plus = forward().item();
        p->value[i] = orig - opts.step;
        minus = forward().item();
      }
      p->value[i] = orig;
      const double numeric = (plus - minus) / (2.0 * opts.step);
      const double analytic = p->grad[i];
      const double abs_err = std::abs(numeric - analytic);
      const double denom = std::max({std::abs(numeric), std::abs(analytic), opts.floor});
      g.max_abs_error = std::max(g.max_abs_error, abs_err);
      g.max_rel_error = std::max(g.max_rel_error, abs_err / denom);
      ++g.checked;
    }
    report.groups.push_back(std::move(g));
  }
  for (auto* p : params) p->zero_grad();
  return report;
}

}  // namespace dvc3
