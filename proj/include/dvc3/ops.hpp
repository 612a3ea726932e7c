#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "dvc3/autograd.hpp"

// Differentiable building blocks. Every op takes and returns Var<T>; all
// are 2-D (rows = time, cols = features) unless stated.
namespace dvc3::ops {

namespace detail {

template <typename T>
void check_same(const Var<T>& a, const Var<T>& b, const char* what) {
  a.value().check_same(b.value(), what);
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "add");
  Tensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    for (int k = 0; k < 2; ++k) {
      Node<T>* p = self.parent(k);
      if (p->requires_grad) p->ensure_grad() += self.grad;
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    if (self.parent(0)->requires_grad) self.parent(0)->ensure_grad() += self.grad;
    if (Node<T>* p = self.parent(1); p->requires_grad) {
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::check_same(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>* pa = self.parent(0);
    Node<T>* pb = self.parent(1);
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value()[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value()[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= s;
  return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  });
}

// y = x W + b, with W stored in x out.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const auto& X = x.value();
  const auto& W = w.value();
  if (X.cols() != W.rows()) {
    throw std::invalid_argument("linear: input " + X.shape_string() + " vs weight " +
                                W.shape_string());
  }
  Tensor<T> out = raw::matmul(X, W);
  const auto& B = b.value();
  for (std::size_t i = 0; i < out.rows(); ++i) {
    T* r = out.row(i);
    for (std::size_t j = 0; j < out.cols(); ++j) r[j] += B[j];
  }
  return make_result<T>(std::move(out), {x, w, b}, [](Node<T>& self) {
    Node<T>* px = self.parent(0);
    Node<T>* pw = self.parent(1);
    Node<T>* pb = self.parent(2);
    if (px->requires_grad) raw::matmul_nt_acc(self.grad, pw->value(), px->ensure_grad());
    if (pw->requires_grad) raw::matmul_tn_acc(px->value(), self.grad, pw->ensure_grad());
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.rows(); ++i) {
        const T* r = self.grad.row(i);
        for (std::size_t j = 0; j < self.grad.cols(); ++j) g[j] += r[j];
      }
    }
  });
}

// y = x W (no bias).
template <typename T>
Var<T> matmul(const Var<T>& x, const Var<T>& w) {
  Tensor<T> out = raw::matmul(x.value(), w.value());
  return make_result<T>(std::move(out), {x, w}, [](Node<T>& self) {
    Node<T>* px = self.parent(0);
    Node<T>* pw = self.parent(1);
    if (px->requires_grad) raw::matmul_nt_acc(self.grad, pw->value(), px->ensure_grad());
    if (pw->requires_grad) raw::matmul_tn_acc(px->value(), self.grad, pw->ensure_grad());
  });
}

// y = a b^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dims differ");
  Tensor<T> out(a.rows(), b.rows());
  raw::matmul_nt_acc(a.value(), b.value(), out);
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    Node<T>* pa = self.parent(0);
    Node<T>* pb = self.parent(1);
    if (pa->requires_grad) {
      auto g = raw::matmul(self.grad, pb->value());
      pa->ensure_grad() += g;
    }
    if (pb->requires_grad) raw::matmul_tn_acc(self.grad, pa->value(), pb->ensure_grad());
  });
}

template <typename T>
Var<T> swish(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v * detail::sigmoid(v);
  return make_result<T>(std::move(out), {x}, [](Node<T>& self) {
    Node<T>* p = self.parent(0);
    auto& g = p->ensure_grad();
    const auto& X = p->value();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = detail::sigmoid(X[i]);
      g[i] += self.grad[i] * (s + X[i] * s * (T(1) - s));
    }
  });
}

// Gated linear unit over the feature axis: first half * sigmoid(second half).
template <typename T>
Var<T> glu(const Var<T>& x) {
  const auto& X = x.value();
  if (X.cols() % 2 != 0) throw std::invalid_argument("glu: odd feature count");
  const std::size_t h = X.cols() / 2;
  Tensor<T> out(X.rows(), h);
  for (std::size_t i = 0; i < X.rows(); ++i) {
    const T* r = X.row(i);
    for (std::size_t j = 0; j < h; ++j) out(i, j) = r[j] * detail::sigmoid(r[j + h]);
  }
  return make_result<T>(std::move(out), {x}, [h](Node<T>& self) {
    Node<T>* p = self.parent(0);
    auto& g = p->ensure_grad();
    const auto& X = p->value();
    for (std::size_t i = 0; i < X.rows(); ++i) {
      const T* r = X.row(i);
      T* gr = g.row(i);
      for (std::size_t j = 0; j < h; ++j) {
        const T s = detail::sigmoid(r[j + h]);
        const T go = self.grad(i, j);
        gr[j] += go * s;
        gr[j + h] += go * r[j] * s * (T(1) - s);
      }
    }
  });
}

// Per-row layer normalization with affine gamma/beta (1 x C each).
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const auto& X = x.value();
  const std::size_t n = X.rows(), c = X.cols();
  Tensor<T> out(n, c);
  Tensor<T> xhat(n, c);
  std::vector<T> inv_std(n);
  const auto& G = gamma.value();
  const auto& B = beta.value();
  for (std::size_t i = 0; i < n; ++i) {
    const T* r = X.row(i);
    T mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += r[j];
    mean /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= T(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat(i, j) = (r[j] - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * G[j] + B[j];
    }
  }
  return make_result<T>(
      std::move(out), {x, gamma, beta},
      [xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
        Node<T>* px = self.parent(0);
        Node<T>* pg = self.parent(1);
        Node<T>* pb = self.parent(2);
        const std::size_t n = xhat.rows(), c = xhat.cols();
        const auto& G = pg->value();
        if (pg->requires_grad || pb->requires_grad) {
          auto& gg = pg->ensure_grad();
          auto& gb = pb->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) {
              gg[j] += self.grad(i, j) * xhat(i, j);
              gb[j] += self.grad(i, j);
            }
          }
        }
        if (px->requires_grad) {
          auto& gx = px->ensure_grad();
          for (std::size_t i = 0; i < n; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < c; ++j) {
              const T d = self.grad(i, j) * G[j];
              mean_d += d;
              mean_dx += d * xhat(i, j);
            }
            mean_d /= T(c);
            mean_dx /= T(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T d = self.grad(i, j) * G[j];
              gx(i, j) += inv_std[i] * (d - mean_d - xhat(i, j) * mean_dx);
            }
          }
        }
      });
}

// Per-row RMS normalization with gain (1 x C).
template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gamma, T eps = T(1e-6)) {
  const auto& X = x.value();
  const std::size_t n = X.rows(), c = X.cols();
  Tensor<T> out(n, c);
  std::vector<T> inv_rms(n);
  const auto& G = gamma.value();
  for (std::size_t i = 0; i < n; ++i) {
    const T* r = X.row(i);
    T ms = 0;
    for (std::size_t j = 0; j < c; ++j) ms += r[j] * r[j];
    inv_rms[i] = T(1) / std::sqrt(ms / T(c) + eps);
    for (std::size_t j = 0; j < c; ++j) out(i, j) = r[j] * inv_rms[i] * G[j];
  }
  return make_result<T>(std::move(out), {x, gamma}, [inv_rms = std::move(inv_rms)](Node<T>& self) {
    Node<T>* px = self.parent(0);
    Node<T>* pg = self.parent(1);
    const auto& X = px->value();
    const auto& G = pg->value();
    const std::size_t n = X.rows(), c = X.cols();
    if (pg->requires_grad) {
      auto& gg = pg->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) gg[j] += self.grad(i, j) * X(i, j) * inv_rms[i];
    }
    if (px->requires_grad) {
      auto& gx = px->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += self.grad(i, j) * G[j] * X(i, j);
        const T r3 = inv_rms[i] * inv_rms[i] * inv_rms[i];
        for (std::size_t j = 0; j < c; ++j) {
          gx(i, j) += self.grad(i, j) * G[j] * inv_rms[i] - X(i, j) * dot * r3 / T(c);
        }
      }
    }
  });
}

// Quiet ("softmax plus one") attention normalizer over the allowed entries of
// one score row; disallowed entries are left at zero.
//   p_i = exp(s_i - m) / (exp(-m) + sum_j exp(s_j - m))
// m is the largest allowed score clamped below at zero, which leaves the
// ratio unchanged while keeping exp(-m) <= 1.
template <typename T>
void quiet_normalize_row(const T* scores, const std::uint8_t* allowed, std::size_t n, T* out) {
  T m = 0;
  for (std::size_t j = 0; j < n; ++j)
    if (!allowed || allowed[j]) m = std::max(m, scores[j]);
  T denom = std::exp(-m);
  for (std::size_t j = 0; j < n; ++j) {
    if (!allowed || allowed[j]) {
      out[j] = std::exp(scores[j] - m);
      denom += out[j];
    } else {
      out[j] = 0;
    }
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= denom;
}

// Multi-head scaled dot-product attention with quiet normalization.
// q: Tq x D, k/v: Tk x D; `allowed` is a Tq x Tk row-major 0/1 matrix
// (empty = everything allowed). Returns Tq x D (heads concatenated).
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                 std::span<const std::uint8_t> allowed) {
  const auto& Q = q.value();
  const auto& K = k.value();
  const auto& V = v.value();
  const std::size_t tq = Q.rows(), tk = K.rows(), d = Q.cols();
  if (K.cols() != d || V.cols() != d || V.rows() != tk || heads == 0 || d % heads != 0) {
    throw std::invalid_argument("attention: inconsistent shapes " + Q.shape_string() + " " +
                                K.shape_string() + " " + V.shape_string());
  }
  if (!allowed.empty() && allowed.size() != tq * tk) {
    throw std::invalid_argument("attention: mask size mismatch");
  }
  const std::size_t dh = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(T(dh));
  // probs[h] is tq x tk
  std::vector<Tensor<T>> probs(heads, Tensor<T>(tq, tk));
  Tensor<T> out(tq, d);
  std::vector<T> scores(tk);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < tq; ++i) {
      const std::uint8_t* arow = allowed.empty() ? nullptr : allowed.data() + i * tk;
      const T* qi = Q.row(i) + off;
      for (std::size_t j = 0; j < tk; ++j) {
        if (arow && !arow[j]) {
          scores[j] = 0;
          continue;
        }
        const T* kj = K.row(j) + off;
        T s = 0;
        for (std::size_t p = 0; p < dh; ++p) s += qi[p] * kj[p];
        scores[j] = s * inv_sqrt;
      }
      T* pr = probs[h].row(i);
      quiet_normalize_row(scores.data(), arow, tk, pr);
      T* oi = out.row(i) + off;
      for (std::size_t j = 0; j < tk; ++j) {
        const T pj = pr[j];
        if (pj == T(0)) continue;
        const T* vj = V.row(j) + off;
        for (std::size_t p = 0; p < dh; ++p) oi[p] += pj * vj[p];
      }
    }
  }
  return make_result<T>(
      std::move(out), {q, k, v}, [probs = std::move(probs), heads, dh, inv_sqrt](Node<T>& self) {
        Node<T>* pq = self.parent(0);
        Node<T>* pk = self.parent(1);
        Node<T>* pv = self.parent(2);
        const auto& Q = pq->value();
        const auto& K = pk->value();
        const auto& V = pv->value();
        const std::size_t tq = Q.rows(), tk = K.rows();
        Tensor<T>* gq = pq->requires_grad ? &pq->ensure_grad() : nullptr;
        Tensor<T>* gk = pk->requires_grad ? &pk->ensure_grad() : nullptr;
        Tensor<T>* gv = pv->requires_grad ? &pv->ensure_grad() : nullptr;
        std::vector<T> dp(tk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * dh;
          const auto& P = probs[h];
          for (std::size_t i = 0; i < tq; ++i) {
            const T* go = self.grad.row(i) + off;
            const T* pr = P.row(i);
            T dot = 0;
            for (std::size_t j = 0; j < tk; ++j) {
              if (pr[j] == T(0)) {
                dp[j] = 0;
                continue;
              }
              const T* vj = V.row(j) + off;
              T s = 0;
              for (std::size_t p = 0; p < dh; ++p) s += go[p] * vj[p];
              dp[j] = s;
              dot += pr[j] * s;
              if (gv) {
                T* gvj = gv->row(j) + off;
                for (std::size_t p = 0; p < dh; ++p) gvj[p] += pr[j] * go[p];
              }
            }
            const T* qi = Q.row(i) + off;
            for (std::size_t j = 0; j < tk; ++j) {
              if (pr[j] == T(0)) continue;
              const T ds = pr[j] * (dp[j] - dot) * inv_sqrt;
              const T* kj = K.row(j) + off;
              if (gq) {
                T* gqi = gq->row(i) + off;
                for (std::size_t p = 0; p < dh; ++p) gqi[p] += ds * kj[p];
              }
              if (gk) {
                T* gkj = gk->row(j) + off;
                for (std::size_t p = 0; p < dh; ++p) gkj[p] += ds * qi[p];
              }
            }
          }
        }
      });
}

// Causal depthwise convolution along time.
//   y[t, c] = b[c] + sum_k w[k, c] * xp[t + k, c],  xp = [context; x]
// `context` supplies the (K - 1) frames preceding x (zeros for a fresh stream).
template <typename T>
Var<T> causal_depthwise_conv(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                             const Tensor<T>& context) {
  const auto& X = x.value();
  const auto& W = w.value();
  const std::size_t n = X.rows(), c = X.cols(), kw = W.rows();
  if (W.cols() != c || context.rows() != kw - 1 || (kw > 1 && context.cols() != c)) {
    throw std::invalid_argument("causal_depthwise_conv: shape mismatch");
  }
  auto at = [&](std::size_t padded_row) -> const T* {
    return padded_row < kw - 1 ? context.row(padded_row) : X.row(padded_row - (kw - 1));
  };
  Tensor<T> out(n, c);
  const auto& B = b.value();
  for (std::size_t t = 0; t < n; ++t) {
    T* o = out.row(t);
    for (std::size_t j = 0; j < c; ++j) o[j] = B[j];
    for (std::size_t k = 0; k < kw; ++k) {
      const T* xr = at(t + k);
      const T* wr = W.row(k);
      for (std::size_t j = 0; j < c; ++j) o[j] += wr[j] * xr[j];
    }
  }
  return make_result<T>(std::move(out), {x, w, b}, [context](Node<T>& self) {
    Node<T>* px = self.parent(0);
    Node<T>* pw = self.parent(1);
    Node<T>* pb = self.parent(2);
    const auto& X = px->value();
    const auto& W = pw->value();
    const std::size_t n = X.rows(), c = X.cols(), kw = W.rows();
    for (std::size_t t = 0; t < n; ++t) {
      const T* go = self.grad.row(t);
      if (pb->requires_grad) {
        auto& gb = pb->ensure_grad();
        for (std::size_t j = 0; j < c; ++j) gb[j] += go[j];
      }
      for (std::size_t k = 0; k < kw; ++k) {
        const std::size_t pr = t + k;
        const bool from_ctx = pr < kw - 1;
        const T* xr = from_ctx ? context.row(pr) : X.row(pr - (kw - 1));
        if (pw->requires_grad) {
          T* gw = pw->ensure_grad().row(k);
          for (std::size_t j = 0; j < c; ++j) gw[j] += go[j] * xr[j];
        }
        if (!from_ctx && px->requires_grad) {
          T* gx = px->ensure_grad().row(pr - (kw - 1));
          const T* wr = W.row(k);
          for (std::size_t j = 0; j < c; ++j) gx[j] += go[j] * wr[j];
        }
      }
    }
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: nothing to concatenate");
  const std::size_t c = parts[0].cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
    n += p.rows();
  }
  Tensor<T> out(n, c);
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.row(r));
    r += p.rows();
  }
  return make_result<T>(std::move(out), parts, [](Node<T>& self) {
    std::size_t r = 0;
    for (auto& p : self.parents) {
      const std::size_t n = p->value().rows();
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        const T* src = self.grad.row(r);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
      }
      r += n;
    }
  });
}

template <typename T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  const std::size_t n = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor<T> out(n, ca + cb);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.value().row(i), a.value().row(i) + ca, out.row(i));
    std::copy(b.value().row(i), b.value().row(i) + cb, out.row(i) + ca);
  }
  return make_result<T>(std::move(out), {a, b}, [ca, cb](Node<T>& self) {
    Node<T>* pa = self.parent(0);
    Node<T>* pb = self.parent(1);
    for (std::size_t i = 0; i < self.grad.rows(); ++i) {
      const T* g = self.grad.row(i);
      if (pa->requires_grad) {
        T* d = pa->ensure_grad().row(i);
        for (std::size_t j = 0; j < ca; ++j) d[j] += g[j];
      }
      if (pb->requires_grad) {
        T* d = pb->ensure_grad().row(i);
        for (std::size_t j = 0; j < cb; ++j) d[j] += g[ca + j];
      }
    }
  });
}

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count) {
  if (start + count > x.rows()) throw std::out_of_range("slice_rows: out of range");
  const std::size_t c = x.cols();
  Tensor<T> out(count, c);
  std::copy(x.value().row(start), x.value().row(start) + count * c, out.data());
  return make_result<T>(std::move(out), {x}, [start](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    T* dst = g.row(start);
    for (std::size_t i = 0; i < self.grad.size(); ++i) dst[i] += self.grad[i];
  });
}

// Rows of `table` selected by index (embedding lookup).
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> idx) {
  const auto& Tb = table.value();
  const std::size_t c = Tb.cols();
  Tensor<T> out(idx.size(), c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= Tb.rows()) throw std::out_of_range("gather_rows: index out of range");
    std::copy(Tb.row(idx[i]), Tb.row(idx[i]) + c, out.row(i));
  }
  return make_result<T>(std::move(out), {table}, [idx = std::move(idx)](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    const std::size_t c = g.cols();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* d = g.row(idx[i]);
      const T* s = self.grad.row(i);
      for (std::size_t j = 0; j < c; ++j) d[j] += s[j];
    }
  });
}

// Average over non-overlapping windows of r rows; the last window may be short.
template <typename T>
Var<T> avg_pool_rows(const Var<T>& x, std::size_t r) {
  if (r == 0) throw std::invalid_argument("avg_pool_rows: r must be positive");
  const std::size_t n = x.rows(), c = x.cols();
  const std::size_t out_n = (n + r - 1) / r;
  Tensor<T> out(out_n, c);
  for (std::size_t o = 0; o < out_n; ++o) {
    const std::size_t b = o * r, e = std::min(n, b + r);
    T* dst = out.row(o);
    for (std::size_t i = b; i < e; ++i) {
      const T* s = x.value().row(i);
      for (std::size_t j = 0; j < c; ++j) dst[j] += s[j];
    }
    const T inv = T(1) / T(e - b);
    for (std::size_t j = 0; j < c; ++j) dst[j] *= inv;
  }
  return make_result<T>(std::move(out), {x}, [r](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    const std::size_t n = g.rows(), c = g.cols();
    for (std::size_t o = 0; o < self.grad.rows(); ++o) {
      const std::size_t b = o * r, e = std::min(n, b + r);
      const T inv = T(1) / T(e - b);
      for (std::size_t i = b; i < e; ++i)
        for (std::size_t j = 0; j < c; ++j) g(i, j) += self.grad(o, j) * inv;
    }
  });
}

// Repeat every row r times and keep the first `out_rows` rows.
template <typename T>
Var<T> repeat_rows(const Var<T>& x, std::size_t r, std::size_t out_rows) {
  const std::size_t c = x.cols();
  if (out_rows > x.rows() * r) throw std::invalid_argument("repeat_rows: not enough rows");
  Tensor<T> out(out_rows, c);
  for (std::size_t i = 0; i < out_rows; ++i)
    std::copy(x.value().row(i / r), x.value().row(i / r) + c, out.row(i));
  return make_result<T>(std::move(out), {x}, [r](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    for (std::size_t i = 0; i < self.grad.rows(); ++i) {
      T* d = g.row(i / r);
      const T* s = self.grad.row(i);
      for (std::size_t j = 0; j < g.cols(); ++j) d[j] += s[j];
    }
  });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x, T eps = T(1e-12)) {
  const auto& X = x.value();
  Tensor<T> out = X;
  std::vector<T> norms(X.rows());
  for (std::size_t i = 0; i < X.rows(); ++i) {
    T s = 0;
    for (std::size_t j = 0; j < X.cols(); ++j) s += X(i, j) * X(i, j);
    norms[i] = std::max(std::sqrt(s), eps);
    for (std::size_t j = 0; j < X.cols(); ++j) out(i, j) /= norms[i];
  }
  return make_result<T>(std::move(out), {x}, [norms = std::move(norms)](Node<T>& self) {
    Node<T>* p = self.parent(0);
    const auto& X = p->value();
    auto& g = p->ensure_grad();
    for (std::size_t i = 0; i < X.rows(); ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < X.cols(); ++j) dot += self.grad(i, j) * X(i, j);
      const T n = norms[i];
      for (std::size_t j = 0; j < X.cols(); ++j)
        g(i, j) += self.grad(i, j) / n - X(i, j) * dot / (n * n * n);
    }
  });
}

// Broadcast a 1 x C row to n x C.
template <typename T>
Var<T> broadcast_row(const Var<T>& row, std::size_t n) {
  if (row.rows() != 1) throw std::invalid_argument("broadcast_row: expected a single row");
  const std::size_t c = row.cols();
  Tensor<T> out(n, c);
  for (std::size_t i = 0; i < n; ++i) std::copy(row.value().data(), row.value().data() + c, out.row(i));
  return make_result<T>(std::move(out), {row}, [](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    for (std::size_t i = 0; i < self.grad.rows(); ++i)
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += self.grad(i, j);
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  return make_result<T>(Tensor<T>::scalar(s), {x}, [](Node<T>& self) {
    auto& g = self.parent(0)->ensure_grad();
    for (auto& v : g.values()) v += self.grad[0];
  });
}

// Weighted sum of scalar Vars: sum_i w_i * s_i.
template <typename T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, std::vector<T> weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum: size mismatch");
  T total = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) total += weights[i] * terms[i].item();
  return make_result<T>(Tensor<T>::scalar(total), terms, [weights = std::move(weights)](Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i) {
      Node<T>* p = self.parent(i);
      if (p->requires_grad) p->ensure_grad()[0] += weights[i] * self.grad[0];
    }
  });
}

}  // namespace dvc3::ops
