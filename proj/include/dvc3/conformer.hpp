#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc3/nn.hpp"

namespace dvc3 {

struct ConformerConfig {
  std::size_t num_blocks = 4;
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t conv_kernel = 7;
  std::size_t ffn_expansion = 2;

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) {
      throw std::invalid_argument("ConformerConfig: dim " + std::to_string(dim) + " not divisible by heads " +
                                  std::to_string(heads));
    }
    if (conv_kernel == 0 || conv_kernel % 2 == 0) throw std::invalid_argument("ConformerConfig: conv_kernel must be odd");
    if (ffn_expansion == 0) throw std::invalid_argument("ConformerConfig: ffn_expansion must be positive");
  }
};

// Attention visibility for a T x T self-attention. With chunk_size c > 0,
// frame i sees every frame up to the end of its own chunk; with c = 0 it
// sees everything. A non-zero `history` additionally limits the left context
// to that many frames before the start of the current chunk, which is what a
// streaming cache of the same horizon observes.
struct ChunkMask {
  std::size_t frames = 0;
  std::size_t chunk_size = 0;
  std::size_t history = 0;
  std::vector<std::uint8_t> allowed;

  bool operator()(std::size_t i, std::size_t j) const { return allowed[i * frames + j] != 0; }
  std::span<const std::uint8_t> span() const { return allowed; }
};

inline ChunkMask make_chunk_mask(std::size_t frames, std::size_t chunk_size, std::size_t history = 0) {
  if (frames == 0) throw std::invalid_argument("make_chunk_mask: need at least one frame");
  ChunkMask m{frames, chunk_size, history, std::vector<std::uint8_t>(frames * frames, 0)};
  for (std::size_t i = 0; i < frames; ++i) {
    std::size_t lo = 0, hi = frames;  // [lo, hi)
    if (chunk_size > 0) {
      const std::size_t start = (i / chunk_size) * chunk_size;
      hi = std::min(frames, start + chunk_size);
      if (history > 0 && start > history) lo = start - history;
    }
    for (std::size_t j = lo; j < hi; ++j) m.allowed[i * frames + j] = 1;
  }
  return m;
}

inline constexpr std::size_t kMaxTrainingChunk = 8;

// Dynamic chunk training draw: full sequence (0) half of the time, otherwise
// a chunk of 1..8 frames uniformly.
template <typename URng>
std::size_t sample_training_chunk(URng& rng) {
  std::bernoulli_distribution full(0.5);
  std::uniform_int_distribution<std::size_t> size(1, kMaxTrainingChunk);
  if (full(rng)) return 0;
  return size(rng);
}

// Streaming state of one conformer block.
template <typename T>
struct LayerCache {
  Tensor<T> keys;          // h x D, h <= max_history
  Tensor<T> values;        // h x D
  Tensor<T> conv_context;  // (kernel - 1) x D, depthwise-conv inputs of the latest frames
  std::size_t max_history = 64;
  std::size_t frames_seen = 0;

  LayerCache() = default;
  LayerCache(std::size_t dim, std::size_t kernel, std::size_t horizon)
      : keys(0, dim), values(0, dim), conv_context(kernel - 1, dim), max_history(horizon) {}

  std::size_t history() const { return keys.rows(); }
};

template <typename T>
struct ConformerBlock {
  ConformerConfig cfg;
  LayerNorm<T> ffn1_norm;
  Linear<T> ffn1_up, ffn1_down;
  LayerNorm<T> attn_norm;
  Linear<T> wq, wk, wv, wo;
  LayerNorm<T> conv_norm;
  Linear<T> conv_pw1;
  Parameter<T> dw_weight, dw_bias;
  LayerNorm<T> conv_mid_norm;
  Linear<T> conv_pw2;
  LayerNorm<T> ffn2_norm;
  Linear<T> ffn2_up, ffn2_down;
  LayerNorm<T> out_norm;

  ConformerBlock() = default;
  ConformerBlock(const std::string& name, const ConformerConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    const std::size_t d = c.dim, h = c.dim * c.ffn_expansion;
    ffn1_norm = LayerNorm<T>(name + ".ffn1.norm", d);
    ffn1_up = Linear<T>(name + ".ffn1.up", d, h, rng);
    ffn1_down = Linear<T>(name + ".ffn1.down", h, d, rng);
    attn_norm = LayerNorm<T>(name + ".attn.norm", d);
    wq = Linear<T>(name + ".attn.q", d, d, rng);
    wk = Linear<T>(name + ".attn.k", d, d, rng);
    wv = Linear<T>(name + ".attn.v", d, d, rng);
    wo = Linear<T>(name + ".attn.o", d, d, rng);
    conv_norm = LayerNorm<T>(name + ".conv.norm", d);
    conv_pw1 = Linear<T>(name + ".conv.pw1", d, 2 * d, rng);
    dw_weight = Parameter<T>(name + ".conv.dw.w",
                             uniform_init<T>(c.conv_kernel, d, 1.0 / std::sqrt(double(c.conv_kernel)), rng));
    dw_bias = Parameter<T>(name + ".conv.dw.b", Tensor<T>(1, d));
    conv_mid_norm = LayerNorm<T>(name + ".conv.mid_norm", d);
    conv_pw2 = Linear<T>(name + ".conv.pw2", d, d, rng);
    ffn2_norm = LayerNorm<T>(name + ".ffn2.norm", d);
    ffn2_up = Linear<T>(name + ".ffn2.up", d, h, rng);
    ffn2_down = Linear<T>(name + ".ffn2.down", h, d, rng);
    out_norm = LayerNorm<T>(name + ".out_norm", d);
  }

  template <typename F>
  void visit(F&& f) {
    ffn1_norm.visit(f);
    ffn1_up.visit(f);
    ffn1_down.visit(f);
    attn_norm.visit(f);
    wq.visit(f);
    wk.visit(f);
    wv.visit(f);
    wo.visit(f);
    conv_norm.visit(f);
    conv_pw1.visit(f);
    f(dw_weight);
    f(dw_bias);
    conv_mid_norm.visit(f);
    conv_pw2.visit(f);
    ffn2_norm.visit(f);
    ffn2_up.visit(f);
    ffn2_down.visit(f);
    out_norm.visit(f);
  }

  // Intermediate values the streaming path needs to advance its cache.
  struct Trace {
    Var<T> keys, values, conv_input;
  };

  // Core computation. `allowed` is rows(x) x (history + rows(x)); empty means
  // everything visible. History and conv context may be null (fresh stream).
  Var<T> forward_impl(const Var<T>& x, std::span<const std::uint8_t> allowed, const Tensor<T>* key_history,
                      const Tensor<T>* value_history, const Tensor<T>* conv_context, Trace* trace) const {
    if (x.cols() != cfg.dim) {
      throw std::invalid_argument("conformer block: expected " + std::to_string(cfg.dim) + " features, got " +
                                  std::to_string(x.cols()));
    }
    const T half = T(0.5);
    Var<T> h = ops::add(x, ops::scale(ffn(ffn1_norm, ffn1_up, ffn1_down, x), half));

    Var<T> a = attn_norm(h);
    Var<T> q = wq(a), k = wk(a), v = wv(a);
    Var<T> k_all = k, v_all = v;
    if (key_history && key_history->rows() > 0) {
      k_all = ops::concat_rows<T>({constant(*key_history), k});
      v_all = ops::concat_rows<T>({constant(*value_history), v});
    }
    h = ops::add(h, wo(ops::attention(q, k_all, v_all, cfg.heads, allowed)));

    Var<T> c = ops::glu(conv_pw1(conv_norm(h)));
    Tensor<T> zeros;
    if (!conv_context) {
      zeros = Tensor<T>(cfg.conv_kernel - 1, cfg.dim);
      conv_context = &zeros;
    }
    Var<T> cd = ops::causal_depthwise_conv(c, leaf(dw_weight), leaf(dw_bias), *conv_context);
    h = ops::add(h, conv_pw2(ops::swish(conv_mid_norm(cd))));

    h = ops::add(h, ops::scale(ffn(ffn2_norm, ffn2_up, ffn2_down, h), half));
    if (trace) *trace = Trace{k, v, c};
    return out_norm(h);
  }

  // Full-sequence forward under a chunk mask.
  Var<T> forward(const Var<T>& x, const ChunkMask& mask) const {
    if (mask.frames != x.rows()) throw std::invalid_argument("conformer block: mask size does not match input");
    return forward_impl(x, mask.span(), nullptr, nullptr, nullptr, nullptr);
  }

  // Chunked forward against a cache. Every row of the chunk sees the cached
  // history plus the whole chunk. Only the first `commit` rows enter the cache
  // (the rest are speculative lookahead frames).
  Tensor<T> forward_streaming(const Tensor<T>& chunk, LayerCache<T>& cache, std::size_t commit) const {
    if (chunk.cols() != cfg.dim) throw std::invalid_argument("conformer streaming: chunk width mismatch");
    if (commit > chunk.rows()) throw std::invalid_argument("conformer streaming: commit exceeds chunk");
    NoGradGuard ng;
    Trace tr;
    Var<T> out = forward_impl(constant(chunk), {}, &cache.keys, &cache.values, &cache.conv_context, &tr);
    advance(cache, tr, commit);
    return out.value();
  }

  Tensor<T> forward_streaming(const Tensor<T>& chunk, LayerCache<T>& cache) const {
    return forward_streaming(chunk, cache, chunk.rows());
  }

  LayerCache<T> make_cache(std::size_t max_history) const {
    return LayerCache<T>(cfg.dim, cfg.conv_kernel, max_history);
  }

 private:
  static Var<T> ffn(const LayerNorm<T>& norm, const Linear<T>& up, const Linear<T>& down, const Var<T>& x) {
    return down(ops::swish(up(norm(x))));
  }

  static Tensor<T> keep_last(const Tensor<T>& a, const Tensor<T>& b, std::size_t b_rows, std::size_t limit) {
    const std::size_t cols = a.cols() ? a.cols() : b.cols();
    const std::size_t total = a.rows() + b_rows;
    const std::size_t keep = limit == 0 ? total : std::min(total, limit);
    Tensor<T> out(keep, cols);
    const std::size_t skip = total - keep;
    for (std::size_t r = 0; r < keep; ++r) {
      const std::size_t src = skip + r;
      const T* s = src < a.rows() ? a.row(src) : b.row(src - a.rows());
      std::copy(s, s + cols, out.row(r));
    }
    return out;
  }

  void advance(LayerCache<T>& cache, const Trace& tr, std::size_t commit) const {
    cache.keys = keep_last(cache.keys, tr.keys.value(), commit, cache.max_history);
    cache.values = keep_last(cache.values, tr.values.value(), commit, cache.max_history);
    if (cfg.conv_kernel > 1)
      cache.conv_context = keep_last(cache.conv_context, tr.conv_input.value(), commit, cfg.conv_kernel - 1);
    cache.frames_seen += commit;
  }
};

// A stack of blocks; optionally exposes the output of one block.
template <typename T>
struct ConformerStack {
  ConformerConfig cfg;
  std::vector<ConformerBlock<T>> blocks;

  ConformerStack() = default;
  ConformerStack(const std::string& name, const ConformerConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    for (std::size_t i = 0; i < c.num_blocks; ++i)
      blocks.emplace_back(name + ".block" + std::to_string(i), c, rng);
  }

  template <typename F>
  void visit(F&& f) {
    for (auto& b : blocks) b.visit(f);
  }

  // `tap` receives the output of block index `tap_index` when non-null.
  Var<T> forward(const Var<T>& x, const ChunkMask& mask, std::size_t tap_index = 0, Var<T>* tap = nullptr) const {
    Var<T> h = x;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      h = blocks[i].forward(h, mask);
      if (tap && i == tap_index) *tap = h;
    }
    return h;
  }

  std::vector<LayerCache<T>> make_caches(std::size_t max_history) const {
    std::vector<LayerCache<T>> out;
    for (const auto& b : blocks) out.push_back(b.make_cache(max_history));
    return out;
  }

  Tensor<T> forward_streaming(const Tensor<T>& chunk, std::vector<LayerCache<T>>& caches, std::size_t commit) const {
    if (caches.size() != blocks.size()) throw std::invalid_argument("conformer stack: cache count mismatch");
    Tensor<T> h = chunk;
    for (std::size_t i = 0; i < blocks.size(); ++i) h = blocks[i].forward_streaming(h, caches[i], commit);
    return h;
  }
};

}  // namespace dvc3
