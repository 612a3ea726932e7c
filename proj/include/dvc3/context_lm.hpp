#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc3/binio.hpp"
#include "dvc3/nn.hpp"

namespace dvc3 {

struct LmConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t hidden = 64;
  std::size_t intermediate = 128;
  std::size_t vocab = 151;  // codes + BOS
  std::size_t max_context = 256;

  void validate() const {
    if (hidden == 0 || heads == 0 || hidden % heads != 0)
      throw std::invalid_argument("LmConfig: hidden " + std::to_string(hidden) + " not divisible by heads " +
                                  std::to_string(heads));
    if (layers == 0 || intermediate == 0) throw std::invalid_argument("LmConfig: layers/intermediate must be positive");
    if (vocab < 2) throw std::invalid_argument("LmConfig: vocab must include codes and BOS");
    if (max_context < 2) throw std::invalid_argument("LmConfig: max_context must be at least 2");
  }

  std::size_t bos() const { return vocab - 1; }
  std::size_t codes() const { return vocab - 1; }
};

template <typename T>
struct LmState {
  std::vector<Tensor<T>> keys, values;  // per layer, position x hidden
  std::size_t position = 0;
};

struct SamplingConfig {
  enum class Mode { greedy, top_k };
  Mode mode = Mode::top_k;
  std::size_t k = 10;
  double temperature = 1.0;
  std::uint64_t seed = 1;

  void validate() const {
    if (k == 0) throw std::invalid_argument("SamplingConfig: k must be >= 1");
    if (!(temperature > 0)) throw std::invalid_argument("SamplingConfig: temperature must be > 0");
  }
};

struct PseudoContext {
  std::vector<std::size_t> codes;
  std::vector<double> log_probs;  // log p of each generated code given its prefix
};

template <typename T>
std::vector<double> log_softmax_row(const T* row, std::size_t n) {
  const T m = *std::max_element(row, row + n);
  double s = 0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(double(row[j] - m));
  const double lse = double(m) + std::log(s);
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = double(row[j]) - lse;
  return out;
}

template <typename T>
struct LmLayer {
  RmsNorm<T> attn_norm;
  Linear<T> wq, wk, wv, wo;
  RmsNorm<T> ffn_norm;
  Linear<T> gate, up, down;

  LmLayer() = default;
  LmLayer(const std::string& name, const LmConfig& c, Rng& rng)
      : attn_norm(name + ".attn_norm", c.hidden),
        wq(name + ".q", c.hidden, c.hidden, rng, false),
        wk(name + ".k", c.hidden, c.hidden, rng, false),
        wv(name + ".v", c.hidden, c.hidden, rng, false),
        wo(name + ".o", c.hidden, c.hidden, rng, false),
        ffn_norm(name + ".ffn_norm", c.hidden),
        gate(name + ".gate", c.hidden, c.intermediate, rng, false),
        up(name + ".up", c.hidden, c.intermediate, rng, false),
        down(name + ".down", c.intermediate, c.hidden, rng, false) {}

  template <typename F>
  void visit(F&& f) {
    attn_norm.visit(f);
    wq.visit(f);
    wk.visit(f);
    wv.visit(f);
    wo.visit(f);
    ffn_norm.visit(f);
    gate.visit(f);
    up.visit(f);
    down.visit(f);
  }
};

template <typename T>
struct LmModel {
  LmConfig cfg;
  Parameter<T> embed;      // vocab x hidden
  Parameter<T> positions;  // max_context x hidden
  std::vector<LmLayer<T>> layers;
  RmsNorm<T> final_norm;
  Linear<T> head;

  LmModel() = default;
  LmModel(const LmConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    embed = Parameter<T>("lm.embed", normal_init<T>(c.vocab, c.hidden, 0.5, rng));
    positions = Parameter<T>("lm.pos", normal_init<T>(c.max_context, c.hidden, 0.1, rng));
    for (std::size_t i = 0; i < c.layers; ++i) layers.emplace_back("lm.layer" + std::to_string(i), c, rng);
    final_norm = RmsNorm<T>("lm.final_norm", c.hidden);
    head = Linear<T>("lm.head", c.hidden, c.vocab, rng, false);
  }

  template <typename F>
  void visit(F&& f) {
    f(embed);
    f(positions);
    for (auto& l : layers) l.visit(f);
    final_norm.visit(f);
    head.visit(f);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps;
    visit([&](Parameter<T>& p) { ps.push_back(&p); });
    return ps;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&](Parameter<T>& p) { n += p.value.size(); });
    return n;
  }

  LmState<T> make_state() const {
    LmState<T> s;
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      s.keys.emplace_back(0, cfg.hidden);
      s.values.emplace_back(0, cfg.hidden);
    }
    return s;
  }

  // Logits for `tokens` placed at positions state.position.. (graph-building
  // when state is null and gradients are on). With a state the new keys and
  // values are appended to it.
  Var<T> forward(const std::vector<std::size_t>& tokens, LmState<T>* state = nullptr) const {
    const std::size_t start = state ? state->position : 0, n = tokens.size();
    if (n == 0) throw std::invalid_argument("lm_forward: empty input");
    if (start + n > cfg.max_context)
      throw std::length_error("lm_forward: " + std::to_string(start + n) + " positions exceed max_context " +
                              std::to_string(cfg.max_context));
    for (auto t : tokens)
      if (t >= cfg.vocab) throw std::out_of_range("lm_forward: token " + std::to_string(t) + " outside vocabulary");
    std::vector<std::size_t> pos(n);
    std::iota(pos.begin(), pos.end(), start);
    Var<T> h = ops::add(ops::gather_rows(leaf(embed), tokens), ops::gather_rows(leaf(positions), pos));

    std::vector<std::uint8_t> allowed(n * (start + n), 0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= start + i; ++j) allowed[i * (start + n) + j] = 1;

    for (std::size_t li = 0; li < layers.size(); ++li) {
      const auto& L = layers[li];
      Var<T> a = L.attn_norm(h);
      Var<T> q = L.wq(a), k = L.wk(a), v = L.wv(a);
      Var<T> k_all = k, v_all = v;
      if (state && start > 0) {
        k_all = ops::concat_rows<T>({constant(state->keys[li]), k});
        v_all = ops::concat_rows<T>({constant(state->values[li]), v});
      }
      if (state) {
        state->keys[li] = k_all.value();
        state->values[li] = v_all.value();
      }
      h = ops::add(h, L.wo(ops::attention(q, k_all, v_all, cfg.heads, allowed)));
      Var<T> f = L.ffn_norm(h);
      h = ops::add(h, L.down(ops::mul(ops::swish(L.gate(f)), L.up(f))));
    }
    if (state) state->position = start + n;
    return head(final_norm(h));
  }

  // Mean per-token negative log-likelihood of seq[1..] given its prefix.
  Var<T> nll(const std::vector<std::size_t>& seq) const {
    if (seq.size() < 2) throw std::invalid_argument("lm_nll: need at least two tokens");
    std::vector<std::size_t> in(seq.begin(), seq.end() - 1), target(seq.begin() + 1, seq.end());
    return cross_entropy(forward(in), target);
  }
};

// Next code from a logits row. BOS is never produced.
template <typename T>
std::size_t sample_code(const T* logits, const LmConfig& cfg, const SamplingConfig& sc, Rng& rng,
                        double* log_prob = nullptr) {
  const std::size_t n = cfg.codes();
  auto lp = log_softmax_row(logits, cfg.vocab);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  std::size_t pick = order[0];
  if (sc.mode == SamplingConfig::Mode::top_k) {
    const std::size_t k = std::min(sc.k, n);
    std::vector<double> w(k);
    const double top = double(logits[order[0]]);
    for (std::size_t i = 0; i < k; ++i) w[i] = std::exp((double(logits[order[i]]) - top) / sc.temperature);
    double total = std::accumulate(w.begin(), w.end(), 0.0);
    double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    std::size_t i = 0;
    for (; i + 1 < k; ++i) {
      if (u < w[i]) break;
      u -= w[i];
    }
    pick = order[i];
  }
  if (log_prob) *log_prob = lp[pick];
  return pick;
}

// Autoregressive pseudo context continuing from `state`, whose next-position
// logits are `next_logits`. The state is advanced through the generated codes.
template <typename T>
PseudoContext generate_pseudo_context(const LmModel<T>& lm, LmState<T>& state, Tensor<T> next_logits,
                                      std::size_t n, const SamplingConfig& sc, Rng& rng) {
  sc.validate();
  NoGradGuard ng;
  PseudoContext out;
  for (std::size_t i = 0; i < n; ++i) {
    double lp = 0;
    const std::size_t code = sample_code(next_logits.row(next_logits.rows() - 1), lm.cfg, sc, rng, &lp);
    out.codes.push_back(code);
    out.log_probs.push_back(lp);
    if (i + 1 < n) {
      if (state.position >= lm.cfg.max_context) break;
      next_logits = lm.forward({code}, &state).value();
    }
  }
  return out;
}

// Convenience form from a plain history (BOS is prepended). The history is
// truncated to its most recent max_context - n codes.
template <typename T>
PseudoContext generate_pseudo_context(const LmModel<T>& lm, const std::vector<std::size_t>& history, long n,
                                      const SamplingConfig& sc) {
  if (n < 0) throw std::invalid_argument("generate_pseudo_context: n must be >= 0");
  if (n == 0) return {};
  NoGradGuard ng;
  std::vector<std::size_t> prefix{lm.cfg.bos()};
  const std::size_t room = lm.cfg.max_context > std::size_t(n) + 1 ? lm.cfg.max_context - std::size_t(n) - 1 : 0;
  const std::size_t skip = history.size() > room ? history.size() - room : 0;
  prefix.insert(prefix.end(), history.begin() + long(skip), history.end());
  auto state = lm.make_state();
  Tensor<T> logits = lm.forward(prefix, &state).value();
  Rng rng(sc.seed);
  return generate_pseudo_context(lm, state, std::move(logits), std::size_t(n), sc, rng);
}

// Streaming LM context for one session: true codes only, BOS-anchored, with
// a rolling window once max_context is reached.
template <typename T>
class LmContext {
 public:
  explicit LmContext(const LmModel<T>& lm) : lm_(&lm) { reset(); }

  void reset() {
    history_.clear();
    rebuild();
  }

  void push(std::size_t code) {
    NoGradGuard ng;
    history_.push_back(code);
    if (state_.position >= lm_->cfg.max_context) {
      rebuild();
      return;
    }
    logits_ = lm_->forward({code}, &state_).value();
  }

  PseudoContext pseudo(std::size_t n, const SamplingConfig& sc, Rng& rng) const {
    LmState<T> scratch = state_;
    return generate_pseudo_context(*lm_, scratch, logits_, n, sc, rng);
  }

  const std::vector<std::size_t>& history() const { return history_; }
  const LmState<T>& state() const { return state_; }

 private:
  // BOS plus the most recent half window of codes.
  void rebuild() {
    NoGradGuard ng;
    const std::size_t keep = std::min(history_.size(), lm_->cfg.max_context / 2);
    std::vector<std::size_t> prefix{lm_->cfg.bos()};
    prefix.insert(prefix.end(), history_.end() - long(keep), history_.end());
    state_ = lm_->make_state();
    logits_ = lm_->forward(prefix, &state_).value();
  }

  const LmModel<T>* lm_;
  std::vector<std::size_t> history_;
  LmState<T> state_;
  Tensor<T> logits_;
};

// ---------------------------------------------------------------------------
// Training

struct LmTrainOptions {
  std::size_t steps = 500;
  std::size_t batch = 8;
  double heldout_fraction = 0.1;
  AdamConfig adam;
  std::uint64_t seed = 1;
};

struct LmTrainReport {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;     // mean step loss per pass over the training split
  std::vector<double> heldout_nll;    // per epoch
};

// BOS-prefixed training windows of at most max_context tokens.
inline std::vector<std::vector<std::size_t>> lm_sequences(const std::vector<std::vector<std::size_t>>& codes,
                                                          const LmConfig& cfg) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& c : codes) {
    if (c.empty()) continue;
    for (std::size_t b = 0; b < c.size(); b += cfg.max_context - 1) {
      std::vector<std::size_t> s{cfg.bos()};
      const std::size_t e = std::min(c.size(), b + cfg.max_context - 1);
      s.insert(s.end(), c.begin() + long(b), c.begin() + long(e));
      if (s.size() >= 2) out.push_back(std::move(s));
    }
  }
  return out;
}

template <typename T>
double mean_nll(const LmModel<T>& lm, const std::vector<std::vector<std::size_t>>& seqs) {
  NoGradGuard ng;
  double total = 0;
  std::size_t count = 0;
  for (const auto& s : seqs) {
    total += double(lm.nll(s).item()) * double(s.size() - 1);
    count += s.size() - 1;
  }
  return count ? total / double(count) : 0.0;
}

template <typename T>
LmTrainReport train_lm(LmModel<T>& lm, const std::vector<std::vector<std::size_t>>& codes, const LmTrainOptions& opt,
                       const std::function<void(std::size_t, double)>& on_step = {}) {
  auto seqs = lm_sequences(codes, lm.cfg);
  if (seqs.empty()) throw std::invalid_argument("train_lm: empty corpus");
  Rng rng(opt.seed);
  std::shuffle(seqs.begin(), seqs.end(), rng);
  std::size_t held = std::size_t(opt.heldout_fraction * double(seqs.size()));
  if (seqs.size() < 2) held = 0;
  std::vector<std::vector<std::size_t>> heldout(seqs.end() - long(held), seqs.end());
  seqs.resize(seqs.size() - held);

  auto params = lm.parameters();
  Adam<T> adam(opt.adam);
  LmTrainReport rep;
  const std::size_t per_epoch = std::max<std::size_t>(1, seqs.size() / std::max<std::size_t>(1, opt.batch));
  std::size_t cursor = 0;
  double epoch_sum = 0;
  std::size_t epoch_n = 0;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    double loss = 0;
    const std::size_t b = std::min(opt.batch, seqs.size());
    for (std::size_t i = 0; i < b; ++i) {
      Var<T> l = lm.nll(seqs[cursor]);
      cursor = (cursor + 1) % seqs.size();
      if (cursor == 0) std::shuffle(seqs.begin(), seqs.end(), rng);
      if (!std::isfinite(double(l.item()))) throw std::runtime_error("train_lm: non-finite loss at step " + std::to_string(step));
      loss += double(l.item()) / double(b);
      GradSink<T> sink;
      backward(l, sink, T(1.0 / double(b)));
      sink.apply();
    }
    adam.step(params);
    rep.step_loss.push_back(loss);
    if (on_step) on_step(step, loss);
    epoch_sum += loss;
    if (++epoch_n == per_epoch || step + 1 == opt.steps) {
      rep.epoch_loss.push_back(epoch_sum / double(epoch_n));
      rep.heldout_nll.push_back(heldout.empty() ? 0.0 : mean_nll(lm, heldout));
      epoch_sum = 0;
      epoch_n = 0;
    }
  }
  return rep;
}

// Unigram entropy (nats) of a code corpus, with add-one smoothing over n codes.
inline std::vector<double> unigram_log_probs(const std::vector<std::vector<std::size_t>>& codes, std::size_t n) {
  std::vector<double> counts(n, 1.0);
  double total = double(n);
  for (const auto& c : codes)
    for (auto v : c) {
      counts.at(v) += 1.0;
      total += 1.0;
    }
  for (auto& v : counts) v = std::log(v / total);
  return counts;
}

// ---------------------------------------------------------------------------
// Code corpus file: "DVC3COD" | count u32 | { length u32 | codes u16 * length }*

inline constexpr std::string_view kCodeCorpusMagic = "DVC3COD";

inline void write_code_corpus(const std::filesystem::path& path, const std::vector<std::vector<std::size_t>>& seqs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  binio::put_magic(f, kCodeCorpusMagic);
  binio::put_le<std::uint32_t>(f, static_cast<std::uint32_t>(seqs.size()));
  for (const auto& s : seqs) {
    binio::put_le<std::uint32_t>(f, static_cast<std::uint32_t>(s.size()));
    for (auto c : s) {
      if (c > 0xFFFF) throw std::out_of_range("code corpus: code does not fit u16");
      binio::put_le<std::uint16_t>(f, static_cast<std::uint16_t>(c));
    }
  }
}

inline std::vector<std::vector<std::size_t>> read_code_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  binio::expect_magic(f, kCodeCorpusMagic, "code corpus");
  std::vector<std::vector<std::size_t>> out(binio::get_le<std::uint32_t>(f));
  for (auto& s : out) {
    s.resize(binio::get_le<std::uint32_t>(f));
    for (auto& c : s) c = binio::get_le<std::uint16_t>(f);
  }
  return out;
}

}  // namespace dvc3
