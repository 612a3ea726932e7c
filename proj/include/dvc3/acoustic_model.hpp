#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dvc3/conformer.hpp"
#include "dvc3/nn.hpp"

namespace dvc3 {

struct AcousticConfig {
  std::size_t mel_bins = 80;     // F
  std::size_t vocab = 150;       // N
  std::size_t downsample = 2;    // r
  std::size_t speakers = 8;
  std::size_t speaker_dim = 64;  // E
  ConformerConfig encoder;
  ConformerConfig decoder;
  std::size_t hpc_shift = 6;
  std::size_t hpc_negatives = 10;

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (mel_bins == 0 || vocab < 2 || downsample == 0 || speakers == 0 || speaker_dim == 0)
      throw std::invalid_argument("AcousticConfig: sizes must be positive (vocab >= 2)");
    if (encoder.dim != decoder.dim) throw std::invalid_argument("AcousticConfig: encoder and decoder dims differ");
    if (encoder.num_blocks < 2) throw std::invalid_argument("AcousticConfig: encoder needs at least two blocks");
  }

  std::size_t token_frames(std::size_t mel_frames) const { return (mel_frames + downsample - 1) / downsample; }
  std::size_t intermediate_block() const { return encoder.num_blocks / 2 - 1; }
};

struct LossWeights {
  double alpha = 45.0;
  double beta = 1.0;
  double gamma = 10.0;
};

struct LossBreakdown {
  double rec = 0, hpc = 0, ce = 0, total = 0;
};

inline LossBreakdown make_breakdown(double rec, double hpc, double ce, const LossWeights& w) {
  return {rec, hpc, ce, w.alpha * rec + w.beta * hpc + w.gamma * ce};
}

template <typename T>
struct AcousticLoss {
  Var<T> total;
  LossBreakdown parts;
};

template <typename T>
struct Discretized {
  Var<T> input;                     // rows fed to the code table: one-hot (hard) or soft
  std::vector<std::size_t> codes;   // 0-based
};

// Row-wise argmax, ties resolved to the lowest index.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& x) {
  std::vector<std::size_t> out(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const T* r = x.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < x.cols(); ++j)
      if (r[j] > r[best]) best = j;
    out[i] = best;
  }
  return out;
}

template <typename T>
struct AcousticModel {
  AcousticConfig cfg;
  Linear<T> in_proj;
  ConformerStack<T> encoder;
  Linear<T> zproj;
  Parameter<T> code_table;     // N x D
  Parameter<T> speaker_table;  // S x E
  Linear<T> dec_in;
  ConformerStack<T> decoder;
  Linear<T> out_proj;
  // Training-only heads for the predictive coding loss.
  Linear<T> apc_head, cpc_proj, cpc_target;

  AcousticModel() = default;
  AcousticModel(const AcousticConfig& c, std::uint64_t seed) : cfg(c) {
    cfg.validate();
    Rng rng(seed);
    const std::size_t d = c.encoder.dim;
    in_proj = Linear<T>("am.in", c.mel_bins, d, rng);
    encoder = ConformerStack<T>("am.enc", c.encoder, rng);
    zproj = Linear<T>("am.zproj", d, c.vocab, rng);
    code_table = Parameter<T>("am.codes", normal_init<T>(c.vocab, d, 1.0, rng));
    speaker_table = Parameter<T>("am.speakers", normal_init<T>(c.speakers, c.speaker_dim, 1.0, rng));
    dec_in = Linear<T>("am.dec_in", d + c.speaker_dim, d, rng);
    decoder = ConformerStack<T>("am.dec", c.decoder, rng);
    out_proj = Linear<T>("am.out", d, c.mel_bins, rng);
    apc_head = Linear<T>("am.hpc.apc", d, c.mel_bins, rng);
    cpc_proj = Linear<T>("am.hpc.cpc_proj", d, d, rng);
    cpc_target = Linear<T>("am.hpc.cpc_target", d, d, rng);
  }

  template <typename F>
  void visit_inference(F&& f) {
    in_proj.visit(f);
    encoder.visit(f);
    zproj.visit(f);
    f(code_table);
    f(speaker_table);
    dec_in.visit(f);
    decoder.visit(f);
    out_proj.visit(f);
  }

  template <typename F>
  void visit(F&& f) {
    visit_inference(f);
    apc_head.visit(f);
    cpc_proj.visit(f);
    cpc_target.visit(f);
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps;
    visit([&](Parameter<T>& p) { ps.push_back(&p); });
    return ps;
  }

  // Parameters used at conversion time (predictive coding heads excluded).
  std::size_t inference_parameter_count() {
    std::size_t n = 0;
    visit_inference([&](Parameter<T>& p) { n += p.value.size(); });
    return n;
  }

  struct Encoded {
    Var<T> z;
    Var<T> intermediate;
  };

  Encoded encode(const Var<T>& mel, const ChunkMask& mask) const {
    if (mel.cols() != cfg.mel_bins)
      throw std::invalid_argument("encode: expected " + std::to_string(cfg.mel_bins) + " mel bins, got " +
                                  std::to_string(mel.cols()));
    Encoded e;
    e.z = encoder.forward(in_proj(mel), mask, cfg.intermediate_block(), &e.intermediate);
    return e;
  }

  Var<T> downsample_project(const Var<T>& z) const { return zproj(ops::avg_pool_rows(z, cfg.downsample)); }

  // Training: Gumbel straight-through with the given noise. Inference: argmax.
  Discretized<T> discretize(const Var<T>& zprime, bool training, const Tensor<T>* noise = nullptr,
                            double temperature = 1.0, bool hard = true) const {
    if (!training) {
      auto codes = argmax_rows(zprime.value());
      Tensor<T> onehot(codes.size(), cfg.vocab);
      for (std::size_t i = 0; i < codes.size(); ++i) onehot(i, codes[i]) = T(1);
      return {constant(std::move(onehot)), std::move(codes)};
    }
    if (!noise) throw std::invalid_argument("discretize: training mode needs Gumbel noise");
    auto g = gumbel_softmax(zprime, *noise, temperature, hard);
    return {g.output, std::move(g.indices)};
  }

  Var<T> speaker_vector(std::size_t speaker) const {
    if (speaker >= cfg.speakers)
      throw std::out_of_range("speaker id " + std::to_string(speaker) + " outside table of " +
                              std::to_string(cfg.speakers));
    return ops::l2_normalize_rows(ops::gather_rows(leaf(speaker_table), {speaker}));
  }

  // Token-rate embeddings -> decoder input frames (before the decoder stack).
  Var<T> decoder_input(const Var<T>& embedded, std::size_t mel_frames, std::size_t speaker) const {
    Var<T> up = ops::repeat_rows(embedded, cfg.downsample, mel_frames);
    Var<T> spk = ops::broadcast_row(speaker_vector(speaker), mel_frames);
    return dec_in(ops::concat_cols(up, spk));
  }

  Var<T> decode(const Discretized<T>& d, std::size_t mel_frames, std::size_t speaker, const ChunkMask& mask) const {
    Var<T> emb = ops::matmul(d.input, leaf(code_table));
    return out_proj(decoder.forward(decoder_input(emb, mel_frames, speaker), mask));
  }

  // Inference decode straight from code indices.
  Var<T> decode_codes(const std::vector<std::size_t>& codes, std::size_t mel_frames, std::size_t speaker,
                      const ChunkMask& mask) const {
    check_codes(codes);
    Var<T> emb = ops::gather_rows(leaf(code_table), codes);
    return out_proj(decoder.forward(decoder_input(emb, mel_frames, speaker), mask));
  }

  // Decoder input rows for mel frames whose codes are given one per frame
  // (already upsampled). Row-wise, so usable chunk by chunk when streaming.
  Tensor<T> decoder_frames(const std::vector<std::size_t>& frame_codes, std::size_t speaker) const {
    NoGradGuard ng;
    check_codes(frame_codes);
    Var<T> emb = ops::gather_rows(leaf(code_table), frame_codes);
    Var<T> spk = ops::broadcast_row(speaker_vector(speaker), frame_codes.size());
    return dec_in(ops::concat_cols(emb, spk)).value();
  }

  void check_codes(const std::vector<std::size_t>& codes) const {
    for (auto c : codes)
      if (c >= cfg.vocab) throw std::out_of_range("code " + std::to_string(c) + " outside vocabulary");
  }

  // Predictive coding loss on the intermediate encoder output: APC (L1 to the
  // mel frame k ahead) plus CPC (InfoNCE against uniformly drawn negatives).
  Var<T> hpc_loss(const Var<T>& intermediate, const Tensor<T>& mel, Rng& rng) const {
    const std::size_t tm = intermediate.rows(), k = cfg.hpc_shift;
    if (tm <= k) return constant(Tensor<T>::scalar(T(0)));
    const std::size_t n = tm - k;
    Var<T> src = ops::slice_rows(intermediate, 0, n);
    Tensor<T> future(n, mel.cols());
    for (std::size_t i = 0; i < n; ++i) std::copy(mel.row(i + k), mel.row(i + k) + mel.cols(), future.row(i));
    Var<T> apc = l1_loss(apc_head(src), constant(std::move(future)));

    Var<T> scores = ops::matmul_nt(cpc_proj(src), cpc_target(intermediate));
    std::uniform_int_distribution<std::size_t> pick(0, tm - 2);
    std::vector<std::vector<std::size_t>> cand(n);
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t pos = t + k;
      cand[t].push_back(pos);
      for (std::size_t j = 0; j < cfg.hpc_negatives; ++j) {
        std::size_t s = pick(rng);
        cand[t].push_back(s >= pos ? s + 1 : s);
      }
    }
    return ops::add(apc, contrastive_nll(scores, cand));
  }

  AcousticLoss<T> acoustic_loss(const Tensor<T>& mel, const Var<T>& mel_hat, const Var<T>& zprime,
                                const std::vector<std::size_t>& tokens, const Var<T>& intermediate,
                                const LossWeights& w, Rng& rng) const {
    if (tokens.size() != zprime.rows())
      throw std::invalid_argument("acoustic_loss: " + std::to_string(tokens.size()) + " tokens for " +
                                  std::to_string(zprime.rows()) + " latent rows");
    Var<T> rec = mse(mel_hat, constant(mel));
    Var<T> hpc = hpc_loss(intermediate, mel, rng);
    Var<T> ce = cross_entropy(zprime, tokens);
    Var<T> total = ops::weighted_sum<T>({rec, hpc, ce}, {T(w.alpha), T(w.beta), T(w.gamma)});
    return {total, make_breakdown(rec.item(), hpc.item(), ce.item(), w)};
  }

  // Full training forward for one utterance.
  AcousticLoss<T> training_loss(const Tensor<T>& mel, const std::vector<std::size_t>& tokens, std::size_t speaker,
                                const ChunkMask& mask, const Tensor<T>& noise, double temperature,
                                const LossWeights& w, Rng& rng, bool hard = true) const {
    if (tokens.size() != cfg.token_frames(mel.rows()))
      throw std::invalid_argument("training_loss: token count does not match mel length");
    auto enc = encode(constant(mel), mask);
    Var<T> zp = downsample_project(enc.z);
    auto d = discretize(zp, true, &noise, temperature, hard);
    Var<T> mel_hat = decode(d, mel.rows(), speaker, mask);
    return acoustic_loss(mel, mel_hat, zp, tokens, enc.intermediate, w, rng);
  }

  // Offline conversion (no gradients).
  struct Conversion {
    Tensor<T> mel;
    std::vector<std::size_t> codes;
    Tensor<T> zprime;
  };

  Conversion convert(const Tensor<T>& mel, std::size_t speaker, const ChunkMask& mask) const {
    NoGradGuard ng;
    auto enc = encode(constant(mel), mask);
    Var<T> zp = downsample_project(enc.z);
    auto codes = argmax_rows(zp.value());
    Tensor<T> out = decode_codes(codes, mel.rows(), speaker, mask).value();
    return {std::move(out), std::move(codes), zp.value()};
  }
};

// One batch element for training.
template <typename T>
struct TrainExample {
  const Tensor<T>* mel;
  const std::vector<std::size_t>* tokens;
  std::size_t speaker;
};

struct AcousticTrainConfig {
  LossWeights weights;
  AdamConfig adam;
  std::size_t total_steps = 1000;  // temperature schedule horizon
  std::size_t workers = 1;
  std::uint64_t seed = 1;
};

struct TrainStepResult {
  LossBreakdown loss;
  std::size_t chunk = 0;
  double temperature = 0;
};

template <typename T>
class AcousticTrainer {
 public:
  AcousticTrainer(AcousticModel<T>& model, AcousticTrainConfig cfg)
      : model_(model), cfg_(cfg), opt_(cfg.adam), rng_(cfg.seed), params_(model.parameters()) {}

  // One optimisation step: a single chunk size for encoder and decoder, the
  // batch-mean loss, gradients reduced in item order.
  TrainStepResult step(const std::vector<TrainExample<T>>& batch) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const std::size_t chunk = sample_training_chunk(rng_);
    const double tau = gumbel_temperature(static_cast<std::size_t>(opt_.steps()), cfg_.total_steps);
    std::vector<std::uint64_t> seeds(batch.size());
    for (auto& s : seeds) s = rng_();

    const std::size_t n = batch.size();
    std::vector<GradSink<T>> sinks(n);
    std::vector<LossBreakdown> parts(n);
    std::vector<std::string> errors(n);
    auto run = [&](std::size_t i) {
      try {
        const auto& ex = batch[i];
        Rng item_rng(seeds[i]);
        auto noise = sample_gumbel_noise<T>(model_.cfg.token_frames(ex.mel->rows()), model_.cfg.vocab, item_rng);
        auto mask = make_chunk_mask(ex.mel->rows(), chunk);
        auto l = model_.training_loss(*ex.mel, *ex.tokens, ex.speaker, mask, noise, tau, cfg_.weights, item_rng);
        parts[i] = l.parts;
        if (!std::isfinite(l.parts.total)) return;
        backward(l.total, sinks[i], T(1.0 / double(n)));
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(cfg_.workers, n));
    if (workers == 1) {
      for (std::size_t i = 0; i < n; ++i) run(i);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
          for (std::size_t i = w; i < n; i += workers) run(i);
        });
      for (auto& t : pool) t.join();
    }
    for (std::size_t i = 0; i < n; ++i)
      if (!errors[i].empty()) throw std::runtime_error("train_step: item " + std::to_string(i) + ": " + errors[i]);

    double rec = 0, hpc = 0, ce = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(parts[i].total))
        throw std::runtime_error("train_step " + std::to_string(opt_.steps()) + ": non-finite loss (rec=" +
                                 std::to_string(parts[i].rec) + " hpc=" + std::to_string(parts[i].hpc) +
                                 " ce=" + std::to_string(parts[i].ce) + ") on batch item " + std::to_string(i));
      rec += parts[i].rec;
      hpc += parts[i].hpc;
      ce += parts[i].ce;
    }
    for (auto& s : sinks) s.apply();
    opt_.step(params_);
    return {make_breakdown(rec / double(n), hpc / double(n), ce / double(n), cfg_.weights), chunk, tau};
  }

  Adam<T>& optimizer() { return opt_; }
  Rng& rng() { return rng_; }
  std::size_t steps() const { return static_cast<std::size_t>(opt_.steps()); }

 private:
  AcousticModel<T>& model_;
  AcousticTrainConfig cfg_;
  Adam<T> opt_;
  Rng rng_;
  std::vector<Parameter<T>*> params_;
};

}  // namespace dvc3
