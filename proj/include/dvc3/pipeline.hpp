#pragma once

#include <algorithm>
#include <functional>
#include <vector>

#include "dvc3/acoustic_model.hpp"
#include "dvc3/context_lm.hpp"
#include "dvc3/probe.hpp"
#include "dvc3/semantic_tokens.hpp"
#include "dvc3/stream_engine.hpp"

// Corpus-level training and evaluation shared by the command line tool and
// the acceptance suite.
namespace dvc3 {

struct Split {
  std::vector<std::size_t> train, heldout;
};

// The last `heldout_per_speaker` utterances of every speaker are held out.
inline Split split_corpus(const std::vector<Utterance>& utts, std::size_t heldout_per_speaker) {
  std::vector<std::size_t> seen;
  for (const auto& u : utts) seen.resize(std::max(seen.size(), u.speaker + 1), 0);
  std::vector<std::size_t> total(seen.size(), 0);
  for (const auto& u : utts) total[u.speaker]++;
  Split s;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const std::size_t spk = utts[i].speaker;
    (seen[spk]++ + heldout_per_speaker >= total[spk] ? s.heldout : s.train).push_back(i);
  }
  return s;
}

// K-means tokens on pooled, mean-normalised mel windows; K = token_vocab.
inline std::vector<std::vector<std::size_t>> kmeans_tokens(const std::vector<Utterance>& utts, const CorpusSpec& spec,
                                                           std::uint64_t seed) {
  std::vector<Tensor<double>> feats;
  std::size_t rows = 0;
  for (const auto& u : utts) {
    feats.push_back(pooled_features(u.mel, spec.downsample, true));
    rows += feats.back().rows();
  }
  Tensor<double> x(rows, spec.mel_bins);
  std::size_t r = 0;
  for (const auto& f : feats) {
    std::copy(f.data(), f.data() + f.size(), x.row(r));
    r += f.rows();
  }
  auto model = kmeans_fit(x, spec.token_vocab, 100, seed);
  std::vector<std::vector<std::size_t>> out;
  for (const auto& f : feats) out.push_back(tokenize(f, model));
  return out;
}

// Random minibatches (with replacement) from `indices`.
inline void train_acoustic(AcousticTrainer<float>& trainer, const std::vector<Utterance>& utts,
                           const std::vector<std::vector<std::size_t>>& tokens, const std::vector<std::size_t>& indices,
                           std::size_t steps, std::size_t batch, Rng& rng,
                           const std::function<void(std::size_t, const TrainStepResult&)>& on_step = {}) {
  if (indices.empty()) throw std::invalid_argument("train_acoustic: no training utterances");
  std::uniform_int_distribution<std::size_t> pick(0, indices.size() - 1);
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<TrainExample<float>> b;
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t k = indices[pick(rng)];
      b.push_back({&utts[k].mel, &tokens[k], utts[k].speaker});
    }
    auto r = trainer.step(b);
    if (on_step) on_step(trainer.steps(), r);
  }
}

// Codes of a frozen model, as a streaming session with this chunk size sees them.
inline std::vector<std::vector<std::size_t>> extract_codes(const AcousticModel<float>& am,
                                                           const std::vector<Utterance>& utts,
                                                           const std::vector<std::size_t>& indices,
                                                           std::size_t chunk_frames = 2) {
  std::vector<std::vector<std::size_t>> out;
  for (auto i : indices) {
    NoGradGuard ng;
    const auto& mel = utts[i].mel;
    auto enc = am.encode(constant(mel), make_chunk_mask(mel.rows(), chunk_frames, 64));
    out.push_back(argmax_rows(am.downsample_project(enc.z).value()));
  }
  return out;
}

struct DecouplingReport {
  double token_accuracy = 0;  // argmax(Z') vs ground-truth tokens
  double speaker_probe = 0;   // held-out accuracy of a linear probe ZQ -> speaker
  double chance = 0;
  std::size_t frames = 0;
};

inline DecouplingReport decoupling_report(const AcousticModel<float>& am, const std::vector<Utterance>& utts,
                                          const std::vector<std::size_t>& indices, std::size_t speakers,
                                          std::size_t chunk_frames = 2) {
  auto codes = extract_codes(am, utts, indices, chunk_frames);
  std::size_t hit = 0, total = 0;
  for (std::size_t k = 0; k < indices.size(); ++k) total += codes[k].size();
  Tensor<double> zq(total, am.cfg.encoder.dim);
  std::vector<std::size_t> labels;
  std::size_t row = 0;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& u = utts[indices[k]];
    for (std::size_t t = 0; t < codes[k].size(); ++t, ++row) {
      hit += t < u.tokens.size() && codes[k][t] == u.tokens[t];
      const float* e = am.code_table.value.row(codes[k][t]);
      std::copy(e, e + zq.cols(), zq.row(row));
      labels.push_back(u.speaker);
    }
  }
  DecouplingReport r;
  r.frames = total;
  r.token_accuracy = total ? double(hit) / double(total) : 0.0;
  r.speaker_probe = linear_probe(zq, labels, speakers).test_accuracy;
  r.chance = 1.0 / double(speakers);
  return r;
}

struct PseudoContextReport {
  double lm_nll = 0, unigram_nll = 0;  // per code, final `masked` codes of each utterance
  double median_full = 0, median_standalone = 0;
  std::size_t utterances = 0, full_wins = 0;
};

inline double mean_squared_error(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("mean_squared_error: shape mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a.values()[i]) - double(b.values()[i]);
    s += d * d;
  }
  return a.size() ? s / double(a.size()) : 0.0;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Continuation NLL of the last `masked` codes against a unigram baseline, and
// mel error of both streaming modes against full-context offline conversion.
inline PseudoContextReport pseudo_context_report(const AcousticModel<float>& am, const LmModel<float>& lm,
                                                 const std::vector<std::vector<std::size_t>>& train_codes,
                                                 const std::vector<Utterance>& utts,
                                                 const std::vector<std::size_t>& heldout, SessionConfig base,
                                                 std::size_t masked = 2) {
  NoGradGuard ng;
  auto uni = unigram_log_probs(train_codes, am.cfg.vocab);
  auto codes = extract_codes(am, utts, heldout, base.chunk_frames);
  PseudoContextReport r;
  std::size_t n = 0;
  std::vector<double> full, alone;
  for (std::size_t k = 0; k < heldout.size(); ++k) {
    const auto& c = codes[k];
    if (c.size() > masked) {
      const std::size_t skip = c.size() + 1 > lm.cfg.max_context ? c.size() + 1 - lm.cfg.max_context : 0;
      std::vector<std::size_t> seq{lm.cfg.bos()};
      seq.insert(seq.end(), c.begin() + long(skip), c.end());
      auto logits = lm.forward(seq).value();
      for (std::size_t t = c.size() - masked; t < c.size(); ++t) {
        r.lm_nll -= log_softmax_row(logits.row(t - skip), lm.cfg.vocab)[c[t]];
        r.unigram_nll -= uni[c[t]];
        ++n;
      }
    }
    const auto& u = utts[heldout[k]];
    const std::size_t target = (u.speaker + 3) % am.cfg.speakers;  // cross-speaker conversion
    auto ref = offline_convert(am, u.mel, target, 0).mel;
    SessionConfig sa = base, fu = base;
    sa.mode = Mode::standalone;
    fu.mode = Mode::full;
    sa.speaker = fu.speaker = target;
    StreamSession a(am, nullptr, sa), f(am, &lm, fu);
    a.push_mel(u.mel);
    a.flush();
    f.push_mel(u.mel);
    f.flush();
    alone.push_back(mean_squared_error(a.converted_mel(), ref));
    full.push_back(mean_squared_error(f.converted_mel(), ref));
    r.full_wins += full.back() <= alone.back();
  }
  if (n) {
    r.lm_nll /= double(n);
    r.unigram_nll /= double(n);
  }
  r.utterances = heldout.size();
  r.median_full = median(full);
  r.median_standalone = median(alone);
  return r;
}

}  // namespace dvc3
