#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dvc3/acoustic_model.hpp"
#include "dvc3/context_lm.hpp"
#include "dvc3/semantic_tokens.hpp"
#include "dvc3/stream_engine.hpp"

// Self-checks with independent oracles, used by `dvc3 verify` and the
// acceptance suite.
namespace dvc3::verify {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

// Brute-force visibility, written from the definition.
inline bool mask_oracle(std::size_t i, std::size_t j, std::size_t c, std::size_t history) {
  if (c == 0) return true;
  const std::size_t chunk = i / c;
  return j / c <= chunk && (history == 0 || j + history >= chunk * c);
}

inline Check mask_oracle_check(std::size_t max_frames = 16, std::size_t max_chunk = 8) {
  std::size_t cases = 0, bad = 0;
  for (std::size_t t = 1; t <= max_frames; ++t)
    for (std::size_t c = 0; c <= max_chunk; ++c)
      for (std::size_t h : {0u, 1u, 3u, 64u}) {
        auto m = make_chunk_mask(t, c, h);
        for (std::size_t i = 0; i < t; ++i)
          for (std::size_t j = 0; j < t; ++j) {
            ++cases;
            bad += m(i, j) != mask_oracle(i, j, c, h);
          }
      }
  return {"mask_oracle", bad == 0, std::to_string(cases) + " entries, " + std::to_string(bad) + " mismatches"};
}

// Chi-square goodness of fit: P(0) = 1/2, P(c) = 1/16 for c in 1..8.
inline Check chunk_sampler_check(std::size_t draws = 10000, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<double> hist(kMaxTrainingChunk + 1, 0.0);
  std::size_t out_of_range = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    const std::size_t c = sample_training_chunk(rng);
    if (c > kMaxTrainingChunk) {
      ++out_of_range;
      continue;
    }
    hist[c] += 1;
  }
  double chi2 = 0;
  for (std::size_t c = 0; c <= kMaxTrainingChunk; ++c) {
    const double e = double(draws) * (c == 0 ? 0.5 : 0.5 / double(kMaxTrainingChunk));
    chi2 += (hist[c] - e) * (hist[c] - e) / e;
  }
  const double critical = 20.090;  // 8 dof, alpha = 0.01
  return {"chunk_sampler", out_of_range == 0 && chi2 < critical,
          "chi2=" + fmt(chi2) + " (critical " + fmt(critical) + ", " + std::to_string(draws) + " draws)"};
}

inline AcousticConfig tiny_acoustic_config() {
  AcousticConfig c;
  c.mel_bins = 8;
  c.vocab = 6;
  c.downsample = 2;
  c.speakers = 3;
  c.speaker_dim = 4;
  c.encoder = {2, 8, 2, 3, 2};
  c.decoder = c.encoder;
  c.hpc_shift = 2;
  c.hpc_negatives = 3;
  return c;
}

inline LmConfig tiny_lm_config() {
  LmConfig c;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 8;
  c.intermediate = 12;
  c.vocab = 7;
  c.max_context = 16;
  return c;
}

// Full weighted objective (soft Gumbel path, frozen noise and negatives), 64-bit.
inline Check acoustic_gradient_check(std::uint64_t seed = 9) {
  AcousticModel<double> am(tiny_acoustic_config(), seed);
  Rng rng(seed + 1);
  auto mel = normal_init<double>(12, 8, 1.0, rng);
  std::vector<std::size_t> tokens(6);
  for (auto& t : tokens) t = rng() % 6;
  auto noise = sample_gumbel_noise<double>(6, 6, rng);
  auto mask = make_chunk_mask(12, 3);
  auto rep = grad_check(
      [&] {
        Rng neg(seed + 2);
        return am.training_loss(mel, tokens, 1, mask, noise, 1.3, LossWeights{}, neg, false).total;
      },
      am.parameters());
  const double e = rep.max_rel_error();
  return {"acoustic_gradients", e < 1e-3, "max rel error " + fmt(e)};
}

inline Check lm_gradient_check(std::uint64_t seed = 10) {
  LmModel<double> lm(tiny_lm_config(), seed);
  Rng rng(seed);
  std::normal_distribution<double> nd(1.0, 0.2);
  lm.visit([&](Parameter<double>& p) {
    if (p.name.find("gamma") != std::string::npos)
      for (auto& v : p.value.values()) v = nd(rng);
  });
  std::vector<std::size_t> seq{lm.cfg.bos(), 3, 1, 1, 4, 0, 2, 5};
  auto rep = grad_check([&] { return lm.nll(seq); }, lm.parameters());
  const double e = rep.max_rel_error();
  return {"lm_gradients", e < 1e-3, "max rel error " + fmt(e)};
}

inline Tensor<float> slice_rows(const Tensor<float>& m, std::size_t b, std::size_t n) {
  Tensor<float> out(n, m.cols());
  std::copy(m.row(b), m.row(b) + n * m.cols(), out.data());
  return out;
}

// Stand-alone session fed in 20 ms pushes vs. offline conversion with the
// matching chunk mask.
inline Check stream_equivalence_check(const AcousticModel<float>& am, const std::vector<Tensor<float>>& mels,
                                      std::size_t chunk_frames = 2, double tol = 1e-4) {
  double worst = 0;
  std::size_t code_mismatch = 0;
  for (std::size_t k = 0; k < mels.size(); ++k) {
    const auto& mel = mels[k];
    SessionConfig sc;
    sc.chunk_frames = chunk_frames;
    sc.speaker = k % am.cfg.speakers;
    StreamSession s(am, nullptr, sc);
    for (std::size_t b = 0; b < mel.rows(); b += 2) s.push_mel(slice_rows(mel, b, std::min<std::size_t>(2, mel.rows() - b)));
    s.flush();
    auto ref = offline_convert(am, mel, sc.speaker, chunk_frames, sc.max_history);
    auto got = s.converted_mel();
    if (got.shape() != ref.mel.shape()) return {"stream_equivalence", false, "length mismatch"};
    for (std::size_t i = 0; i < got.size(); ++i)
      worst = std::max(worst, std::abs(double(got.values()[i]) - double(ref.mel.values()[i])));
    code_mismatch += s.codes() != ref.codes;
  }
  return {"stream_equivalence", worst <= tol && code_mismatch == 0,
          std::to_string(mels.size()) + " utterances, max abs diff " + fmt(worst) + ", code mismatches " +
              std::to_string(code_mismatch)};
}

inline Check wire_roundtrip_check(std::size_t count = 10000, std::uint64_t seed = 1) {
  Rng rng(seed);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t vocab = 1 + rng() % 256, len = rng() % 100;
    std::vector<std::size_t> codes(len);
    for (auto& c : codes) c = rng() % vocab;
    auto w = wire_decode(wire_encode(codes, vocab, 50));
    bad += w.codes != codes || w.vocab != vocab || w.rate_hz != 50;
  }
  return {"wire_roundtrip", bad == 0, std::to_string(count) + " sequences, " + std::to_string(bad) + " mismatches"};
}

inline Check bitrate_check() {
  const double bps = wire_bitrate_bps(50), ratio = pcm_bitrate_bps() / bps;
  return {"bitrate", bps == 400.0 && ratio == 640.0, fmt(bps) + " bps, " + fmt(ratio) + "x below 16-bit pcm"};
}

inline Check latency_identity_check() {
  FrontendConfig fc;
  bool ok = true;
  for (double inf : {0.0, 0.181, 3.25, 43.58, 1.0 / 3.0}) {
    auto r = make_latency_report(Mode::full, inf, 1, 2, fc, 320, 1.0);
    ok = ok && r.total_ms == r.inference_ms + 20.0 + 20.0 && r.chunk_wait_ms == 20.0 && r.lookahead_ms == 20.0;
  }
  return {"latency_identity", ok, "total = inference + 20 + 20"};
}

// Parameters must be finite and a short conversion must produce finite mel.
inline Check model_sanity_check(AcousticModel<float>& am) {
  for (auto* p : am.parameters())
    if (!p->value.all_finite()) return {"model_sanity", false, "non-finite values in " + p->name};
  Tensor<float> mel(8, am.cfg.mel_bins, -1.0f);
  auto out = am.convert(mel, 0, make_chunk_mask(8, 2));
  return {"model_sanity", out.mel.all_finite(), "finite conversion"};
}

}  // namespace dvc3::verify
