#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc3/acoustic_model.hpp"
#include "dvc3/audio.hpp"
#include "dvc3/binio.hpp"
#include "dvc3/context_lm.hpp"

namespace dvc3 {

enum class Mode { full, standalone };

inline const char* mode_name(Mode m) { return m == Mode::full ? "full" : "standalone"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "full") return Mode::full;
  if (s == "standalone" || s == "stand-alone") return Mode::standalone;
  throw std::invalid_argument("unknown mode '" + s + "' (expected full or standalone)");
}

struct SessionConfig {
  Mode mode = Mode::standalone;
  std::size_t chunk_frames = 2;   // 20 ms
  std::size_t pseudo_codes = 2;   // full mode only
  std::size_t max_history = 64;   // attention cache horizon, frames
  std::size_t speaker = 0;
  std::size_t crossfade_samples = 320;
  SamplingConfig sampling;
  float pseudo_mel_offset = 0.0f;  // instrumentation: shifts vocoded pseudo frames only
};

// Offline conversion with the mask a streaming session of the same settings
// observes. chunk_frames = 0 gives full-context conversion.
inline AcousticModel<float>::Conversion offline_convert(const AcousticModel<float>& am, const Tensor<float>& mel,
                                                        std::size_t speaker, std::size_t chunk_frames,
                                                        std::size_t max_history = 64) {
  return am.convert(mel, speaker, make_chunk_mask(mel.rows(), chunk_frames, max_history));
}

class StreamSession {
 public:
  struct Emission {
    std::size_t begin = 0, end = 0;  // absolute sample range
    std::size_t crossfaded = 0;      // leading samples mixed with a pseudo tail
  };

  StreamSession(const AcousticModel<float>& am, const LmModel<float>* lm, SessionConfig cfg,
                FrontendConfig fc = {}, VocoderConfig vc = {})
      : am_(am),
        cfg_(cfg),
        frontend_(fc),
        vocoder_(fc, vc),
        enc_caches_(am.encoder.make_caches(cfg.max_history)),
        dec_caches_(am.decoder.make_caches(cfg.max_history)),
        rng_(cfg.sampling.seed) {
    if (cfg.chunk_frames == 0) throw std::invalid_argument("session: chunk_frames must be positive");
    if (fc.mel_bins != am.cfg.mel_bins) throw std::invalid_argument("session: frontend and model mel bins differ");
    if (cfg.mode == Mode::full) {
      if (!lm) throw std::invalid_argument("session: full mode needs a language model");
      if (cfg.chunk_frames % am.cfg.downsample != 0)
        throw std::invalid_argument("session: full mode needs chunk_frames divisible by the downsample factor");
      if (lm->cfg.codes() != am.cfg.vocab) throw std::invalid_argument("session: LM and acoustic vocabularies differ");
      cfg_.sampling.validate();
      lm_.emplace(*lm);
    }
  }

  // 16 kHz samples in [-1, 1]; returns newly final converted samples.
  std::vector<double> push(std::span<const double> pcm) {
    check_open();
    ingested_ += pcm.size();
    Tensor<float> frames = frontend_.push(pcm);
    return accept(frames, false);
  }

  // Bypasses the frontend.
  std::vector<double> push_mel(const Tensor<float>& frames) {
    check_open();
    if (frames.rows() && frames.cols() != am_.cfg.mel_bins) throw std::invalid_argument("push_mel: bin count mismatch");
    mel_ingested_ += frames.rows();
    ingested_ = frontend_.config().samples_for(mel_ingested_);
    return accept(frames, false);
  }

  // Processes partial chunks and windows and emits the remaining tail.
  std::vector<double> flush() {
    check_open();
    closed_ = true;
    return accept(Tensor<float>(0, am_.cfg.mel_bins), true);
  }

  bool closed() const { return closed_; }
  std::size_t samples_ingested() const { return ingested_; }
  std::size_t samples_emitted() const { return emitted_; }
  const std::vector<std::size_t>& codes() const { return codes_; }
  const std::vector<Emission>& emissions() const { return emissions_; }
  const std::vector<double>& chunk_seconds() const { return chunk_seconds_; }
  const SessionConfig& config() const { return cfg_; }

  Tensor<float> converted_mel() const {
    const std::size_t f = am_.cfg.mel_bins;
    return Tensor<float>({mel_out_.size() / f, f}, mel_out_);
  }

 private:
  void check_open() const {
    if (closed_) throw std::logic_error("session: push after flush");
  }

  static void append_rows(std::vector<float>& buf, const Tensor<float>& t) {
    buf.insert(buf.end(), t.values().begin(), t.values().end());
  }

  static Tensor<float> take_rows(std::vector<float>& buf, std::size_t rows, std::size_t cols) {
    Tensor<float> out(rows, cols);
    std::copy(buf.begin(), buf.begin() + long(rows * cols), out.data());
    buf.erase(buf.begin(), buf.begin() + long(rows * cols));
    return out;
  }

  std::vector<double> accept(const Tensor<float>& frames, bool final) {
    NoGradGuard ng;
    const std::size_t f = am_.cfg.mel_bins, d = am_.cfg.encoder.dim, c = cfg_.chunk_frames, r = am_.cfg.downsample;
    append_rows(enc_pending_, frames);
    std::vector<double> out;
    for (;;) {
      const std::size_t pending = enc_pending_.size() / f;
      const bool partial = final && pending > 0 && pending < c;
      if (pending < c && !partial) break;
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t rows = std::min(pending, c);
      Tensor<float> x = am_.in_proj(constant(take_rows(enc_pending_, rows, f))).value();
      append_rows(pool_, am_.encoder.forward_streaming(x, enc_caches_, rows));
      encoded_ += rows;
      pool_windows(final && enc_pending_.empty());
      const bool ran = decode_available(final && enc_pending_.empty(), out);
      if (ran) {
        chunk_seconds_.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
      }
    }
    if (final) {
      pool_windows(true);
      decode_available(true, out);
      const std::size_t total = frontend_.config().samples_for(vocoder_stream_.frames);
      emit(vocoder_.read(vocoder_stream_, emitted_, total), out);
    }
    (void)d;
    (void)r;
    return out;
  }

  void pool_windows(bool final) {
    const std::size_t d = am_.cfg.encoder.dim, r = am_.cfg.downsample;
    while (pool_.size() / d >= r || (final && !pool_.empty())) {
      const std::size_t rows = std::min(r, pool_.size() / d);
      Tensor<float> window = take_rows(pool_, rows, d);
      Tensor<float> zp = am_.downsample_project(constant(window)).value();
      const std::size_t code = argmax_rows(zp)[0];
      codes_.push_back(code);
      if (lm_) lm_->push(code);
    }
  }

  bool decode_available(bool final, std::vector<double>& out) {
    const std::size_t c = cfg_.chunk_frames, r = am_.cfg.downsample;
    bool ran = false;
    for (;;) {
      const std::size_t avail = std::min(encoded_, codes_.size() * r);
      const std::size_t left = avail - decoded_;
      if (left == 0 || (left < c && !final)) break;
      const std::size_t rows = std::min(left, c);
      std::vector<std::size_t> frame_codes;
      for (std::size_t t = decoded_; t < decoded_ + rows; ++t) frame_codes.push_back(codes_[t / r]);

      std::vector<std::size_t> pseudo_codes;
      if (lm_ && rows == c) {
        auto pc = lm_->pseudo(cfg_.pseudo_codes, cfg_.sampling, rng_);
        for (auto code : pc.codes)
          for (std::size_t k = 0; k < r; ++k) pseudo_codes.push_back(code);
      }
      std::vector<std::size_t> all = frame_codes;
      all.insert(all.end(), pseudo_codes.begin(), pseudo_codes.end());
      Tensor<float> din = am_.decoder_frames(all, cfg_.speaker);
      Tensor<float> h = am_.decoder.forward_streaming(din, dec_caches_, rows);
      Tensor<float> mel = am_.out_proj(constant(h)).value();
      decoded_ += rows;
      ran = true;

      Tensor<float> real(rows, mel.cols()), pseudo(all.size() - rows, mel.cols());
      std::copy(mel.data(), mel.data() + real.size(), real.data());
      std::copy(mel.data() + real.size(), mel.data() + mel.size(), pseudo.data());
      for (auto& v : pseudo.values()) v += cfg_.pseudo_mel_offset;
      append_rows(mel_out_, real);
      vocode(real, pseudo, out);
    }
    return ran;
  }

  void vocode(const Tensor<float>& real, const Tensor<float>& pseudo, std::vector<double>& out) {
    const std::size_t ready = vocoder_.synthesize(vocoder_stream_, vocoder_.magnitudes(real));
    emit(vocoder_.read(vocoder_stream_, emitted_, ready), out);
    tail_.clear();
    if (pseudo.rows() > 0) {
      Vocoder::Stream scratch = vocoder_stream_;
      vocoder_.synthesize(scratch, vocoder_.magnitudes(pseudo));
      tail_start_ = ready;
      tail_ = vocoder_.read(scratch, ready, ready + cfg_.crossfade_samples);
    }
  }

  // Appends final samples, cross-fading the head with the pending pseudo tail.
  void emit(std::vector<double> samples, std::vector<double>& out) {
    if (samples.empty()) return;
    Emission e{emitted_, emitted_ + samples.size(), 0};
    if (!tail_.empty() && tail_start_ == emitted_) {
      const std::size_t n = std::min(tail_.size(), samples.size());
      for (std::size_t i = 0; i < n; ++i) {
        const double a = (double(i) + 0.5) / double(tail_.size());
        samples[i] = (1.0 - a) * tail_[i] + a * samples[i];
      }
      e.crossfaded = n;
      tail_.erase(tail_.begin(), tail_.begin() + long(n));
      tail_start_ += n;
    }
    emitted_ += samples.size();
    emissions_.push_back(e);
    out.insert(out.end(), samples.begin(), samples.end());
  }

  const AcousticModel<float>& am_;
  SessionConfig cfg_;
  MelFrontend frontend_;
  Vocoder vocoder_;
  Vocoder::Stream vocoder_stream_;
  std::vector<LayerCache<float>> enc_caches_, dec_caches_;
  std::optional<LmContext<float>> lm_;
  Rng rng_;

  std::vector<float> enc_pending_;  // mel frames awaiting a full chunk
  std::vector<float> pool_;         // encoder outputs awaiting a full window
  std::vector<std::size_t> codes_;
  std::vector<float> mel_out_;
  std::size_t encoded_ = 0, decoded_ = 0;
  std::size_t ingested_ = 0, mel_ingested_ = 0, emitted_ = 0;
  std::vector<double> tail_;
  std::size_t tail_start_ = 0;
  std::vector<Emission> emissions_;
  std::vector<double> chunk_seconds_;
  bool closed_ = false;
};

// Convenience: run a whole signal through a session in 20 ms pushes.
inline std::vector<double> stream_convert(StreamSession& s, std::span<const double> pcm, std::size_t push_samples) {
  std::vector<double> out;
  for (std::size_t i = 0; i < pcm.size(); i += push_samples) {
    auto part = s.push(pcm.subspan(i, std::min(push_samples, pcm.size() - i)));
    out.insert(out.end(), part.begin(), part.end());
  }
  auto tail = s.flush();
  out.insert(out.end(), tail.begin(), tail.end());
  return out;
}

// ---------------------------------------------------------------------------
// Latency accounting

struct LatencyReport {
  std::string mode;
  double inference_ms = 0, chunk_wait_ms = 0, lookahead_ms = 0, total_ms = 0;
  double rtf = 0;
  double params_m = 0;
  std::size_t chunks = 0;

  std::string to_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "mode=" << mode << '\n'
       << "chunks=" << chunks << '\n'
       << "inference_ms=" << inference_ms << '\n'
       << "chunk_wait_ms=" << chunk_wait_ms << '\n'
       << "lookahead_ms=" << lookahead_ms << '\n'
       << "total_ms=" << total_ms << '\n'
       << "rtf=" << rtf << '\n'
       << "params_m=" << params_m << '\n';
    return os.str();
  }
};

inline double lookahead_ms(const FrontendConfig& fc, std::size_t crossfade_samples) {
  const double per_ms = double(fc.sample_rate) / 1000.0;
  const double overhang = double(fc.frame_length - 2 * fc.frame_shift) / per_ms;
  return std::max(overhang, double(crossfade_samples) / per_ms);
}

inline LatencyReport make_latency_report(Mode mode, double inference_ms, std::size_t chunks,
                                         std::size_t chunk_frames, const FrontendConfig& fc,
                                         std::size_t crossfade_samples, double params_m) {
  LatencyReport r;
  r.mode = mode_name(mode);
  r.chunks = chunks;
  r.inference_ms = inference_ms;
  r.chunk_wait_ms = double(chunk_frames * fc.frame_shift) * 1000.0 / double(fc.sample_rate);
  r.lookahead_ms = lookahead_ms(fc, crossfade_samples);
  r.total_ms = r.inference_ms + r.chunk_wait_ms + r.lookahead_ms;
  r.rtf = r.inference_ms / r.chunk_wait_ms;
  r.params_m = params_m;
  return r;
}

// Mean wall-clock per processed chunk (first chunk excluded as warm-up).
inline LatencyReport measure_latency(const AcousticModel<float>& am, const LmModel<float>* lm, const SessionConfig& cfg,
                                     std::span<const double> pcm, double params_m, FrontendConfig fc = {}) {
  StreamSession s(am, lm, cfg, fc);
  stream_convert(s, pcm, cfg.chunk_frames * fc.frame_shift);
  const auto& t = s.chunk_seconds();
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 1; i < t.size(); ++i, ++n) sum += t[i];
  const double inference_ms = n ? 1000.0 * sum / double(n) : 0.0;
  return make_latency_report(cfg.mode, inference_ms, n, cfg.chunk_frames, fc, cfg.crossfade_samples, params_m);
}

// ---------------------------------------------------------------------------
// Token wire: "DVC3WIRE" | version u8 | vocab u16 | rate_hz u16 | one byte per token

inline constexpr std::string_view kWireMagic = "DVC3WIRE";
inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kWireHeaderBytes = 8 + 1 + 2 + 2;

struct TokenWire {
  std::size_t vocab = 0;
  std::size_t rate_hz = 0;
  std::vector<std::size_t> codes;
};

inline std::vector<std::uint8_t> wire_encode(const std::vector<std::size_t>& codes, std::size_t vocab,
                                             std::size_t rate_hz) {
  if (vocab == 0 || vocab > 256) throw std::invalid_argument("wire_encode: vocab must be in [1, 256]");
  if (rate_hz > 0xFFFF) throw std::invalid_argument("wire_encode: rate does not fit u16");
  std::vector<std::uint8_t> out(kWireMagic.begin(), kWireMagic.end());
  out.push_back(kWireVersion);
  out.push_back(std::uint8_t(vocab & 0xFF));
  out.push_back(std::uint8_t(vocab >> 8));
  out.push_back(std::uint8_t(rate_hz & 0xFF));
  out.push_back(std::uint8_t(rate_hz >> 8));
  for (auto c : codes) {
    if (c >= vocab) throw std::out_of_range("wire_encode: code " + std::to_string(c) + " outside vocabulary");
    out.push_back(std::uint8_t(c));
  }
  return out;
}

inline TokenWire wire_decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kWireHeaderBytes) throw std::runtime_error("wire_decode: truncated header");
  if (!std::equal(kWireMagic.begin(), kWireMagic.end(), bytes.begin())) throw std::runtime_error("wire_decode: bad magic");
  if (bytes[8] != kWireVersion) throw std::runtime_error("wire_decode: unsupported version " + std::to_string(bytes[8]));
  TokenWire w;
  w.vocab = std::size_t(bytes[9]) | (std::size_t(bytes[10]) << 8);
  w.rate_hz = std::size_t(bytes[11]) | (std::size_t(bytes[12]) << 8);
  if (w.vocab == 0 || w.vocab > 256) throw std::runtime_error("wire_decode: bad vocabulary size");
  for (std::size_t i = kWireHeaderBytes; i < bytes.size(); ++i) {
    if (bytes[i] >= w.vocab) throw std::runtime_error("wire_decode: code outside vocabulary");
    w.codes.push_back(bytes[i]);
  }
  return w;
}

inline constexpr std::size_t kWireBitsPerToken = 8;
inline double wire_bitrate_bps(std::size_t rate_hz) { return double(rate_hz * kWireBitsPerToken); }
inline double pcm_bitrate_bps(std::size_t sample_rate = 16000, std::size_t bits = 16) {
  return double(sample_rate * bits);
}

}  // namespace dvc3
