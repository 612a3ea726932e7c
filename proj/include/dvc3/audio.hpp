#pragma once

#include <fftw3.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc3/binio.hpp"
#include "dvc3/tensor.hpp"

namespace dvc3 {

struct FrontendConfig {
  std::size_t sample_rate = 16000;
  std::size_t frame_length = 640;  // 40 ms
  std::size_t frame_shift = 160;   // 10 ms
  std::size_t fft_size = 1024;
  std::size_t mel_bins = 80;
  double log_floor = 1e-10;
  double fmin = 0.0;
  double fmax = 8000.0;

  void validate() const {
    if (frame_shift == 0 || frame_length <= frame_shift)
      throw std::invalid_argument("FrontendConfig: frame_length must exceed frame_shift");
    if (fft_size < frame_length) throw std::invalid_argument("FrontendConfig: fft_size must cover frame_length");
    if (mel_bins == 0) throw std::invalid_argument("FrontendConfig: mel_bins must be positive");
    if (fmax > sample_rate / 2.0 || fmin >= fmax) throw std::invalid_argument("FrontendConfig: bad mel range");
  }

  std::size_t spectrum_bins() const { return fft_size / 2 + 1; }
  std::size_t frames_for(std::size_t samples) const {
    return samples < frame_length ? 0 : (samples - frame_length) / frame_shift + 1;
  }
  std::size_t samples_for(std::size_t frames) const {
    return frames == 0 ? 0 : (frames - 1) * frame_shift + frame_length;
  }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Symmetric Hann window of length n.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  const double pi = std::acos(-1.0);
  for (std::size_t i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * pi * double(i) / double(n - 1));
  return w;
}

// HTK triangular filters with unit peak, F x (fft_size/2 + 1).
struct MelFilterbank {
  Tensor<double> weights;
  std::vector<double> centers_hz;
};

inline MelFilterbank mel_filterbank(const FrontendConfig& cfg) {
  cfg.validate();
  const std::size_t f = cfg.mel_bins, k = cfg.spectrum_bins();
  const double lo = hz_to_mel(cfg.fmin), hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(f + 2);
  for (std::size_t i = 0; i < f + 2; ++i) edges[i] = mel_to_hz(lo + (hi - lo) * double(i) / double(f + 1));
  MelFilterbank fb{Tensor<double>(f, k), {}};
  for (std::size_t m = 0; m < f; ++m) {
    const double l = edges[m], c = edges[m + 1], r = edges[m + 2];
    fb.centers_hz.push_back(c);
    for (std::size_t b = 0; b < k; ++b) {
      const double hz = double(b) * double(cfg.sample_rate) / double(cfg.fft_size);
      double w = 0;
      if (hz > l && hz <= c) w = (hz - l) / (c - l);
      else if (hz > c && hz < r) w = (r - hz) / (r - c);
      fb.weights(m, b) = w;
    }
  }
  return fb;
}

namespace detail {

// FFTW's planner is not thread-safe; execution on distinct plans is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace detail

// Real FFT of a fixed size with its own plan and aligned buffers.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    time_ = fftw_alloc_real(n);
    freq_ = fftw_alloc_complex(n / 2 + 1);
    forward_ = fftw_plan_dft_r2c_1d(int(n), time_, freq_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(int(n), freq_, time_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
    fftw_free(time_);
    fftw_free(freq_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }

  // `in` is zero-padded to n.
  void forward(std::span<const double> in, std::vector<std::complex<double>>& out) {
    std::fill(time_, time_ + n_, 0.0);
    std::copy(in.begin(), in.begin() + long(std::min(in.size(), n_)), time_);
    fftw_execute(forward_);
    out.resize(n_ / 2 + 1);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = {freq_[i][0], freq_[i][1]};
  }

  // Normalised inverse (x = ifft(X)), full length n.
  void inverse(const std::vector<std::complex<double>>& in, std::vector<double>& out) {
    for (std::size_t i = 0; i < n_ / 2 + 1; ++i) {
      freq_[i][0] = in[i].real();
      freq_[i][1] = in[i].imag();
    }
    fftw_execute(inverse_);
    out.assign(time_, time_ + n_);
    for (auto& v : out) v /= double(n_);
  }

 private:
  std::size_t n_;
  double* time_ = nullptr;
  fftw_complex* freq_ = nullptr;
  fftw_plan forward_ = nullptr, inverse_ = nullptr;
};

// ---------------------------------------------------------------------------
// Frontend

class MelFrontend {
 public:
  explicit MelFrontend(FrontendConfig cfg = {})
      : cfg_(cfg), fb_(mel_filterbank(cfg)), window_(hann_window(cfg.frame_length)), fft_(cfg.fft_size) {}

  const FrontendConfig& config() const { return cfg_; }
  const MelFilterbank& filterbank() const { return fb_; }

  // Log-mel of one frame_length window.
  void frame(std::span<const double> samples, float* out) {
    std::vector<double> buf(cfg_.frame_length);
    for (std::size_t i = 0; i < cfg_.frame_length; ++i) buf[i] = samples[i] * window_[i];
    fft_.forward(buf, spec_);
    const std::size_t k = cfg_.spectrum_bins();
    for (std::size_t m = 0; m < cfg_.mel_bins; ++m) {
      double s = 0;
      const double* w = fb_.weights.row(m);
      for (std::size_t b = 0; b < k; ++b)
        if (w[b] != 0.0) s += w[b] * std::abs(spec_[b]);
      out[m] = static_cast<float>(std::log(std::max(s, cfg_.log_floor)));
    }
  }

  // Appends samples and returns every frame whose window is now complete.
  Tensor<float> push(std::span<const double> samples) {
    pending_.insert(pending_.end(), samples.begin(), samples.end());
    const std::size_t n = cfg_.frames_for(pending_.size());
    Tensor<float> out(n, cfg_.mel_bins);
    for (std::size_t i = 0; i < n; ++i) frame(std::span<const double>(pending_).subspan(i * cfg_.frame_shift), out.row(i));
    pending_.erase(pending_.begin(), pending_.begin() + long(n * cfg_.frame_shift));
    emitted_ += n;
    return out;
  }

  Tensor<float> compute(std::span<const double> samples) {
    const std::size_t n = cfg_.frames_for(samples.size());
    Tensor<float> out(n, cfg_.mel_bins);
    for (std::size_t i = 0; i < n; ++i) frame(samples.subspan(i * cfg_.frame_shift), out.row(i));
    return out;
  }

  std::size_t frames_emitted() const { return emitted_; }
  void reset() {
    pending_.clear();
    emitted_ = 0;
  }

 private:
  FrontendConfig cfg_;
  MelFilterbank fb_;
  std::vector<double> window_;
  RealFft fft_;
  std::vector<std::complex<double>> spec_;
  std::vector<double> pending_;
  std::size_t emitted_ = 0;
};

inline Tensor<float> mel_frontend(std::span<const double> samples, const FrontendConfig& cfg = {}) {
  MelFrontend fe(cfg);
  return fe.compute(samples);
}

// ---------------------------------------------------------------------------
// Vocoder substitute: mel -> magnitude (ridge pseudo-inverse) -> Griffin-Lim.

struct VocoderConfig {
  std::size_t iterations = 8;
  double ridge = 1e-3;  // relative to mean diagonal of A A^T
};

class Vocoder {
 public:
  explicit Vocoder(FrontendConfig fc = {}, VocoderConfig vc = {})
      : fc_(fc), vc_(vc), window_(hann_window(fc.frame_length)), fft_(fc.fft_size) {
    const auto fb = mel_filterbank(fc);
    const std::size_t f = fc.mel_bins, k = fc.spectrum_bins();
    Eigen::MatrixXd a(f, k);
    for (std::size_t i = 0; i < f; ++i)
      for (std::size_t j = 0; j < k; ++j) a(long(i), long(j)) = fb.weights(i, j);
    Eigen::MatrixXd aat = a * a.transpose();
    const double lambda = vc.ridge * aat.trace() / double(f);
    aat.diagonal().array() += lambda;
    Eigen::MatrixXd p = a.transpose() * aat.ldlt().solve(Eigen::MatrixXd::Identity(long(f), long(f)));
    pinv_ = Tensor<double>(k, f);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < f; ++j) pinv_(i, j) = p(long(i), long(j));
  }

  const FrontendConfig& frontend() const { return fc_; }
  const VocoderConfig& config() const { return vc_; }

  // Non-negative linear magnitudes, T x (fft_size/2 + 1).
  Tensor<double> magnitudes(const Tensor<float>& mel) const {
    if (mel.cols() != fc_.mel_bins) throw std::invalid_argument("vocoder: mel bin count mismatch");
    const std::size_t t = mel.rows(), f = fc_.mel_bins, k = fc_.spectrum_bins();
    Tensor<double> out(t, k);
    std::vector<double> m(f);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < f; ++j) m[j] = std::exp(double(mel(i, j)));
      for (std::size_t b = 0; b < k; ++b) {
        double s = 0;
        const double* p = pinv_.row(b);
        for (std::size_t j = 0; j < f; ++j) s += p[j] * m[j];
        out(i, b) = std::max(0.0, s);
      }
    }
    return out;
  }

  // Overlap-add state for incremental synthesis: frames before `first_open`
  // are committed (fixed magnitudes and phases).
  struct Stream {
    std::vector<double> num, den;  // OLA numerator / window-square sum, absolute sample index
    std::size_t frames = 0;
  };

  // Adds frames to the stream, running Griffin-Lim on them with the already
  // committed overlap fixed. Returns the number of samples now final.
  std::size_t synthesize(Stream& st, const Tensor<double>& mags) {
    const std::size_t n = mags.rows(), hop = fc_.frame_shift, len = fc_.frame_length;
    if (n == 0) return final_samples(st);
    const std::size_t first = st.frames, end_sample = (first + n - 1) * hop + len;
    if (st.num.size() < end_sample) {
      st.num.resize(end_sample, 0.0);
      st.den.resize(end_sample, 0.0);
    }
    const std::size_t k = fc_.spectrum_bins();
    std::vector<std::vector<std::complex<double>>> spec(n, std::vector<std::complex<double>>(k));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t b = 0; b < k; ++b) spec[i][b] = {mags(i, b), 0.0};

    // Phases are referenced to the window centre, so zero phase is a pulse
    // in the middle of the frame rather than wrapped around its edges.
    const std::size_t nfft = fc_.fft_size, centre = len / 2;
    std::vector<std::vector<double>> frames(n, std::vector<double>(len));
    std::vector<double> buf;
    auto render = [&] {
      for (std::size_t i = 0; i < n; ++i) {
        fft_.inverse(spec[i], buf);
        for (std::size_t s = 0; s < len; ++s) frames[i][s] = buf[(s + nfft - centre) % nfft] * window_[s];
      }
    };
    const std::size_t base = first * hop;
    std::vector<double> num(st.num.begin() + long(base), st.num.begin() + long(end_sample));
    std::vector<double> den(st.den.begin() + long(base), st.den.begin() + long(end_sample));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < len; ++s) den[i * hop + s] += window_[s] * window_[s];

    std::vector<double> x(num.size()), seg(nfft);
    std::vector<std::complex<double>> est;
    for (std::size_t it = 0; it < vc_.iterations; ++it) {
      render();
      for (std::size_t s = 0; s < x.size(); ++s) x[s] = num[s];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < len; ++s) x[i * hop + s] += frames[i][s];
      for (std::size_t s = 0; s < x.size(); ++s) x[s] /= std::max(den[s], kDenFloor);
      for (std::size_t i = 0; i < n; ++i) {
        std::fill(seg.begin(), seg.end(), 0.0);
        for (std::size_t s = 0; s < len; ++s) seg[(s + nfft - centre) % nfft] = x[i * hop + s] * window_[s];
        fft_.forward(seg, est);
        for (std::size_t b = 0; b < k; ++b) {
          const double a = std::abs(est[b]);
          const std::complex<double> phase = a > 1e-12 ? est[b] / a : std::complex<double>(1.0, 0.0);
          spec[i][b] = mags(i, b) * phase;
        }
      }
    }
    render();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < len; ++s) {
        st.num[base + i * hop + s] += frames[i][s];
        st.den[base + i * hop + s] += window_[s] * window_[s];
      }
    st.frames += n;
    return final_samples(st);
  }

  // Samples no later frame can touch.
  std::size_t final_samples(const Stream& st) const { return st.frames * fc_.frame_shift; }

  // Normalised output for samples [begin, end).
  std::vector<double> read(const Stream& st, std::size_t begin, std::size_t end) const {
    std::vector<double> out;
    out.reserve(end - begin);
    for (std::size_t s = begin; s < end; ++s) {
      const double d = s < st.den.size() ? st.den[s] : 0.0;
      out.push_back(s < st.num.size() ? st.num[s] / std::max(d, kDenFloor) : 0.0);
    }
    return out;
  }

  // Whole-utterance synthesis; (T - 1) * shift + length samples.
  std::vector<double> synthesize(const Tensor<float>& mel) {
    Stream st;
    synthesize(st, magnitudes(mel));
    return read(st, 0, fc_.samples_for(mel.rows()));
  }

 private:
  // Keeps the window-square normalisation from amplifying the utterance edges.
  static constexpr double kDenFloor = 0.1;

  FrontendConfig fc_;
  VocoderConfig vc_;
  std::vector<double> window_;
  RealFft fft_;
  Tensor<double> pinv_;  // (fft/2+1) x F
};

// ---------------------------------------------------------------------------
// WAV (PCM 16-bit mono)

struct Wav {
  std::size_t sample_rate = 16000;
  std::vector<double> samples;  // [-1, 1]
};

inline void write_wav(const std::filesystem::path& path, const Wav& w) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  const std::uint32_t data = std::uint32_t(w.samples.size() * 2);
  f.write("RIFF", 4);
  binio::put_le<std::uint32_t>(f, 36 + data);
  f.write("WAVEfmt ", 8);
  binio::put_le<std::uint32_t>(f, 16);
  binio::put_le<std::uint16_t>(f, 1);
  binio::put_le<std::uint16_t>(f, 1);
  binio::put_le<std::uint32_t>(f, std::uint32_t(w.sample_rate));
  binio::put_le<std::uint32_t>(f, std::uint32_t(w.sample_rate * 2));
  binio::put_le<std::uint16_t>(f, 2);
  binio::put_le<std::uint16_t>(f, 16);
  f.write("data", 4);
  binio::put_le<std::uint32_t>(f, data);
  for (double s : w.samples) {
    const double c = std::clamp(s, -1.0, 32767.0 / 32768.0);
    binio::put_le<std::uint16_t>(f, std::uint16_t(std::int16_t(std::lround(c * 32768.0))));
  }
}

inline Wav read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  char tag[4];
  auto expect = [&](const char* want) {
    if (!f.read(tag, 4) || std::string(tag, 4) != want)
      throw std::runtime_error(path.string() + ": not a RIFF/WAVE file");
  };
  expect("RIFF");
  binio::get_le<std::uint32_t>(f);
  expect("WAVE");
  Wav w;
  bool have_fmt = false;
  while (f.read(tag, 4)) {
    const std::string id(tag, 4);
    const std::uint32_t size = binio::get_le<std::uint32_t>(f);
    if (id == "fmt ") {
      const auto format = binio::get_le<std::uint16_t>(f);
      const auto channels = binio::get_le<std::uint16_t>(f);
      w.sample_rate = binio::get_le<std::uint32_t>(f);
      binio::get_le<std::uint32_t>(f);
      binio::get_le<std::uint16_t>(f);
      const auto bits = binio::get_le<std::uint16_t>(f);
      if (format != 1 || channels != 1 || bits != 16)
        throw std::runtime_error(path.string() + ": only 16-bit mono PCM is supported");
      f.ignore(long(size) - 16);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw std::runtime_error(path.string() + ": data before fmt chunk");
      w.samples.resize(size / 2);
      for (auto& s : w.samples) s = double(std::int16_t(binio::get_le<std::uint16_t>(f))) / 32768.0;
      return w;
    } else {
      f.ignore(long(size + (size & 1)));
    }
  }
  throw std::runtime_error(path.string() + ": no data chunk");
}

}  // namespace dvc3
