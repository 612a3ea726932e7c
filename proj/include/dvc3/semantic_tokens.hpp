#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvc3/binio.hpp"
#include "dvc3/kvfile.hpp"
#include "dvc3/nn.hpp"

namespace dvc3 {

// ---------------------------------------------------------------------------
// K-means tokenizer

struct KMeansModel {
  Tensor<double> centroids;            // K x dim
  std::vector<double> inertia_history; // after every assignment pass
  std::size_t iterations = 0;

  std::size_t k() const { return centroids.rows(); }
  std::size_t dim() const { return centroids.cols(); }
  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

inline std::size_t nearest(const Tensor<double>& c, const double* x, double* best_d = nullptr) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < c.rows(); ++k) {
    const double d = sq_dist(c.row(k), x, c.cols());
    if (d < bd) {
      bd = d;
      best = k;
    }
  }
  if (best_d) *best_d = bd;
  return best;
}

}  // namespace detail

// k-means++ seeding.
inline Tensor<double> kmeans_plus_plus(const Tensor<double>& x, std::size_t k, std::uint64_t seed) {
  const std::size_t m = x.rows(), d = x.cols();
  Rng rng(seed);
  Tensor<double> c(k, d);
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
  std::copy(x.row(first), x.row(first) + d, c.row(0));
  std::vector<double> dist(m);
  for (std::size_t i = 0; i < m; ++i) dist[i] = detail::sq_dist(x.row(i), c.row(0), d);
  for (std::size_t j = 1; j < k; ++j) {
    double total = 0;
    for (double v : dist) total += v;
    std::size_t pick = 0;
    if (total > 0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < m; ++pick) {
        if (u < dist[pick]) break;
        u -= dist[pick];
      }
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
    }
    std::copy(x.row(pick), x.row(pick) + d, c.row(j));
    for (std::size_t i = 0; i < m; ++i) dist[i] = std::min(dist[i], detail::sq_dist(x.row(i), c.row(j), d));
  }
  return c;
}

// Lloyd iterations from the given centres until the assignment stops
// changing. Empty clusters are moved onto the point farthest from its centre.
inline KMeansModel kmeans_lloyd(const Tensor<double>& x, Tensor<double> centroids, std::size_t max_iters) {
  const std::size_t m = x.rows(), d = x.cols(), k = centroids.rows();
  KMeansModel model;
  std::vector<std::size_t> assign(m, k);
  for (std::size_t it = 0; it < std::max<std::size_t>(1, max_iters); ++it) {
    bool changed = false;
    double inertia = 0;
    std::vector<double> dist(m);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t a = detail::nearest(centroids, x.row(i), &dist[i]);
      changed = changed || a != assign[i];
      assign[i] = a;
      inertia += dist[i];
    }
    model.inertia_history.push_back(inertia);
    model.iterations = it + 1;
    if (!changed) break;

    Tensor<double> sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      counts[assign[i]]++;
      for (std::size_t j = 0; j < d; ++j) sums(assign[i], j) += x(i, j);
    }
    std::vector<std::uint8_t> taken(m, 0);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::size_t j = 0; j < d; ++j) centroids(c, j) = sums(c, j) / double(counts[c]);
        continue;
      }
      std::size_t far = 0;
      double fd = -1;
      for (std::size_t i = 0; i < m; ++i)
        if (!taken[i] && dist[i] > fd) {
          fd = dist[i];
          far = i;
        }
      taken[far] = 1;
      dist[far] = 0;
      std::copy(x.row(far), x.row(far) + d, centroids.row(c));
    }
  }
  model.centroids = std::move(centroids);
  return model;
}

inline KMeansModel kmeans_fit(const Tensor<double>& x, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  if (k == 0) throw std::invalid_argument("kmeans_fit: K must be positive");
  if (x.rows() < k)
    throw std::invalid_argument("kmeans_fit: " + std::to_string(x.rows()) + " points for " + std::to_string(k) +
                                " clusters");
  return kmeans_lloyd(x, kmeans_plus_plus(x, k, seed), max_iters);
}

// Nearest centroid per row (Euclidean, ties to the lowest index).
inline std::vector<std::size_t> tokenize(const Tensor<double>& features, const KMeansModel& model) {
  if (features.cols() != model.dim())
    throw std::invalid_argument("tokenize: feature dim " + std::to_string(features.cols()) + " vs model " +
                                std::to_string(model.dim()));
  std::vector<std::size_t> out(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i) out[i] = detail::nearest(model.centroids, features.row(i));
  return out;
}

// Window means of r mel frames (last window may be short), optionally with
// the utterance mean removed so a constant per-speaker offset cancels.
template <typename T>
Tensor<double> pooled_features(const Tensor<T>& mel, std::size_t r, bool mean_normalize) {
  const std::size_t n = (mel.rows() + r - 1) / r, f = mel.cols();
  Tensor<double> out(n, f);
  for (std::size_t o = 0; o < n; ++o) {
    const std::size_t b = o * r, e = std::min(mel.rows(), b + r);
    for (std::size_t i = b; i < e; ++i)
      for (std::size_t j = 0; j < f; ++j) out(o, j) += mel(i, j);
    for (std::size_t j = 0; j < f; ++j) out(o, j) /= double(e - b);
  }
  if (mean_normalize && n > 0) {
    std::vector<double> mean(f, 0.0);
    for (std::size_t o = 0; o < n; ++o)
      for (std::size_t j = 0; j < f; ++j) mean[j] += out(o, j) / double(n);
    for (std::size_t o = 0; o < n; ++o)
      for (std::size_t j = 0; j < f; ++j) out(o, j) -= mean[j];
  }
  return out;
}

// Fraction of items whose cluster's majority label equals their own label.
inline double cluster_purity(const std::vector<std::size_t>& clusters, const std::vector<std::size_t>& labels) {
  if (clusters.size() != labels.size() || clusters.empty())
    throw std::invalid_argument("cluster_purity: size mismatch");
  std::map<std::size_t, std::map<std::size_t, std::size_t>> table;
  for (std::size_t i = 0; i < clusters.size(); ++i) table[clusters[i]][labels[i]]++;
  std::size_t hit = 0;
  for (const auto& [c, row] : table) {
    std::size_t best = 0;
    for (const auto& [l, n] : row) best = std::max(best, n);
    hit += best;
  }
  return double(hit) / double(clusters.size());
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct CorpusSpec {
  std::size_t num_speakers = 8;
  std::size_t utterances_per_speaker = 50;
  std::size_t token_vocab = 16;
  std::size_t mel_bins = 80;
  std::size_t downsample = 2;  // mel_rate / token_rate
  std::size_t token_rate = 50;
  std::size_t min_tokens = 20;
  std::size_t max_tokens = 40;
  double self_transition = 0.6;
  double gain_radius = 0.8;
  double tilt_radius = 0.8;
  double noise = 0.05;
  double template_smoothing = 1.0;  // Gaussian blur width in mel bins
  std::uint64_t seed = 1;

  std::size_t mel_rate() const { return token_rate * downsample; }

  void validate() const {
    if (num_speakers == 0) throw std::invalid_argument("corpus: need at least one speaker");
    if (utterances_per_speaker == 0) throw std::invalid_argument("corpus: need at least one utterance per speaker");
    if (token_vocab < 2 || token_vocab > 0xFFFF) throw std::invalid_argument("corpus: token_vocab must be in [2, 65535]");
    if (mel_bins == 0 || mel_bins > 0xFFFF) throw std::invalid_argument("corpus: mel_bins must be in [1, 65535]");
    if (downsample == 0) throw std::invalid_argument("corpus: downsample must be positive");
    if (min_tokens == 0 || min_tokens > max_tokens) throw std::invalid_argument("corpus: bad token length range");
    if (!(self_transition >= 0 && self_transition < 1)) throw std::invalid_argument("corpus: self_transition in [0,1)");
  }

  kv::Map to_kv() const {
    return {{"num_speakers", kv::str(num_speakers)},
            {"utterances_per_speaker", kv::str(utterances_per_speaker)},
            {"token_vocab", kv::str(token_vocab)},
            {"mel_bins", kv::str(mel_bins)},
            {"downsample", kv::str(downsample)},
            {"token_rate", kv::str(token_rate)},
            {"mel_rate", kv::str(mel_rate())},
            {"min_tokens", kv::str(min_tokens)},
            {"max_tokens", kv::str(max_tokens)},
            {"self_transition", kv::str(self_transition)},
            {"gain_radius", kv::str(gain_radius)},
            {"tilt_radius", kv::str(tilt_radius)},
            {"noise", kv::str(noise)},
            {"template_smoothing", kv::str(template_smoothing)},
            {"seed", kv::str(seed)}};
  }

  static CorpusSpec from_kv(const kv::Map& m) {
    CorpusSpec s;
    s.num_speakers = kv::get(m, "num_speakers", s.num_speakers);
    s.utterances_per_speaker = kv::get(m, "utterances_per_speaker", s.utterances_per_speaker);
    s.token_vocab = kv::get(m, "token_vocab", s.token_vocab);
    s.mel_bins = kv::get(m, "mel_bins", s.mel_bins);
    s.downsample = kv::get(m, "downsample", s.downsample);
    s.token_rate = kv::get(m, "token_rate", s.token_rate);
    s.min_tokens = kv::get(m, "min_tokens", s.min_tokens);
    s.max_tokens = kv::get(m, "max_tokens", s.max_tokens);
    s.self_transition = kv::get(m, "self_transition", s.self_transition);
    s.gain_radius = kv::get(m, "gain_radius", s.gain_radius);
    s.tilt_radius = kv::get(m, "tilt_radius", s.tilt_radius);
    s.noise = kv::get(m, "noise", s.noise);
    s.template_smoothing = kv::get(m, "template_smoothing", s.template_smoothing);
    s.seed = kv::get(m, "seed", s.seed);
    return s;
  }
};

struct Utterance {
  Tensor<float> mel;                // T_m x F
  std::vector<std::size_t> tokens;  // T, 0-based
  std::size_t speaker = 0;
};

struct CorpusModel {
  Tensor<double> templates;  // vocab x F
  std::vector<double> gain;  // per speaker
  std::vector<double> tilt;  // per speaker
};

// Deterministic token templates and speaker transforms for a spec.
inline CorpusModel corpus_model(const CorpusSpec& spec) {
  Rng rng(spec.seed ^ 0x5eedC0de5eedC0deULL);
  CorpusModel m;
  m.templates = Tensor<double>(spec.token_vocab, spec.mel_bins);
  std::normal_distribution<double> nd(0.0, 1.0);
  // Smooth random envelopes: white noise blurred across bins, rescaled to
  // unit variance. Neighbouring mel bins share FFT bins, so independent
  // per-bin values would not be realisable by any waveform.
  const std::size_t f = spec.mel_bins;
  const double width = spec.template_smoothing;
  for (std::size_t v = 0; v < spec.token_vocab; ++v) {
    std::vector<double> white(f), smooth(f, 0.0);
    for (auto& w : white) w = nd(rng);
    double mean = 0, var = 0;
    for (std::size_t j = 0; j < f; ++j) {
      double wsum = 0;
      for (std::size_t i = 0; i < f; ++i) {
        const double d = (double(i) - double(j)) / std::max(width, 1e-9);
        const double g = width > 0 ? std::exp(-0.5 * d * d) : double(i == j);
        smooth[j] += g * white[i];
        wsum += g;
      }
      smooth[j] /= wsum;
      mean += smooth[j] / double(f);
    }
    for (double x : smooth) var += (x - mean) * (x - mean) / double(f);
    const double sd = var > 0 ? std::sqrt(var) : 1.0;
    for (std::size_t j = 0; j < f; ++j) m.templates(v, j) = -1.0 + 0.7 * (smooth[j] - mean) / sd;
  }
  const double two_pi = 2.0 * std::acos(-1.0);
  for (std::size_t s = 0; s < spec.num_speakers; ++s) {
    const double a = two_pi * double(s) / double(spec.num_speakers);
    m.gain.push_back(spec.gain_radius * std::cos(a));
    m.tilt.push_back(spec.tilt_radius * std::sin(a));
  }
  return m;
}

inline std::vector<std::size_t> markov_tokens(std::size_t length, const CorpusSpec& spec, Rng& rng) {
  std::vector<std::size_t> out(length);
  std::uniform_int_distribution<std::size_t> any(0, spec.token_vocab - 1);
  std::uniform_int_distribution<std::size_t> other(0, spec.token_vocab - 2);
  std::bernoulli_distribution stay(spec.self_transition);
  out[0] = any(rng);
  for (std::size_t i = 1; i < length; ++i) {
    if (stay(rng)) {
      out[i] = out[i - 1];
    } else {
      const std::size_t o = other(rng);
      out[i] = o >= out[i - 1] ? o + 1 : o;
    }
  }
  return out;
}

// Utterances ordered speaker-major, reproducible from spec.seed.
inline std::vector<Utterance> generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const CorpusModel cm = corpus_model(spec);
  Rng rng(spec.seed);
  std::uniform_int_distribution<std::size_t> len(spec.min_tokens, spec.max_tokens);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t f = spec.mel_bins;
  std::vector<Utterance> out;
  for (std::size_t s = 0; s < spec.num_speakers; ++s) {
    for (std::size_t u = 0; u < spec.utterances_per_speaker; ++u) {
      Utterance utt;
      utt.speaker = s;
      utt.tokens = markov_tokens(len(rng), spec, rng);
      const std::size_t tm = utt.tokens.size() * spec.downsample;
      utt.mel = Tensor<float>(tm, f);
      for (std::size_t t = 0; t < tm; ++t) {
        const std::size_t tok = utt.tokens[t / spec.downsample];
        for (std::size_t j = 0; j < f; ++j) {
          const double ramp = f > 1 ? 2.0 * double(j) / double(f - 1) - 1.0 : 0.0;
          const double v = cm.templates(tok, j) + cm.gain[s] + cm.tilt[s] * ramp + spec.noise * nd(rng);
          utt.mel(t, j) = static_cast<float>(v);
        }
      }
      out.push_back(std::move(utt));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus files

inline constexpr std::string_view kUtteranceMagic = "DVC3UTT";

inline void write_utterance(std::ostream& os, const Utterance& u) {
  binio::put_magic(os, kUtteranceMagic);
  binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(u.speaker));
  binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(u.tokens.size()));
  binio::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(u.mel.rows()));
  binio::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(u.mel.cols()));
  for (auto t : u.tokens) binio::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(t));
  for (float v : u.mel.values()) binio::put_f32(os, v);
}

inline Utterance read_utterance(std::istream& is) {
  binio::expect_magic(is, kUtteranceMagic, "utterance");
  Utterance u;
  u.speaker = binio::get_le<std::uint32_t>(is);
  const std::size_t t = binio::get_le<std::uint32_t>(is);
  const std::size_t tm = binio::get_le<std::uint32_t>(is);
  const std::size_t f = binio::get_le<std::uint16_t>(is);
  u.tokens.resize(t);
  for (auto& v : u.tokens) v = binio::get_le<std::uint16_t>(is);
  u.mel = Tensor<float>(tm, f);
  for (auto& v : u.mel.values()) v = binio::get_f32(is);
  return u;
}

struct Corpus {
  CorpusSpec spec;
  std::vector<Utterance> utterances;
};

inline std::filesystem::path utterance_path(const std::filesystem::path& dir, std::size_t i) {
  std::ostringstream name;
  name << "utt_" << std::setw(5) << std::setfill('0') << i << ".bin";
  return dir / name.str();
}

inline void write_corpus(const std::filesystem::path& dir, const CorpusSpec& spec, const std::vector<Utterance>& utts) {
  std::filesystem::create_directories(dir);
  auto meta = spec.to_kv();
  meta["count"] = kv::str(utts.size());
  kv::write(dir / "meta.txt", meta);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    std::ofstream f(utterance_path(dir, i), std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + utterance_path(dir, i).string());
    write_utterance(f, utts[i]);
  }
}

inline Corpus read_corpus(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "meta.txt")) throw std::runtime_error("no corpus at " + dir.string());
  auto meta = kv::read(dir / "meta.txt");
  Corpus c;
  c.spec = CorpusSpec::from_kv(meta);
  const std::size_t count = kv::get<std::size_t>(meta, "count", 0);
  for (std::size_t i = 0; i < count; ++i) {
    std::ifstream f(utterance_path(dir, i), std::ios::binary);
    if (!f) throw std::runtime_error("missing " + utterance_path(dir, i).string());
    c.utterances.push_back(read_utterance(f));
  }
  return c;
}

}  // namespace dvc3
