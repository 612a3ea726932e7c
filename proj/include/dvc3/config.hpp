#pragma once

#include <filesystem>
#include <set>
#include <stdexcept>
#include <string>

#include "dvc3/acoustic_model.hpp"
#include "dvc3/checkpoint.hpp"
#include "dvc3/context_lm.hpp"
#include "dvc3/kvfile.hpp"

namespace dvc3 {

// ---------------------------------------------------------------------------
// Model presets

struct Preset {
  AcousticConfig am;
  LmConfig lm;
};

inline Preset toy_preset() {
  Preset p;
  p.am.encoder = {4, 64, 4, 7, 2};
  p.am.decoder = p.am.encoder;
  p.lm = {2, 4, 64, 128, p.am.vocab + 1, 256};
  return p;
}

inline Preset large_preset() {
  Preset p;
  p.am.encoder = {6, 256, 4, 15, 2};
  p.am.decoder = p.am.encoder;
  p.lm = {4, 8, 512, 1024, p.am.vocab + 1, 256};
  return p;
}

inline Preset preset_by_name(const std::string& name) {
  if (name == "toy") return toy_preset();
  if (name == "large") return large_preset();
  throw std::invalid_argument("unknown preset '" + name + "' (expected toy or large)");
}

// ---------------------------------------------------------------------------
// Run configuration: key=value, unknown keys rejected.

struct RunConfig {
  std::string preset = "toy";
  std::uint64_t seed = 1;
  std::string corpus = "corpus";
  std::string am_checkpoint = "am.ckpt";
  std::string lm_checkpoint = "lm.ckpt";
  std::string loss_log = "";  // default: <checkpoint>.log.tsv
  // acoustic training
  double loss_alpha = 45.0, loss_beta = 1.0, loss_gamma = 10.0;
  std::size_t am_steps = 600;
  std::size_t am_batch = 4;
  double am_lr = 1e-3;
  std::size_t am_workers = 1;
  std::string am_tokens = "ground_truth";  // or kmeans
  std::size_t log_every = 50;
  // language model
  std::size_t lm_steps = 400;
  std::size_t lm_batch = 8;
  double lm_lr = 1e-3;
  // streaming
  std::size_t chunk_frames = 2;
  std::size_t pseudo_codes = 2;
  std::size_t max_history = 64;
  std::string sampling = "greedy";  // or top_k
  std::size_t top_k = 10;

  static const std::set<std::string>& keys() {
    static const std::set<std::string> k{"preset",     "seed",         "corpus",       "am_checkpoint", "lm_checkpoint",
                                         "loss_log",   "loss_alpha",   "loss_beta",    "loss_gamma",    "am_steps",
                                         "am_batch",   "am_lr",        "am_workers",   "am_tokens",     "log_every",
                                         "lm_steps",   "lm_batch",     "lm_lr",        "chunk_frames",  "pseudo_codes",
                                         "max_history", "sampling",    "top_k"};
    return k;
  }

  void validate() const {
    preset_by_name(preset);
    if (am_tokens != "ground_truth" && am_tokens != "kmeans")
      throw std::invalid_argument("am_tokens: expected ground_truth or kmeans");
    if (sampling != "greedy" && sampling != "top_k") throw std::invalid_argument("sampling: expected greedy or top_k");
    if (am_batch == 0 || lm_batch == 0) throw std::invalid_argument("batch sizes must be positive");
    if (chunk_frames == 0) throw std::invalid_argument("chunk_frames must be positive");
    if (top_k == 0) throw std::invalid_argument("top_k must be positive");
    if (!(am_lr > 0) || !(lm_lr > 0)) throw std::invalid_argument("learning rates must be positive");
  }

  kv::Map to_kv() const {
    return {{"preset", preset},
            {"seed", kv::str(seed)},
            {"corpus", corpus},
            {"am_checkpoint", am_checkpoint},
            {"lm_checkpoint", lm_checkpoint},
            {"loss_log", loss_log},
            {"loss_alpha", kv::str(loss_alpha)},
            {"loss_beta", kv::str(loss_beta)},
            {"loss_gamma", kv::str(loss_gamma)},
            {"am_steps", kv::str(am_steps)},
            {"am_batch", kv::str(am_batch)},
            {"am_lr", kv::str(am_lr)},
            {"am_workers", kv::str(am_workers)},
            {"am_tokens", am_tokens},
            {"log_every", kv::str(log_every)},
            {"lm_steps", kv::str(lm_steps)},
            {"lm_batch", kv::str(lm_batch)},
            {"lm_lr", kv::str(lm_lr)},
            {"chunk_frames", kv::str(chunk_frames)},
            {"pseudo_codes", kv::str(pseudo_codes)},
            {"max_history", kv::str(max_history)},
            {"sampling", sampling},
            {"top_k", kv::str(top_k)}};
  }

  static RunConfig from_kv(const kv::Map& m) {
    for (const auto& [k, v] : m)
      if (!keys().count(k)) throw std::invalid_argument("unknown config key '" + k + "'");
    RunConfig c;
    c.preset = kv::get(m, "preset", c.preset);
    c.seed = kv::get(m, "seed", c.seed);
    c.corpus = kv::get(m, "corpus", c.corpus);
    c.am_checkpoint = kv::get(m, "am_checkpoint", c.am_checkpoint);
    c.lm_checkpoint = kv::get(m, "lm_checkpoint", c.lm_checkpoint);
    c.loss_log = kv::get(m, "loss_log", c.loss_log);
    c.loss_alpha = kv::get(m, "loss_alpha", c.loss_alpha);
    c.loss_beta = kv::get(m, "loss_beta", c.loss_beta);
    c.loss_gamma = kv::get(m, "loss_gamma", c.loss_gamma);
    c.am_steps = kv::get(m, "am_steps", c.am_steps);
    c.am_batch = kv::get(m, "am_batch", c.am_batch);
    c.am_lr = kv::get(m, "am_lr", c.am_lr);
    c.am_workers = kv::get(m, "am_workers", c.am_workers);
    c.am_tokens = kv::get(m, "am_tokens", c.am_tokens);
    c.log_every = kv::get(m, "log_every", c.log_every);
    c.lm_steps = kv::get(m, "lm_steps", c.lm_steps);
    c.lm_batch = kv::get(m, "lm_batch", c.lm_batch);
    c.lm_lr = kv::get(m, "lm_lr", c.lm_lr);
    c.chunk_frames = kv::get(m, "chunk_frames", c.chunk_frames);
    c.pseudo_codes = kv::get(m, "pseudo_codes", c.pseudo_codes);
    c.max_history = kv::get(m, "max_history", c.max_history);
    c.sampling = kv::get(m, "sampling", c.sampling);
    c.top_k = kv::get(m, "top_k", c.top_k);
    c.validate();
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) { return from_kv(kv::read(path)); }

  LossWeights weights() const { return {loss_alpha, loss_beta, loss_gamma}; }

  SamplingConfig sampling_config() const {
    SamplingConfig s;
    s.mode = sampling == "greedy" ? SamplingConfig::Mode::greedy : SamplingConfig::Mode::top_k;
    s.k = top_k;
    s.seed = seed;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Model config sidecars ("<checkpoint>.cfg")

inline void put_conformer(kv::Map& m, const std::string& p, const ConformerConfig& c) {
  m[p + ".blocks"] = kv::str(c.num_blocks);
  m[p + ".dim"] = kv::str(c.dim);
  m[p + ".heads"] = kv::str(c.heads);
  m[p + ".conv_kernel"] = kv::str(c.conv_kernel);
  m[p + ".ffn_expansion"] = kv::str(c.ffn_expansion);
}

inline ConformerConfig get_conformer(const kv::Map& m, const std::string& p) {
  ConformerConfig c;
  c.num_blocks = kv::get(m, p + ".blocks", c.num_blocks);
  c.dim = kv::get(m, p + ".dim", c.dim);
  c.heads = kv::get(m, p + ".heads", c.heads);
  c.conv_kernel = kv::get(m, p + ".conv_kernel", c.conv_kernel);
  c.ffn_expansion = kv::get(m, p + ".ffn_expansion", c.ffn_expansion);
  return c;
}

inline kv::Map to_kv(const AcousticConfig& c) {
  kv::Map m{{"kind", "acoustic"},
            {"mel_bins", kv::str(c.mel_bins)},
            {"vocab", kv::str(c.vocab)},
            {"downsample", kv::str(c.downsample)},
            {"speakers", kv::str(c.speakers)},
            {"speaker_dim", kv::str(c.speaker_dim)},
            {"hpc_shift", kv::str(c.hpc_shift)},
            {"hpc_negatives", kv::str(c.hpc_negatives)}};
  put_conformer(m, "encoder", c.encoder);
  put_conformer(m, "decoder", c.decoder);
  return m;
}

inline AcousticConfig acoustic_config_from_kv(const kv::Map& m) {
  if (kv::get<std::string>(m, "kind", "") != "acoustic") throw std::runtime_error("config sidecar is not an acoustic model");
  AcousticConfig c;
  c.mel_bins = kv::get(m, "mel_bins", c.mel_bins);
  c.vocab = kv::get(m, "vocab", c.vocab);
  c.downsample = kv::get(m, "downsample", c.downsample);
  c.speakers = kv::get(m, "speakers", c.speakers);
  c.speaker_dim = kv::get(m, "speaker_dim", c.speaker_dim);
  c.hpc_shift = kv::get(m, "hpc_shift", c.hpc_shift);
  c.hpc_negatives = kv::get(m, "hpc_negatives", c.hpc_negatives);
  c.encoder = get_conformer(m, "encoder");
  c.decoder = get_conformer(m, "decoder");
  c.validate();
  return c;
}

inline kv::Map to_kv(const LmConfig& c) {
  return {{"kind", "lm"},
          {"layers", kv::str(c.layers)},
          {"heads", kv::str(c.heads)},
          {"hidden", kv::str(c.hidden)},
          {"intermediate", kv::str(c.intermediate)},
          {"vocab", kv::str(c.vocab)},
          {"max_context", kv::str(c.max_context)}};
}

inline LmConfig lm_config_from_kv(const kv::Map& m) {
  if (kv::get<std::string>(m, "kind", "") != "lm") throw std::runtime_error("config sidecar is not a language model");
  LmConfig c;
  c.layers = kv::get(m, "layers", c.layers);
  c.heads = kv::get(m, "heads", c.heads);
  c.hidden = kv::get(m, "hidden", c.hidden);
  c.intermediate = kv::get(m, "intermediate", c.intermediate);
  c.vocab = kv::get(m, "vocab", c.vocab);
  c.max_context = kv::get(m, "max_context", c.max_context);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint files with sidecar and training step

struct MissingModel : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::filesystem::path sidecar_path(const std::filesystem::path& ckpt) {
  return std::filesystem::path(ckpt.string() + ".cfg");
}

template <typename Model>
void save_model(const std::filesystem::path& path, Model& model, long step) {
  auto params = model.parameters();
  save_checkpoint_file(path, parameters_to_entries<float>(params, true));
  kv::Map m = to_kv(model.cfg);
  m["step"] = kv::str(step);
  kv::write(sidecar_path(path), m);
}

template <typename Model>
struct Loaded {
  Model model;
  long step = 0;
};

namespace detail {
inline kv::Map read_sidecar(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingModel("model checkpoint not found: " + path.string());
  if (!std::filesystem::exists(sidecar_path(path)))
    throw MissingModel("model config not found: " + sidecar_path(path).string());
  return kv::read(sidecar_path(path));
}
}  // namespace detail

inline Loaded<AcousticModel<float>> load_acoustic_model(const std::filesystem::path& path) {
  const auto m = detail::read_sidecar(path);
  Loaded<AcousticModel<float>> out{AcousticModel<float>(acoustic_config_from_kv(m), 0), kv::get<long>(m, "step", 0)};
  auto params = out.model.parameters();
  load_parameters<float>(params, load_checkpoint_file(path));
  return out;
}

inline Loaded<LmModel<float>> load_lm(const std::filesystem::path& path) {
  const auto m = detail::read_sidecar(path);
  Loaded<LmModel<float>> out{LmModel<float>(lm_config_from_kv(m), 0), kv::get<long>(m, "step", 0)};
  auto params = out.model.parameters();
  load_parameters<float>(params, load_checkpoint_file(path));
  return out;
}

}  // namespace dvc3
