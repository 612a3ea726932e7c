#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "dvc3/dvc3.hpp"
#include "dvc3/verify.hpp"

namespace fs = std::filesystem;
using namespace dvc3;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kMissingInput = 3, kMissingModel = 4, kVerifyFailed = 5 };

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flags shared by every command that reads a run config.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> corpus, am, lm;
};

void add_common(CLI::App* app, Common& c, bool corpus = true) {
  app->add_option("--config", c.config, "key=value run config (unknown keys are rejected)");
  app->add_option("--seed", c.seed, "override config seed");
  if (corpus) app->add_option("--corpus", c.corpus, "corpus directory");
  app->add_option("--am", c.am, "acoustic model checkpoint");
  app->add_option("--lm", c.lm, "language model checkpoint");
}

RunConfig resolve(const Common& c) {
  RunConfig rc;
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw MissingInput("config not found: " + c.config);
    rc = RunConfig::load(c.config);
  }
  if (c.seed) rc.seed = *c.seed;
  if (c.corpus) rc.corpus = *c.corpus;
  if (c.am) rc.am_checkpoint = *c.am;
  if (c.lm) rc.lm_checkpoint = *c.lm;
  rc.validate();
  return rc;
}

Corpus open_corpus(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "meta.txt")) throw MissingInput("no corpus at '" + dir + "' (run gen-data first)");
  return read_corpus(dir);
}

std::size_t heldout_per_speaker(const CorpusSpec& s) { return s.utterances_per_speaker / 10; }

Wav open_wav(const std::string& path) {
  if (!fs::exists(path)) throw MissingInput("input not found: " + path);
  auto w = read_wav(path);
  if (w.sample_rate != 16000)
    throw std::invalid_argument(path + ": expected 16 kHz audio, got " + std::to_string(w.sample_rate) + " Hz");
  return w;
}

std::size_t chunk_frames_from_ms(std::size_t ms) {
  if (ms == 0 || ms % 10 != 0) throw std::invalid_argument("--chunk-ms must be a positive multiple of 10");
  return ms / 10;
}

void write_matrix_tsv(const std::string& path, const Tensor<float>& m) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.precision(9);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) f << (j ? "\t" : "") << m(i, j);
    f << '\n';
  }
}

SessionConfig session_config(const RunConfig& rc) {
  SessionConfig sc;
  sc.chunk_frames = rc.chunk_frames;
  sc.pseudo_codes = rc.pseudo_codes;
  sc.max_history = rc.max_history;
  sc.sampling = rc.sampling_config();
  return sc;
}

// ---------------------------------------------------------------------------

struct GenDataOpts {
  std::string out = "corpus";
  CorpusSpec spec;
};

int cmd_gen_data(const GenDataOpts& o) {
  o.spec.validate();
  auto utts = generate_corpus(o.spec);
  write_corpus(o.out, o.spec, utts);
  std::size_t frames = 0;
  for (const auto& u : utts) frames += u.mel.rows();
  std::printf("wrote %zu utterances (%zu speakers, %zu mel frames) to %s\n", utts.size(), o.spec.num_speakers, frames,
              o.out.c_str());
  return kOk;
}

struct TrainAmOpts {
  Common common;
  std::optional<std::size_t> steps;
  std::string log, dump_latents;
  bool resume = false;
};

int cmd_train_am(const TrainAmOpts& o) {
  auto rc = resolve(o.common);
  auto corpus = open_corpus(rc.corpus);
  const auto& utts = corpus.utterances;
  const std::size_t steps = o.steps.value_or(rc.am_steps);

  AcousticConfig ac = preset_by_name(rc.preset).am;
  ac.mel_bins = corpus.spec.mel_bins;
  ac.downsample = corpus.spec.downsample;
  ac.speakers = corpus.spec.num_speakers;

  long start = 0;
  AcousticModel<float> am(ac, rc.seed);
  if (o.resume && fs::exists(rc.am_checkpoint)) {
    auto loaded = load_acoustic_model(rc.am_checkpoint);
    am = std::move(loaded.model);
    start = loaded.step;
    std::printf("resuming %s at step %ld\n", rc.am_checkpoint.c_str(), start);
  }

  std::vector<std::vector<std::size_t>> tokens;
  if (rc.am_tokens == "kmeans") {
    tokens = kmeans_tokens(utts, corpus.spec, rc.seed);
  } else {
    for (const auto& u : utts) tokens.push_back(u.tokens);
  }
  for (const auto& t : tokens)
    for (auto k : t)
      if (k >= am.cfg.vocab) throw std::invalid_argument("corpus token outside the model vocabulary");

  AcousticTrainConfig tc;
  tc.weights = rc.weights();
  tc.adam.lr = rc.am_lr;
  tc.total_steps = std::max<std::size_t>(rc.am_steps, std::size_t(start) + steps);
  tc.workers = rc.am_workers;
  tc.seed = rc.seed + std::uint64_t(start);
  AcousticTrainer<float> trainer(am, tc);
  trainer.optimizer().set_steps(start);

  const std::string log_path = !o.log.empty() ? o.log : !rc.loss_log.empty() ? rc.loss_log : rc.am_checkpoint + ".log.tsv";
  const bool append = start > 0 && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  if (!append) log << "step\trec\thpc\tce\ttotal\n";
  log.precision(17);

  const auto split = split_corpus(utts, heldout_per_speaker(corpus.spec));
  Rng rng(rc.seed * 7919 + std::uint64_t(start));
  train_acoustic(trainer, utts, tokens, split.train, steps, rc.am_batch, rng,
                 [&](std::size_t step, const TrainStepResult& r) {
                   log << step << '\t' << r.loss.rec << '\t' << r.loss.hpc << '\t' << r.loss.ce << '\t' << r.loss.total
                       << '\n';
                   if (rc.log_every && (step % rc.log_every == 0 || step == start + steps))
                     std::printf("step %zu  total %.4f  rec %.4f  hpc %.4f  ce %.4f  chunk %zu  tau %.3f\n", step,
                                 r.loss.total, r.loss.rec, r.loss.hpc, r.loss.ce, r.chunk, r.temperature);
                 });
  save_model(rc.am_checkpoint, am, long(trainer.steps()));
  std::printf("saved %s (step %zu), loss log %s\n", rc.am_checkpoint.c_str(), trainer.steps(), log_path.c_str());

  if (!o.dump_latents.empty()) {
    std::ofstream f(o.dump_latents);
    if (!f) throw std::runtime_error("cannot write " + o.dump_latents);
    f.precision(7);
    for (std::size_t i = 0; i < utts.size(); ++i) {
      const auto& u = utts[i];
      auto conv = am.convert(u.mel, u.speaker, make_chunk_mask(u.mel.rows(), rc.chunk_frames, rc.max_history));
      for (std::size_t t = 0; t < conv.zprime.rows(); ++t) {
        f << i << '\t' << u.speaker;
        for (std::size_t j = 0; j < conv.zprime.cols(); ++j) f << '\t' << conv.zprime(t, j);
        f << '\n';
      }
    }
    std::printf("wrote latents to %s\n", o.dump_latents.c_str());
  }
  return kOk;
}

struct TrainLmOpts {
  Common common;
  std::optional<std::size_t> steps;
  std::string log;
};

int cmd_train_lm(const TrainLmOpts& o) {
  auto rc = resolve(o.common);
  auto corpus = open_corpus(rc.corpus);
  auto am = load_acoustic_model(rc.am_checkpoint).model;
  const auto split = split_corpus(corpus.utterances, heldout_per_speaker(corpus.spec));
  auto codes = extract_codes(am, corpus.utterances, split.train, rc.chunk_frames);

  LmConfig lc = preset_by_name(rc.preset).lm;
  lc.vocab = am.cfg.vocab + 1;
  LmModel<float> lm(lc, rc.seed);
  LmTrainOptions lo;
  lo.steps = o.steps.value_or(rc.lm_steps);
  lo.batch = rc.lm_batch;
  lo.adam.lr = rc.lm_lr;
  lo.seed = rc.seed;

  const std::string log_path = !o.log.empty() ? o.log : rc.lm_checkpoint + ".log.tsv";
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  log << "step\tnll\n";
  log.precision(17);
  auto rep = train_lm(lm, codes, lo, [&](std::size_t step, double loss) {
    log << step + 1 << '\t' << loss << '\n';
    if (rc.log_every && ((step + 1) % rc.log_every == 0 || step + 1 == lo.steps))
      std::printf("step %zu  nll %.4f\n", step + 1, loss);
  });
  save_model(rc.lm_checkpoint, lm, long(lo.steps));
  const double uni = [&] {
    auto lp = unigram_log_probs(codes, am.cfg.vocab);
    double s = 0;
    std::size_t n = 0;
    for (const auto& c : codes)
      for (auto k : c) s -= lp[k], ++n;
    return n ? s / double(n) : 0.0;
  }();
  std::printf("saved %s (%zu params), held-out nll %.4f, unigram %.4f, loss log %s\n", rc.lm_checkpoint.c_str(),
              lm.parameter_count(), rep.heldout_nll.empty() ? 0.0 : rep.heldout_nll.back(), uni, log_path.c_str());
  return kOk;
}

struct ConvertOpts {
  Common common;
  std::string in, out, mode = "standalone", mel_out;
  std::size_t speaker = 0;
  std::optional<std::size_t> chunk_ms;
  std::size_t offline_chunk_ms = 0;
  bool offline = false;
};

int cmd_convert(const ConvertOpts& o) {
  auto rc = resolve(o.common);
  const Mode mode = parse_mode(o.mode);
  const std::size_t chunk = o.chunk_ms ? chunk_frames_from_ms(*o.chunk_ms) : rc.chunk_frames;
  const std::size_t offline_chunk = o.offline_chunk_ms ? chunk_frames_from_ms(o.offline_chunk_ms) : 0;
  auto wav = open_wav(o.in);
  auto am = load_acoustic_model(rc.am_checkpoint).model;
  if (o.speaker >= am.cfg.speakers)
    throw std::invalid_argument("--target-speaker " + std::to_string(o.speaker) + " outside [0, " +
                                std::to_string(am.cfg.speakers) + ")");

  Wav out;
  Tensor<float> mel;
  if (o.offline) {
    auto conv = offline_convert(am, mel_frontend(wav.samples), o.speaker, offline_chunk, rc.max_history);
    out.samples = Vocoder().synthesize(conv.mel);
    mel = std::move(conv.mel);
  } else {
    std::optional<LmModel<float>> lm;
    if (mode == Mode::full) lm.emplace(load_lm(rc.lm_checkpoint).model);
    SessionConfig sc = session_config(rc);
    sc.mode = mode;
    sc.chunk_frames = chunk;
    sc.speaker = o.speaker;
    StreamSession s(am, lm ? &*lm : nullptr, sc);
    out.samples = stream_convert(s, wav.samples, chunk * FrontendConfig{}.frame_shift);
    mel = s.converted_mel();
  }
  write_wav(o.out, out);
  if (!o.mel_out.empty()) write_matrix_tsv(o.mel_out, mel);
  std::printf("%s: %zu samples in, %zu samples out (%s, speaker %zu)\n", o.out.c_str(), wav.samples.size(),
              out.samples.size(), o.offline ? "offline" : mode_name(mode), o.speaker);
  return kOk;
}

struct BenchOpts {
  Common common;
  std::string in;
  std::optional<std::size_t> chunk_ms;
};

int cmd_bench(const BenchOpts& o) {
  auto rc = resolve(o.common);
  auto am = load_acoustic_model(rc.am_checkpoint).model;
  auto lm = load_lm(rc.lm_checkpoint).model;
  std::vector<double> pcm;
  if (!o.in.empty()) {
    pcm = open_wav(o.in).samples;
  } else {
    CorpusSpec spec;
    spec.num_speakers = 1;
    spec.utterances_per_speaker = 6;
    spec.mel_bins = am.cfg.mel_bins;
    spec.seed = rc.seed;
    Vocoder voc;
    for (const auto& u : generate_corpus(spec)) {
      auto part = voc.synthesize(u.mel);
      pcm.insert(pcm.end(), part.begin(), part.end());
    }
  }
  SessionConfig sc = session_config(rc);
  if (o.chunk_ms) sc.chunk_frames = chunk_frames_from_ms(*o.chunk_ms);
  const double am_m = double(am.inference_parameter_count()) / 1e6;
  const double lm_m = double(lm.parameter_count()) / 1e6;
  sc.mode = Mode::standalone;
  auto sa = measure_latency(am, nullptr, sc, pcm, am_m);
  sc.mode = Mode::full;
  auto fu = measure_latency(am, &lm, sc, pcm, am_m + lm_m);
  std::printf("[standalone]\n%s[full]\n%s", sa.to_text().c_str(), fu.to_text().c_str());
  bool ok = true;
  for (const auto* r : {&sa, &fu}) ok = ok && r->total_ms == r->inference_ms + r->chunk_wait_ms + r->lookahead_ms;
  std::printf("identity: total = inference + %g + %g: %s\n", sa.chunk_wait_ms, sa.lookahead_ms, ok ? "ok" : "VIOLATED");
  std::printf("params_m: standalone %.6f < full %.6f\n", sa.params_m, fu.params_m);
  std::printf("rtf: standalone %.6f %s full %.6f\n", sa.rtf, sa.rtf < fu.rtf ? "<" : ">=", fu.rtf);
  return ok ? kOk : kVerifyFailed;
}

struct VerifyOpts {
  std::string am, lm, corpus;
};

int cmd_verify(const VerifyOpts& o) {
  for (const auto* p : {&o.am, &o.lm})
    if (!p->empty() && !fs::exists(*p)) throw MissingModel("model checkpoint not found: " + *p);
  std::vector<verify::Check> checks;
  auto run = [&](const std::string& name, const std::function<verify::Check()>& f) {
    try {
      checks.push_back(f());
    } catch (const std::exception& e) {
      checks.push_back({name, false, e.what()});
    }
    const auto& c = checks.back();
    std::printf("%s  %-20s %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.detail.c_str());
    std::fflush(stdout);
  };
  run("mask_oracle", [] { return verify::mask_oracle_check(); });
  run("chunk_sampler", [] { return verify::chunk_sampler_check(); });
  run("acoustic_gradients", [] { return verify::acoustic_gradient_check(); });
  run("lm_gradients", [] { return verify::lm_gradient_check(); });
  run("wire_roundtrip", [] { return verify::wire_roundtrip_check(); });
  run("bitrate", [] { return verify::bitrate_check(); });
  run("latency_identity", [] { return verify::latency_identity_check(); });

  std::optional<AcousticModel<float>> am;
  if (!o.am.empty()) {
    run("am_checkpoint", [&] {
      am.emplace(load_acoustic_model(o.am).model);
      return verify::Check{"am_checkpoint", true, o.am};
    });
    if (am) run("model_sanity", [&] { return verify::model_sanity_check(*am); });
  } else {
    AcousticConfig ac = toy_preset().am;
    ac.encoder.num_blocks = ac.decoder.num_blocks = 2;
    am.emplace(ac, 1);
  }
  if (!o.lm.empty()) {
    run("lm_checkpoint", [&] {
      auto lm = load_lm(o.lm).model;
      for (auto* p : lm.parameters())
        if (!p->value.all_finite()) return verify::Check{"lm_checkpoint", false, "non-finite values in " + p->name};
      if (am && lm.cfg.vocab != am->cfg.vocab + 1)
        return verify::Check{"lm_checkpoint", false, "vocabulary does not match the acoustic model"};
      return verify::Check{"lm_checkpoint", true, o.lm};
    });
  }
  if (am) {
    run("stream_equivalence", [&] {
      std::vector<Utterance> utts;
      if (!o.corpus.empty()) {
        utts = open_corpus(o.corpus).utterances;
        if (utts.size() > 8) utts.resize(8);
      } else {
        CorpusSpec spec;
        spec.num_speakers = 2;
        spec.utterances_per_speaker = 4;
        spec.mel_bins = am->cfg.mel_bins;
        utts = generate_corpus(spec);
      }
      std::vector<Tensor<float>> mels;
      for (auto& u : utts) mels.push_back(std::move(u.mel));
      return verify::stream_equivalence_check(*am, mels);
    });
  }
  std::size_t failed = 0;
  for (const auto& c : checks) failed += !c.passed;
  std::printf("%zu checks, %zu failed\n", checks.size(), failed);
  return failed ? kVerifyFailed : kOk;
}

struct WireEncodeOpts {
  Common common;
  std::string in, out;
  std::optional<std::size_t> chunk_ms;
};

int cmd_wire_encode(const WireEncodeOpts& o) {
  auto rc = resolve(o.common);
  auto wav = open_wav(o.in);
  auto am = load_acoustic_model(rc.am_checkpoint).model;
  SessionConfig sc = session_config(rc);
  if (o.chunk_ms) sc.chunk_frames = chunk_frames_from_ms(*o.chunk_ms);
  StreamSession s(am, nullptr, sc);
  stream_convert(s, wav.samples, sc.chunk_frames * FrontendConfig{}.frame_shift);
  const FrontendConfig fc;
  const std::size_t rate = fc.sample_rate / (fc.frame_shift * am.cfg.downsample);
  auto bytes = wire_encode(s.codes(), am.cfg.vocab, rate);
  std::ofstream f(o.out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + o.out);
  f.write(reinterpret_cast<const char*>(bytes.data()), long(bytes.size()));
  std::printf("%s: %zu codes, %zu bytes, %g bps (pcm %g bps)\n", o.out.c_str(), s.codes().size(), bytes.size(),
              wire_bitrate_bps(rate), pcm_bitrate_bps());
  return kOk;
}

struct WireDecodeOpts {
  Common common;
  std::string in, out;
  std::size_t speaker = 0;
};

int cmd_wire_decode(const WireDecodeOpts& o) {
  auto rc = resolve(o.common);
  if (!fs::exists(o.in)) throw MissingInput("input not found: " + o.in);
  std::ifstream f(o.in, std::ios::binary);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  auto w = wire_decode(bytes);
  std::printf("vocab=%zu rate_hz=%zu codes=%zu\n", w.vocab, w.rate_hz, w.codes.size());
  for (std::size_t i = 0; i < w.codes.size(); ++i) std::printf("%s%zu", i ? " " : "", w.codes[i]);
  std::printf("\n");
  if (o.out.empty()) return kOk;
  auto am = load_acoustic_model(rc.am_checkpoint).model;
  if (w.vocab != am.cfg.vocab) throw std::invalid_argument("token vocabulary does not match the acoustic model");
  if (o.speaker >= am.cfg.speakers) throw std::invalid_argument("--target-speaker outside the speaker table");
  Wav out;
  if (!w.codes.empty()) {
    NoGradGuard ng;
    const std::size_t frames = w.codes.size() * am.cfg.downsample;
    auto mel = am.decode_codes(w.codes, frames, o.speaker, make_chunk_mask(frames, rc.chunk_frames, rc.max_history));
    out.samples = Vocoder().synthesize(mel.value());
  }
  write_wav(o.out, out);
  std::printf("%s: %zu samples\n", o.out.c_str(), out.samples.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming voice conversion toolkit (toy scale)"};
  app.require_subcommand(1);
  int rc = kOk;
  auto guarded = [&rc](auto fn) {
    return [&rc, fn] { rc = fn(); };
  };

  GenDataOpts gen;
  auto* g = app.add_subcommand("gen-data", "generate the synthetic multi-speaker corpus");
  g->add_option("--out", gen.out, "output directory")->capture_default_str();
  g->add_option("--speakers", gen.spec.num_speakers)->capture_default_str();
  g->add_option("--utterances", gen.spec.utterances_per_speaker, "utterances per speaker")->capture_default_str();
  g->add_option("--vocab", gen.spec.token_vocab, "ground-truth token inventory")->capture_default_str();
  g->add_option("--min-tokens", gen.spec.min_tokens)->capture_default_str();
  g->add_option("--max-tokens", gen.spec.max_tokens)->capture_default_str();
  g->add_option("--seed", gen.spec.seed)->capture_default_str();
  g->callback(guarded([&] { return cmd_gen_data(gen); }));

  TrainAmOpts tam;
  auto* ta = app.add_subcommand("train-am", "train the acoustic model");
  add_common(ta, tam.common);
  ta->add_option("--steps", tam.steps, "optimisation steps for this run (default: am_steps)");
  ta->add_option("--log", tam.log, "loss log (step, rec, hpc, ce, total; tab separated)");
  ta->add_flag("--resume", tam.resume, "continue from the checkpoint and its step count");
  ta->add_option("--dump-latents", tam.dump_latents, "write Z' rows (utterance, speaker, values) after training");
  ta->callback(guarded([&] { return cmd_train_am(tam); }));

  TrainLmOpts tlm;
  auto* tl = app.add_subcommand("train-lm", "train the context language model on codes of a frozen acoustic model");
  add_common(tl, tlm.common);
  tl->add_option("--steps", tlm.steps, "optimisation steps (default: lm_steps)");
  tl->add_option("--log", tlm.log, "loss log (step, nll)");
  tl->callback(guarded([&] { return cmd_train_lm(tlm); }));

  ConvertOpts cv;
  auto* c = app.add_subcommand("convert", "convert a 16 kHz wav to the target speaker");
  add_common(c, cv.common, false);
  c->add_option("--in", cv.in, "input wav")->required();
  c->add_option("--out", cv.out, "output wav")->required();
  c->add_option("--target-speaker", cv.speaker)->capture_default_str();
  c->add_option("--mode", cv.mode, "full | standalone")->capture_default_str();
  c->add_option("--chunk-ms", cv.chunk_ms, "streaming chunk length (multiple of 10)");
  c->add_flag("--offline", cv.offline, "convert the whole utterance at once");
  c->add_option("--offline-chunk-ms", cv.offline_chunk_ms, "attention chunk for --offline (0 = full context)")
      ->capture_default_str();
  c->add_option("--mel-out", cv.mel_out, "also write the converted mel as tsv");
  c->callback(guarded([&] { return cmd_convert(cv); }));

  BenchOpts bo;
  auto* b = app.add_subcommand("bench", "latency and real-time factor of both modes");
  add_common(b, bo.common, false);
  b->add_option("--in", bo.in, "input wav (default: synthetic speech)");
  b->add_option("--chunk-ms", bo.chunk_ms);
  b->callback(guarded([&] { return cmd_bench(bo); }));

  VerifyOpts vo;
  auto* v = app.add_subcommand("verify", "run the self-check suites");
  v->add_option("--am", vo.am, "also check this acoustic model checkpoint");
  v->add_option("--lm", vo.lm, "also check this language model checkpoint");
  v->add_option("--corpus", vo.corpus, "utterances for the streaming check");
  v->callback(guarded([&] { return cmd_verify(vo); }));

  WireEncodeOpts we;
  auto* e = app.add_subcommand("wire-encode", "encode a wav to the token wire format");
  add_common(e, we.common, false);
  e->add_option("--in", we.in, "input wav")->required();
  e->add_option("--out", we.out, "output token file")->required();
  e->add_option("--chunk-ms", we.chunk_ms);
  e->callback(guarded([&] { return cmd_wire_encode(we); }));

  WireDecodeOpts wd;
  auto* d = app.add_subcommand("wire-decode", "print a token file and optionally render it");
  add_common(d, wd.common, false);
  d->add_option("--in", wd.in, "token file")->required();
  d->add_option("--out", wd.out, "render to this wav with the acoustic model decoder");
  d->add_option("--target-speaker", wd.speaker)->capture_default_str();
  d->callback(guarded([&] { return cmd_wire_decode(wd); }));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  } catch (const MissingInput& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kMissingInput;
  } catch (const MissingModel& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kMissingModel;
  } catch (const std::invalid_argument& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kFailure;
  }
  return rc;
}
