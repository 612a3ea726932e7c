#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "dvc3/context_lm.hpp"
#include "test_util.hpp"

using namespace dvc3;

namespace {

LmConfig tiny_lm(std::size_t codes = 5) {
  LmConfig c;
  c.layers = 2;
  c.heads = 2;
  c.hidden = 8;
  c.intermediate = 12;
  c.vocab = codes + 1;
  c.max_context = 16;
  return c;
}

template <typename T>
void randomize_norms(LmModel<T>& lm, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(1.0, 0.2);
  lm.visit([&](Parameter<T>& p) {
    if (p.name.find("gamma") != std::string::npos)
      for (auto& v : p.value.values()) v = T(nd(rng));
  });
}

using Mat = std::vector<std::vector<double>>;

Mat mm(const Mat& a, const Tensor<double>& w) {
  Mat o(a.size(), std::vector<double>(w.cols(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < w.rows(); ++k)
      for (std::size_t j = 0; j < w.cols(); ++j) o[i][j] += a[i][k] * w(k, j);
  return o;
}

Mat rms(const Mat& x, const Tensor<double>& g) {
  Mat o = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double ms = 0;
    for (double v : x[i]) ms += v * v;
    const double inv = 1.0 / std::sqrt(ms / double(x[i].size()) + 1e-6);
    for (std::size_t j = 0; j < x[i].size(); ++j) o[i][j] = x[i][j] * inv * g[j];
  }
  return o;
}

// Decoder-only forward written out loop by loop: causal multi-head attention
// whose softmax denominator carries an extra exp(0) term, SwiGLU feed-forward.
Mat oracle_logits(const LmModel<double>& lm, const std::vector<std::size_t>& tokens) {
  const auto& c = lm.cfg;
  const std::size_t n = tokens.size(), dh = c.hidden / c.heads;
  Mat h(n, std::vector<double>(c.hidden));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c.hidden; ++j) h[i][j] = lm.embed.value(tokens[i], j) + lm.positions.value(i, j);
  for (const auto& L : lm.layers) {
    Mat a = rms(h, L.attn_norm.gamma.value);
    Mat q = mm(a, L.wq.w.value), k = mm(a, L.wk.w.value), v = mm(a, L.wv.w.value);
    Mat att(n, std::vector<double>(c.hidden, 0.0));
    for (std::size_t hd = 0; hd < c.heads; ++hd)
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> e(i + 1);
        double denom = 1.0;
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0;
          for (std::size_t d = 0; d < dh; ++d) s += q[i][hd * dh + d] * k[j][hd * dh + d];
          e[j] = std::exp(s / std::sqrt(double(dh)));
          denom += e[j];
        }
        for (std::size_t j = 0; j <= i; ++j)
          for (std::size_t d = 0; d < dh; ++d) att[i][hd * dh + d] += e[j] / denom * v[j][hd * dh + d];
      }
    Mat o = mm(att, L.wo.w.value);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c.hidden; ++j) h[i][j] += o[i][j];
    Mat f = rms(h, L.ffn_norm.gamma.value);
    Mat g = mm(f, L.gate.w.value), u = mm(f, L.up.w.value);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < g[i].size(); ++j) g[i][j] = g[i][j] / (1.0 + std::exp(-g[i][j])) * u[i][j];
    Mat dn = mm(g, L.down.w.value);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c.hidden; ++j) h[i][j] += dn[i][j];
  }
  return mm(rms(h, lm.final_norm.gamma.value), lm.head.w.value);
}

// Deterministic successor table over `codes` codes.
std::vector<std::vector<std::size_t>> cycle_corpus(std::size_t codes, std::size_t count, std::size_t len,
                                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<std::size_t> s{rng() % codes};
    while (s.size() < len) s.push_back((s.back() * 3 + 1) % codes);
    out.push_back(s);
  }
  return out;
}

}  // namespace

TEST(LmModel, MatchesLoopOracle) {
  LmModel<double> lm(tiny_lm(), 3);
  randomize_norms(lm, 4);
  std::vector<std::size_t> seq{5, 0, 3, 3, 1, 4};
  auto got = lm.forward(seq).value();
  auto want = oracle_logits(lm, seq);
  for (std::size_t i = 0; i < seq.size(); ++i)
    for (std::size_t j = 0; j < lm.cfg.vocab; ++j) EXPECT_NEAR(got(i, j), want[i][j], 1e-10);
}

TEST(LmModel, IncrementalEqualsFresh) {
  LmModel<double> lm(tiny_lm(), 5);
  randomize_norms(lm, 6);
  std::vector<std::size_t> seq{5, 2, 2, 0, 4, 1, 3, 0};
  auto full = lm.forward(seq).value();
  auto st = lm.make_state();
  // mixed step sizes: 3, then 1, 1, then 3
  std::vector<std::pair<std::size_t, std::size_t>> parts{{0, 3}, {3, 1}, {4, 1}, {5, 3}};
  for (auto [b, n] : parts) {
    std::vector<std::size_t> piece(seq.begin() + long(b), seq.begin() + long(b + n));
    auto l = lm.forward(piece, &st).value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < lm.cfg.vocab; ++j) EXPECT_NEAR(l(i, j), full(b + i, j), 1e-12);
  }
  EXPECT_EQ(st.position, seq.size());
}

TEST(LmModel, Causality) {
  LmModel<double> lm(tiny_lm(), 7);
  std::vector<std::size_t> a{5, 1, 2, 3, 4}, b = a;
  b[3] = 0;
  auto la = lm.forward(a).value(), lb = lm.forward(b).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < lm.cfg.vocab; ++j) EXPECT_EQ(la(i, j), lb(i, j));
  bool changed = false;
  for (std::size_t j = 0; j < lm.cfg.vocab; ++j) changed = changed || la(3, j) != lb(3, j);
  EXPECT_TRUE(changed);
}

TEST(LmModel, ZeroHeadGivesUniformNll) {
  LmModel<double> lm(tiny_lm(), 8);
  lm.head.w.value.fill(0.0);
  EXPECT_NEAR(lm.nll({5, 1, 2, 3}).item(), std::log(6.0), 1e-12);
}

TEST(LmModel, Validation) {
  LmModel<double> lm(tiny_lm(), 9);
  EXPECT_THROW(lm.forward({}), std::invalid_argument);
  EXPECT_THROW(lm.forward({6}), std::out_of_range);
  EXPECT_THROW(lm.forward(std::vector<std::size_t>(17, 0)), std::length_error);
  auto st = lm.make_state();
  lm.forward(std::vector<std::size_t>(16, 0), &st);
  EXPECT_THROW(lm.forward({0}, &st), std::length_error);
  EXPECT_THROW(lm.nll({1}), std::invalid_argument);
  LmConfig bad = tiny_lm();
  bad.heads = 3;
  EXPECT_THROW(LmModel<double>(bad, 1), std::invalid_argument);
}

TEST(LmModel, NllGradCheck) {
  LmModel<double> lm(tiny_lm(), 10);
  randomize_norms(lm, 11);
  std::vector<std::size_t> seq{5, 3, 1, 1, 4, 0, 2};
  auto rep = grad_check([&] { return lm.nll(seq); }, lm.parameters());
  for (const auto& g : rep.groups) EXPECT_LT(g.max_rel_error, 1e-3) << g.name;
}

TEST(LmModel, ParameterCountFormula) {
  LmConfig c = tiny_lm();
  LmModel<float> lm(c, 1);
  const std::size_t h = c.hidden, per_layer = 4 * h * h + 3 * h * c.intermediate + 2 * h;
  EXPECT_EQ(lm.parameter_count(), c.vocab * h + c.max_context * h + c.layers * per_layer + h + h * c.vocab);
}

// ---------------------------------------------------------------- sampling

TEST(Sampling, NeverProducesBos) {
  LmConfig c = tiny_lm(3);
  std::vector<double> logits{0.0, 1.0, 0.5, 50.0};  // BOS dominates
  Rng rng(1);
  SamplingConfig g;
  g.mode = SamplingConfig::Mode::greedy;
  EXPECT_EQ(sample_code(logits.data(), c, g, rng), 1u);
  SamplingConfig t;
  t.k = 10;
  for (int i = 0; i < 200; ++i) EXPECT_LT(sample_code(logits.data(), c, t, rng), 3u);
}

TEST(Sampling, TopKRestrictsSupportAndFollowsWeights) {
  LmConfig c = tiny_lm(5);
  std::vector<double> logits{std::log(1.0), std::log(3.0), -20.0, std::log(0.5), -30.0, 0.0};
  SamplingConfig t;
  t.k = 2;
  Rng rng(2);
  std::vector<std::size_t> hist(5, 0);
  const int n = 20000;
  for (int i = 0; i < n; ++i) hist[sample_code(logits.data(), c, t, rng)]++;
  EXPECT_EQ(hist[2] + hist[3] + hist[4], 0u);
  EXPECT_NEAR(double(hist[1]) / n, 0.75, 0.015);
}

TEST(Sampling, ReportedLogProbIsFullSoftmax) {
  LmConfig c = tiny_lm(3);
  std::vector<double> logits{1.0, 2.0, 0.0, 0.5};
  SamplingConfig g;
  g.mode = SamplingConfig::Mode::greedy;
  Rng rng(1);
  double lp = 0;
  sample_code(logits.data(), c, g, rng, &lp);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(0.0) + std::exp(0.5);
  EXPECT_NEAR(lp, 2.0 - std::log(z), 1e-12);
}

TEST(PseudoContext, LengthAndErrors) {
  LmModel<float> lm(tiny_lm(), 3);
  SamplingConfig sc;
  EXPECT_EQ(generate_pseudo_context(lm, {1, 2, 3}, 2, sc).codes.size(), 2u);
  EXPECT_TRUE(generate_pseudo_context(lm, {1, 2, 3}, 0, sc).codes.empty());
  EXPECT_THROW(generate_pseudo_context(lm, {1, 2, 3}, -1, sc), std::invalid_argument);
  sc.k = 0;
  EXPECT_THROW(generate_pseudo_context(lm, {1, 2, 3}, 2, sc), std::invalid_argument);
  // Longer histories than the context window are truncated, not rejected.
  sc.k = 3;
  EXPECT_EQ(generate_pseudo_context(lm, std::vector<std::size_t>(40, 1), 2, sc).codes.size(), 2u);
}

TEST(PseudoContext, LogProbsFactorizeOverPrefix) {
  LmModel<double> lm(tiny_lm(), 12);
  randomize_norms(lm, 13);
  SamplingConfig sc;
  sc.seed = 5;
  std::vector<std::size_t> hist{0, 4, 2};
  auto pc = generate_pseudo_context(lm, hist, 3, sc);
  ASSERT_EQ(pc.codes.size(), 3u);
  std::vector<std::size_t> seq{lm.cfg.bos()};
  seq.insert(seq.end(), hist.begin(), hist.end());
  seq.insert(seq.end(), pc.codes.begin(), pc.codes.end());
  auto logits = lm.forward(seq).value();
  for (std::size_t i = 0; i < 3; ++i) {
    const std::size_t row = hist.size() + i;
    auto lp = log_softmax_row(logits.row(row), lm.cfg.vocab);
    EXPECT_NEAR(pc.log_probs[i], lp[pc.codes[i]], 1e-10);
  }
}

TEST(PseudoContext, SeedDeterminism) {
  LmModel<float> lm(tiny_lm(), 14);
  SamplingConfig sc;
  sc.seed = 9;
  auto a = generate_pseudo_context(lm, {1, 2}, 4, sc), b = generate_pseudo_context(lm, {1, 2}, 4, sc);
  EXPECT_EQ(a.codes, b.codes);
}

TEST(LmContext, MatchesPlainHistoryAndRolls) {
  LmModel<double> lm(tiny_lm(), 15);
  LmContext<double> ctx(lm);
  SamplingConfig g;
  g.mode = SamplingConfig::Mode::greedy;
  std::vector<std::size_t> hist;
  Rng rng(1);
  for (std::size_t i = 0; i < 40; ++i) {
    const std::size_t code = (i * 7) % 5;
    ctx.push(code);
    hist.push_back(code);
    EXPECT_LE(ctx.state().position, lm.cfg.max_context);
    if (i < 10) {
      auto a = ctx.pseudo(2, g, rng), b = generate_pseudo_context(lm, hist, 2, g);
      EXPECT_EQ(a.codes, b.codes) << i;
    }
  }
  EXPECT_EQ(ctx.history().size(), 40u);
  // pseudo() leaves the context untouched
  const auto pos = ctx.state().position;
  ctx.pseudo(3, g, rng);
  EXPECT_EQ(ctx.state().position, pos);
}

// ---------------------------------------------------------------- training

TEST(TrainLm, LearnsTransitionTableAndBeatsUniform) {
  LmConfig c = tiny_lm(5);
  c.hidden = 16;
  c.intermediate = 32;
  LmModel<float> lm(c, 16);
  auto corpus = cycle_corpus(5, 60, 12, 3);
  LmTrainOptions opt;
  opt.steps = 300;
  opt.batch = 4;
  opt.adam.lr = 1e-2;
  auto rep = train_lm(lm, corpus, opt);
  ASSERT_FALSE(rep.heldout_nll.empty());
  EXPECT_LT(rep.heldout_nll.back(), std::log(5.0));
  EXPECT_LT(rep.epoch_loss.back(), rep.epoch_loss.front());
  SamplingConfig g;
  g.mode = SamplingConfig::Mode::greedy;
  auto pc = generate_pseudo_context(lm, {0, 1, 4}, 3, g);
  std::size_t prev = 4;
  for (auto code : pc.codes) {
    EXPECT_EQ(code, (prev * 3 + 1) % 5);
    prev = code;
  }
}

TEST(TrainLm, Errors) {
  LmModel<float> lm(tiny_lm(), 1);
  EXPECT_THROW(train_lm(lm, {}, {}), std::invalid_argument);
  EXPECT_THROW(train_lm(lm, {{}}, {}), std::invalid_argument);
}

TEST(LmSequences, BosPrefixedWindows) {
  LmConfig c = tiny_lm();
  std::vector<std::size_t> codes(40);
  for (std::size_t i = 0; i < 40; ++i) codes[i] = i % 5;
  auto seqs = lm_sequences({codes}, c);
  std::size_t covered = 0;
  for (const auto& s : seqs) {
    EXPECT_EQ(s[0], c.bos());
    EXPECT_LE(s.size(), c.max_context);
    covered += s.size() - 1;
  }
  EXPECT_EQ(covered, 40u);
}

TEST(Unigram, AddOneSmoothing) {
  auto lp = unigram_log_probs({{0, 0, 1}}, 3);
  EXPECT_NEAR(lp[0], std::log(3.0 / 6.0), 1e-12);
  EXPECT_NEAR(lp[2], std::log(1.0 / 6.0), 1e-12);
}

TEST(CodeCorpus, RoundTrip) {
  auto path = std::filesystem::temp_directory_path() / "dvc3_codes_test.bin";
  std::vector<std::vector<std::size_t>> codes{{1, 2, 149}, {}, {0}};
  write_code_corpus(path, codes);
  EXPECT_EQ(read_code_corpus(path), codes);
  {
    std::ofstream f(path, std::ios::binary);
    f << "garbage!";
  }
  EXPECT_THROW(read_code_corpus(path), std::runtime_error);
  std::filesystem::remove(path);
}
