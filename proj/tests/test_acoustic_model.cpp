#include <gtest/gtest.h>

#include <cmath>

#include "dvc3/acoustic_model.hpp"
#include "dvc3/config.hpp"
#include "test_util.hpp"

using namespace dvc3;
using dvc3::testing::random_tensor;

namespace {

AcousticConfig tiny_config() {
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

std::vector<std::size_t> tokens_for(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> t(n);
  for (auto& v : t) v = rng() % vocab;
  return t;
}

// Mel frames that are a fixed function of their token, so a model can learn them.
Tensor<float> mel_from_tokens(const std::vector<std::size_t>& tokens, std::size_t r, std::size_t f) {
  Tensor<float> m(tokens.size() * r, f);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < f; ++j) m(i, j) = float(std::sin(double(tokens[i / r] + 1) * double(j + 1) * 0.7));
  return m;
}

}  // namespace

TEST(AcousticModel, LengthContract) {
  AcousticModel<double> am(tiny_config(), 3);
  for (std::size_t tm : {12u, 13u, 1u}) {
    auto mel = random_tensor(tm, 8, tm);
    auto conv = am.convert(mel, 1, make_chunk_mask(tm, 2));
    EXPECT_EQ(conv.zprime.rows(), (tm + 1) / 2);
    EXPECT_EQ(conv.zprime.cols(), 6u);
    EXPECT_EQ(conv.codes.size(), (tm + 1) / 2);
    EXPECT_EQ(conv.mel.rows(), tm);
    EXPECT_EQ(conv.mel.cols(), 8u);
  }
}

TEST(AcousticModel, PoolingMatchesManualAverage) {
  AcousticModel<double> am(tiny_config(), 4);
  auto z = random_tensor(7, 8, 5);
  auto zp = am.downsample_project(constant(z)).value();
  ASSERT_EQ(zp.rows(), 4u);
  const auto& w = am.zproj.w.value;
  const auto& b = am.zproj.b.value;
  for (std::size_t t = 0; t < 4; ++t) {
    const std::size_t lo = 2 * t, hi = std::min<std::size_t>(lo + 2, 7);
    for (std::size_t k = 0; k < 6; ++k) {
      double s = b[k];
      for (std::size_t d = 0; d < 8; ++d) {
        double avg = 0;
        for (std::size_t i = lo; i < hi; ++i) avg += z(i, d);
        s += avg / double(hi - lo) * w(d, k);
      }
      EXPECT_NEAR(zp(t, k), s, 1e-12);
    }
  }
}

TEST(AcousticModel, InferenceDiscretizeIsOneHotArgmax) {
  AcousticModel<double> am(tiny_config(), 5);
  Tensor<double> zp({2, 6}, {0, 1, 5, 2, 5, 0, 3, 3, 1, 0, 0, 0});
  auto d = am.discretize(constant(zp), false);
  EXPECT_EQ(d.codes, (std::vector<std::size_t>{2, 0}));  // ties -> lowest index
  for (std::size_t i = 0; i < 2; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < 6; ++k) s += d.input.value()(i, k);
    EXPECT_EQ(s, 1.0);
    EXPECT_EQ(d.input.value()(i, d.codes[i]), 1.0);
  }
  EXPECT_THROW(am.discretize(constant(zp), true), std::invalid_argument);
}

TEST(AcousticModel, HpcWithZeroHeadsIsMeanAbsPlusLogCandidates) {
  auto cfg = tiny_config();
  cfg.hpc_negatives = 10;
  AcousticModel<double> am(cfg, 6);
  for (auto* lin : {&am.apc_head, &am.cpc_proj}) {
    lin->w.value.fill(0.0);
    lin->b.value.fill(0.0);
  }
  auto inter = random_tensor(12, 8, 7);
  auto mel = random_tensor(12, 8, 8);
  Rng rng(1);
  const double got = am.hpc_loss(constant(inter), mel, rng).item();
  double l1 = 0;
  for (std::size_t i = 2; i < 12; ++i)
    for (std::size_t j = 0; j < 8; ++j) l1 += std::abs(mel(i, j));
  l1 /= 10.0 * 8.0;
  EXPECT_NEAR(got, l1 + std::log(11.0), 1e-12);
}

TEST(AcousticModel, HpcApcHandCase) {
  auto cfg = tiny_config();
  cfg.mel_bins = 1;
  cfg.hpc_shift = 1;
  AcousticModel<double> am(cfg, 6);
  am.apc_head.w.value.fill(0.0);
  am.apc_head.b.value.fill(0.0);
  am.apc_head.b.value[0] = 1.0;
  am.cpc_proj.w.value.fill(0.0);
  am.cpc_proj.b.value.fill(0.0);
  auto inter = random_tensor(3, 8, 9);
  Tensor<double> mel({3, 1}, {0.0, 3.0, -1.0});
  Rng rng(2);
  // predictions 1 for frames 1 and 2: |1-3| and |1+1| average to 2
  const double got = am.hpc_loss(constant(inter), mel, rng).item();
  EXPECT_NEAR(got, 2.0 + std::log(4.0), 1e-12);
}

TEST(AcousticModel, HpcShortInputIsZero) {
  AcousticModel<double> am(tiny_config(), 6);
  Rng rng(3);
  EXPECT_EQ(am.hpc_loss(constant(random_tensor(2, 8, 1)), random_tensor(2, 8, 2), rng).item(), 0.0);
}

TEST(AcousticLossWeights, Breakdown) {
  auto b = make_breakdown(0.2, 0.5, 0.7, LossWeights{});
  EXPECT_NEAR(b.total, 16.5, 1e-12);
  auto z = make_breakdown(0.0, 0.0, 0.0, LossWeights{});
  EXPECT_EQ(z.total, 0.0);
}

TEST(AcousticModel, TrainingLossTotalMatchesParts) {
  auto cfg = tiny_config();
  AcousticModel<double> am(cfg, 7);
  auto tokens = tokens_for(6, 6, 1);
  auto mel = random_tensor(12, 8, 2);
  Rng rng(3);
  auto noise = sample_gumbel_noise<double>(6, 6, rng);
  auto l = am.training_loss(mel, tokens, 0, make_chunk_mask(12, 2), noise, 1.0, LossWeights{}, rng);
  EXPECT_NEAR(l.total.item(), 45 * l.parts.rec + l.parts.hpc + 10 * l.parts.ce, 1e-9);
  EXPECT_NEAR(l.parts.total, l.total.item(), 1e-9);
}

TEST(AcousticModel, RejectsMismatchedInputs) {
  AcousticModel<double> am(tiny_config(), 8);
  auto mel = random_tensor(12, 8, 2);
  Rng rng(3);
  auto noise = sample_gumbel_noise<double>(6, 6, rng);
  auto mask = make_chunk_mask(12, 2);
  EXPECT_THROW(am.training_loss(mel, tokens_for(5, 6, 1), 0, mask, noise, 1.0, {}, rng), std::invalid_argument);
  EXPECT_THROW(am.training_loss(mel, tokens_for(6, 6, 1), 3, mask, noise, 1.0, {}, rng), std::out_of_range);
  EXPECT_THROW(am.convert(random_tensor(12, 7, 1), 0, mask), std::invalid_argument);
  EXPECT_THROW(am.decode_codes({0, 6}, 4, 0, make_chunk_mask(4, 2)), std::out_of_range);
  auto bad = tiny_config();
  bad.decoder.dim = 4;
  bad.decoder.heads = 2;
  EXPECT_THROW(AcousticModel<double>(bad, 1), std::invalid_argument);
}

TEST(AcousticModel, FullObjectiveGradCheck) {
  AcousticModel<double> am(tiny_config(), 9);
  auto tokens = tokens_for(6, 6, 4);
  auto mel = random_tensor(12, 8, 5);
  Rng nrng(6);
  auto noise = sample_gumbel_noise<double>(6, 6, nrng);
  auto mask = make_chunk_mask(12, 3);
  auto rep = grad_check(
      [&] {
        Rng rng(11);  // same negatives on every evaluation
        return am.training_loss(mel, tokens, 1, mask, noise, 1.3, LossWeights{}, rng, false).total;
      },
      am.parameters());
  for (const auto& g : rep.groups) EXPECT_LT(g.max_rel_error, 1e-3) << g.name;
  EXPECT_LT(rep.max_rel_error(), 1e-3);
}

TEST(AcousticModel, ConstructionIsSeedDeterministic) {
  AcousticModel<float> a(tiny_config(), 21), b(tiny_config(), 21), c(tiny_config(), 22);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    auto va = pa[i]->value.values(), vb = pb[i]->value.values(), vc = pc[i]->value.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin()));
    any_diff = any_diff || !std::equal(va.begin(), va.end(), vc.begin());
  }
  EXPECT_TRUE(any_diff);
}

TEST(AcousticModel, PresetParameterCounts) {
  auto toy = toy_preset(), large = large_preset();
  AcousticModel<float> a(toy.am, 1), p(large.am, 1);
  EXPECT_LT(a.inference_parameter_count(), 1'000'000u);
  const double m = double(p.inference_parameter_count()) / 1e6;
  EXPECT_NEAR(m, 12.1, 12.1 * 0.15);
  std::size_t all = 0;
  for (auto* q : p.parameters()) all += q->value.size();
  EXPECT_LT(p.inference_parameter_count(), all);
}

namespace {

struct TinySet {
  std::vector<Tensor<float>> mels;
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<std::size_t> speakers;

  std::vector<TrainExample<float>> batch() const {
    std::vector<TrainExample<float>> b;
    for (std::size_t i = 0; i < mels.size(); ++i) b.push_back({&mels[i], &tokens[i], speakers[i]});
    return b;
  }
};

TinySet tiny_set() {
  TinySet s;
  for (std::size_t i = 0; i < 4; ++i) {
    s.tokens.push_back(tokens_for(8, 6, 100 + i));
    s.mels.push_back(mel_from_tokens(s.tokens.back(), 2, 8));
    s.speakers.push_back(i % 3);
  }
  return s;
}

}  // namespace

TEST(AcousticTrainer, LossDecreases) {
  AcousticModel<float> am(tiny_config(), 12);
  AcousticTrainConfig tc;
  tc.adam.lr = 3e-3;
  tc.total_steps = 150;
  AcousticTrainer<float> tr(am, tc);
  auto set = tiny_set();
  auto batch = set.batch();
  double first = 0, last = 0;
  for (int i = 0; i < 150; ++i) {
    auto r = tr.step(batch);
    if (i < 10) first += r.loss.total / 10;
    if (i >= 140) last += r.loss.total / 10;
    EXPECT_GE(r.chunk, 0u);
    EXPECT_LE(r.chunk, 8u);
  }
  EXPECT_LT(last, 0.7 * first);
  EXPECT_EQ(tr.steps(), 150u);
}

TEST(AcousticTrainer, WorkerCountDoesNotChangeResult) {
  auto set = tiny_set();
  auto batch = set.batch();
  std::vector<std::vector<float>> finals;
  for (std::size_t workers : {1u, 3u}) {
    AcousticModel<float> am(tiny_config(), 13);
    AcousticTrainConfig tc;
    tc.workers = workers;
    AcousticTrainer<float> tr(am, tc);
    for (int i = 0; i < 5; ++i) tr.step(batch);
    std::vector<float> all;
    for (auto* p : am.parameters()) all.insert(all.end(), p->value.values().begin(), p->value.values().end());
    finals.push_back(all);
  }
  EXPECT_EQ(finals[0], finals[1]);
}

TEST(AcousticTrainer, RejectsEmptyBatchAndReportsBadItems) {
  AcousticModel<float> am(tiny_config(), 14);
  AcousticTrainer<float> tr(am, {});
  EXPECT_THROW(tr.step({}), std::invalid_argument);
  auto set = tiny_set();
  set.tokens[1].pop_back();
  try {
    tr.step(set.batch());
    FAIL() << "expected failure";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("item 1"), std::string::npos);
  }
}
