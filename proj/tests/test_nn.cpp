#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "dvc3/checkpoint.hpp"
#include "dvc3/nn.hpp"
#include "test_util.hpp"

using namespace dvc3;
using dvc3::testing::probe_sum;
using dvc3::testing::random_param;
using dvc3::testing::random_tensor;

// ---------------------------------------------------------------- quiet softmax

TEST(QuietSoftmax, SymmetricPairGivesOneThird) {
  std::vector<double> z{0.0, 0.0};
  auto p = quiet_softmax<double>(z);
  EXPECT_NEAR(p[0], 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
}

TEST(QuietSoftmax, AllMaskedIsZero) {
  std::vector<double> z{1.0, -2.0, 5.0};
  std::vector<std::uint8_t> allowed{0, 0, 0};
  auto p = quiet_softmax<double>(z, allowed);
  for (double v : p) EXPECT_EQ(v, 0.0);
}

TEST(QuietSoftmax, MatchesDirectFormula) {
  std::vector<double> z{1.0, 2.0, 3.0};
  auto p = quiet_softmax<double>(z);
  // Unshifted form exp(z_i) / (1 + sum exp(z_j)).
  const double denom = 1.0 + std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(p[i], std::exp(z[i]) / denom, 1e-15);
  // Shifted form with m = 3.
  const double denom3 = std::exp(-3.0) + std::exp(-2.0) + std::exp(-1.0) + 1.0;
  EXPECT_NEAR(p[2], 1.0 / denom3, 1e-15);
}

TEST(QuietSoftmax, MaskedEntriesAreZeroAndIgnored) {
  std::vector<double> z{0.5, 100.0, -0.5};
  std::vector<std::uint8_t> allowed{1, 0, 1};
  auto p = quiet_softmax<double>(z, allowed);
  EXPECT_EQ(p[1], 0.0);
  const double denom = 1.0 + std::exp(0.5) + std::exp(-0.5);
  EXPECT_NEAR(p[0], std::exp(0.5) / denom, 1e-15);
}

TEST(QuietSoftmax, RejectsNonFinite) {
  std::vector<double> z{0.0, std::nan("")};
  EXPECT_THROW(quiet_softmax<double>(z), std::domain_error);
  std::vector<double> inf{std::numeric_limits<double>::infinity()};
  EXPECT_THROW(quiet_softmax<double>(inf), std::domain_error);
}

TEST(QuietSoftmax, PropertyBoundedAndSubNormalised) {
  Rng rng(7);
  std::normal_distribution<double> d(0.0, 4.0);
  std::bernoulli_distribution keep(0.7);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 1 + trial % 17;
    std::vector<double> z(n);
    std::vector<std::uint8_t> a(n);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = d(rng);
      a[i] = keep(rng);
    }
    auto p = quiet_softmax<double>(z, a);
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_GE(p[i], 0.0);
      EXPECT_LE(p[i], 1.0);
      if (!a[i]) {
        EXPECT_EQ(p[i], 0.0);
      }
      s += p[i];
    }
    EXPECT_LT(s, 1.0);
  }
}

TEST(QuietSoftmax, SumApproachesOneForDominantLogit) {
  double prev = 0.0;
  for (double big : {1.0, 5.0, 10.0, 20.0, 40.0}) {
    std::vector<double> z{big, 0.3, -0.2};
    auto p = quiet_softmax<double>(z);
    const double s = p[0] + p[1] + p[2];
    EXPECT_GT(s, prev);
    prev = s;
  }
  EXPECT_NEAR(prev, 1.0, 1e-15);
}

TEST(QuietSoftmax, JacobianAtSymmetricInput) {
  // Finite-difference Jacobian at z = [0, 0]: symmetric, and every row sums to
  // p_i * (1 - sum p) = 1/9 (the mass absorbed by the extra unit).
  const double h = 1e-6;
  double jac[2][2];
  for (int j = 0; j < 2; ++j) {
    std::vector<double> zp{0.0, 0.0}, zm{0.0, 0.0};
    zp[j] += h;
    zm[j] -= h;
    auto pp = quiet_softmax<double>(zp);
    auto pm = quiet_softmax<double>(zm);
    for (int i = 0; i < 2; ++i) jac[i][j] = (pp[i] - pm[i]) / (2 * h);
  }
  EXPECT_NEAR(jac[0][1], jac[1][0], 1e-9);
  EXPECT_NEAR(jac[0][0] + jac[0][1], 1.0 / 9.0, 1e-8);
  EXPECT_NEAR(jac[1][0] + jac[1][1], 1.0 / 9.0, 1e-8);
  EXPECT_NEAR(jac[0][0], 2.0 / 9.0, 1e-8);

  // Backprop through the attention normaliser agrees.
  auto q = random_param("q", 1, 1, 1);
  q.value(0, 0) = 0.0;
  auto k = Parameter<double>("k", Tensor<double>::matrix(2, 1, {0.0, 0.0}));
  auto v = Parameter<double>("v", Tensor<double>::matrix(2, 1, {1.0, 0.0}));
  Var<double> out = ops::attention(leaf(q), leaf(k), leaf(v), 1, {});
  EXPECT_NEAR(out.item(), 1.0 / 3.0, 1e-15);
}

// ---------------------------------------------------------------- gumbel

TEST(Gumbel, PeakedRowAlmostAlwaysPicksArgmax) {
  Rng rng(123);
  int hits = 0;
  auto logits = constant(Tensor<double>::matrix(1, 2, {10.0, -10.0}));
  for (int i = 0; i < 1000; ++i) {
    auto noise = sample_gumbel_noise<double>(1, 2, rng);
    auto s = gumbel_softmax(logits, noise, 0.1, true);
    hits += s.indices[0] == 0;
  }
  EXPECT_GE(hits, 999);
}

TEST(Gumbel, UniformLogitsGiveUniformHistogram) {
  const std::size_t n = 5, draws = 10000;
  Rng rng(9);
  std::vector<int> hist(n, 0);
  auto logits = constant(Tensor<double>(1, n, 0.3));
  for (std::size_t i = 0; i < draws; ++i) {
    auto s = gumbel_softmax(logits, sample_gumbel_noise<double>(1, n, rng), 1.0, true);
    hist[s.indices[0]]++;
  }
  const double mean = double(draws) / n;
  double chi2 = 0;
  for (int c : hist) chi2 += (c - mean) * (c - mean) / mean;
  EXPECT_LT(chi2, 18.467);  // chi-square, 4 dof, alpha = 0.001
}

TEST(Gumbel, HardOutputIsOneHot) {
  Rng rng(4);
  auto logits = constant(random_tensor(6, 7, 5));
  auto s = gumbel_softmax(logits, sample_gumbel_noise<double>(6, 7, rng), 0.7, true);
  for (std::size_t i = 0; i < 6; ++i) {
    int ones = 0;
    for (std::size_t j = 0; j < 7; ++j) {
      const double v = s.output.value()(i, j);
      EXPECT_TRUE(v == 0.0 || v == 1.0);
      ones += v == 1.0;
    }
    EXPECT_EQ(ones, 1);
    EXPECT_EQ(s.output.value()(i, s.indices[i]), 1.0);
    double total = 0;
    for (std::size_t j = 0; j < 7; ++j) total += s.soft(i, j);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Gumbel, RejectsBadArguments) {
  auto logits = constant(random_tensor(2, 3, 1));
  Tensor<double> noise(2, 3);
  EXPECT_THROW(gumbel_softmax(logits, noise, 0.0, true), std::invalid_argument);
  EXPECT_THROW(gumbel_softmax(logits, noise, -1.0, true), std::invalid_argument);
  auto narrow = constant(random_tensor(2, 1, 1));
  EXPECT_THROW(gumbel_softmax(narrow, Tensor<double>(2, 1), 1.0, true), std::invalid_argument);
}

TEST(Gumbel, LowTemperatureIndicesConvergeToArgmaxOfPerturbedLogits) {
  Rng rng(8);
  auto L = random_tensor(10, 6, 3);
  auto noise = sample_gumbel_noise<double>(10, 6, rng);
  auto s = gumbel_softmax(constant(L), noise, 1e-3, false);
  for (std::size_t i = 0; i < 10; ++i) {
    std::size_t arg = 0;
    for (std::size_t j = 1; j < 6; ++j)
      if (L(i, j) + noise(i, j) > L(i, arg) + noise(i, arg)) arg = j;
    EXPECT_EQ(s.indices[i], arg);
    EXPECT_NEAR(s.soft(i, arg), 1.0, 1e-6);
  }
}

TEST(Gumbel, StraightThroughGradientEqualsSoftGradient) {
  Rng rng(11);
  auto noise = sample_gumbel_noise<double>(4, 5, rng);
  auto logits_hard = random_param("l", 4, 5, 2);
  auto logits_soft = logits_hard;
  auto upstream = random_tensor(4, 5, 77);
  {
    auto s = gumbel_softmax(leaf(logits_hard), noise, 0.8, true);
    backward(ops::sum(ops::mul(s.output, constant(upstream))));
  }
  {
    auto s = gumbel_softmax(leaf(logits_soft), noise, 0.8, false);
    backward(ops::sum(ops::mul(s.output, constant(upstream))));
  }
  for (std::size_t i = 0; i < 20; ++i) EXPECT_DOUBLE_EQ(logits_hard.grad[i], logits_soft.grad[i]);
}

TEST(Gumbel, SoftPathPassesGradCheckWithFrozenNoise) {
  Rng rng(12);
  auto noise = sample_gumbel_noise<double>(3, 4, rng);
  auto logits = random_param("logits", 3, 4, 3);
  auto table = random_param("table", 4, 2, 4);
  auto target = random_tensor(3, 2, 5);
  auto rep = grad_check(
      [&] {
        auto s = gumbel_softmax(leaf(logits), noise, 0.9, false);
        return mse(ops::matmul(s.output, leaf(table)), constant(target));
      },
      {&logits, &table});
  EXPECT_LT(rep.max_rel_error(), 1e-6);
}

TEST(Gumbel, TemperatureScheduleIsLinear) {
  EXPECT_DOUBLE_EQ(gumbel_temperature(0, 100), 2.0);
  EXPECT_DOUBLE_EQ(gumbel_temperature(50, 100), 1.25);
  EXPECT_DOUBLE_EQ(gumbel_temperature(100, 100), 0.5);
  EXPECT_DOUBLE_EQ(gumbel_temperature(1000, 100), 0.5);
}

// ---------------------------------------------------------------- losses

TEST(CrossEntropy, PeakedRowIsNearZero) {
  Tensor<double> L(1, 4, 0.0);
  L(0, 2) = 20.0;
  const double ce = cross_entropy(constant(L), {2}).item();
  EXPECT_GE(ce, 0.0);
  EXPECT_LT(ce, 1e-8);
}

TEST(CrossEntropy, UniformIsLogN) {
  Tensor<double> L(7, 150, 0.25);
  std::vector<std::size_t> t{0, 5, 149, 77, 3, 3, 100};
  EXPECT_NEAR(cross_entropy(constant(L), t).item(), std::log(150.0), 1e-6);
  EXPECT_NEAR(std::log(150.0), 5.0106, 1e-4);
}

TEST(CrossEntropy, HandCase) {
  auto L = Tensor<double>::matrix(2, 2, {1, 0, 0, 1});
  // Each row: -log(e / (e + 1)).
  const double expect = std::log(1.0 + std::exp(-1.0));
  EXPECT_NEAR(cross_entropy(constant(L), {0, 1}).item(), expect, 1e-15);
}

TEST(CrossEntropy, RejectsBadTargets) {
  Tensor<double> L(2, 3);
  EXPECT_THROW(cross_entropy(constant(L), {0, 3}), std::out_of_range);
  EXPECT_THROW(cross_entropy(constant(L), {0}), std::invalid_argument);
}

TEST(CrossEntropy, GradCheck) {
  auto L = random_param("logits", 5, 6, 21, 2.0);
  auto rep = grad_check([&] { return cross_entropy(leaf(L), {0, 5, 2, 2, 1}); }, {&L});
  EXPECT_LT(rep.max_rel_error(), 1e-6);
}

TEST(Mse, Basics) {
  auto a = Tensor<double>::matrix(1, 2, {0, 0});
  auto b = Tensor<double>::matrix(1, 2, {1, 1});
  EXPECT_EQ(mse(constant(a), constant(a)).item(), 0.0);
  EXPECT_EQ(mse(constant(a), constant(b)).item(), 1.0);
  EXPECT_THROW(mse(constant(a), constant(Tensor<double>(2, 1))), std::invalid_argument);
}

TEST(Mse, MatchesLoopOracle) {
  auto a = random_tensor(3, 3, 1), b = random_tensor(3, 3, 2);
  double s = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) s += (a(i, j) - b(i, j)) * (a(i, j) - b(i, j));
  EXPECT_NEAR(mse(constant(a), constant(b)).item(), s / 9.0, 1e-15);
}

TEST(ContrastiveNll, EqualScoresGiveLogOfCandidateCount) {
  Tensor<double> S(3, 12, 0.7);
  std::vector<std::vector<std::size_t>> cand(3);
  for (auto& c : cand)
    for (std::size_t j = 0; j < 11; ++j) c.push_back(j);
  EXPECT_NEAR(contrastive_nll(constant(S), cand).item(), std::log(11.0), 1e-14);
}

// ---------------------------------------------------------------- op gradients

TEST(OpGradients, LinearLayerWithMse) {
  auto x = random_param("x", 4, 3, 1);
  auto w = random_param("w", 3, 5, 2);
  auto b = random_param("b", 1, 5, 3);
  auto y = random_tensor(4, 5, 4);
  auto rep = grad_check([&] { return mse(ops::linear(leaf(x), leaf(w), leaf(b)), constant(y)); }, {&x, &w, &b});
  EXPECT_LT(rep.max_rel_error(), 1e-6);
}

TEST(OpGradients, ElementwiseAndNorms) {
  auto x = random_param("x", 3, 6, 5);
  auto g = random_param("g", 1, 6, 6);
  auto b = random_param("b", 1, 6, 7);
  auto y = random_param("y", 3, 6, 8);
  auto check = [&](auto fn, std::vector<Parameter<double>*> ps) {
    auto rep = grad_check([&] { return probe_sum(fn()); }, ps);
    EXPECT_LT(rep.max_rel_error(), 1e-6);
  };
  check([&] { return ops::swish(leaf(x)); }, {&x});
  check([&] { return ops::glu(leaf(x)); }, {&x});
  check([&] { return ops::layer_norm(leaf(x), leaf(g), leaf(b)); }, {&x, &g, &b});
  check([&] { return ops::rms_norm(leaf(x), leaf(g)); }, {&x, &g});
  check([&] { return ops::l2_normalize_rows(leaf(x)); }, {&x});
  check([&] { return ops::mul(leaf(x), leaf(y)); }, {&x, &y});
  check([&] { return ops::sub(leaf(x), leaf(y)); }, {&x, &y});
  check([&] { return ops::concat_cols(leaf(x), leaf(y)); }, {&x, &y});
  check([&] { return ops::concat_rows<double>({leaf(x), leaf(y)}); }, {&x, &y});
  check([&] { return ops::slice_rows(leaf(x), 1, 2); }, {&x});
  check([&] { return ops::avg_pool_rows(leaf(x), 2); }, {&x});
  check([&] { return ops::repeat_rows(leaf(x), 2, 5); }, {&x});
  check([&] { return ops::gather_rows(leaf(x), {2, 0, 2}); }, {&x});
  check([&] { return ops::broadcast_row(leaf(g), 4); }, {&g});
  check([&] { return ops::matmul_nt(leaf(x), leaf(y)); }, {&x, &y});
  check([&] { return l1_loss(leaf(x), leaf(y)); }, {&x, &y});
}

TEST(OpGradients, MaskedAttention) {
  auto q = random_param("q", 4, 6, 1);
  auto k = random_param("k", 5, 6, 2);
  auto v = random_param("v", 5, 6, 3);
  std::vector<std::uint8_t> allowed(20, 1);
  allowed[3] = allowed[4] = allowed[9] = 0;
  for (int j = 0; j < 5; ++j) allowed[15 + j] = 0;  // last query sees nothing
  auto rep = grad_check([&] { return probe_sum(ops::attention(leaf(q), leaf(k), leaf(v), 2, allowed)); },
                        {&q, &k, &v});
  EXPECT_LT(rep.max_rel_error(), 1e-6);
}

TEST(OpGradients, CausalConvWithContext) {
  auto x = random_param("x", 5, 3, 1);
  auto w = random_param("w", 3, 3, 2);
  auto b = random_param("b", 1, 3, 3);
  auto ctx = random_tensor(2, 3, 4);
  auto rep = grad_check(
      [&] { return probe_sum(ops::causal_depthwise_conv(leaf(x), leaf(w), leaf(b), ctx)); }, {&x, &w, &b});
  EXPECT_LT(rep.max_rel_error(), 1e-6);
}

TEST(OpGradients, ContrastiveNll) {
  auto s = random_param("s", 3, 8, 9);
  std::vector<std::vector<std::size_t>> cand{{1, 2, 3}, {7, 0, 0, 5}, {4, 6}};
  auto rep = grad_check([&] { return contrastive_nll(leaf(s), cand); }, {&s});
  EXPECT_LT(rep.max_rel_error(), 1e-6);
}

TEST(OpGradients, WeightedSumOfLosses) {
  auto x = random_param("x", 3, 4, 1);
  auto y = random_tensor(3, 4, 2);
  auto rep = grad_check(
      [&] {
        auto a = mse(leaf(x), constant(y));
        auto b = l1_loss(leaf(x), constant(y));
        auto c = cross_entropy(leaf(x), {0, 1, 3});
        return ops::weighted_sum<double>({a, b, c}, {45.0, 1.0, 10.0});
      },
      {&x});
  EXPECT_LT(rep.max_rel_error(), 1e-6);
}

// ---------------------------------------------------------------- adam

TEST(Adam, ZeroGradientLeavesParameter) {
  Parameter<double> p("p", Tensor<double>::matrix(1, 3, {1, -2, 3}));
  Adam<double> opt;
  std::vector<Parameter<double>*> ps{&p};
  opt.step(ps);
  EXPECT_EQ(p.value[0], 1.0);
  EXPECT_EQ(p.value[1], -2.0);
  EXPECT_EQ(p.value[2], 3.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Parameter<double> p("p", Tensor<double>::scalar(0.5));
  p.grad[0] = 1.0;
  Adam<double> opt({0.1, 0.9, 0.999, 1e-8});
  std::vector<Parameter<double>*> ps{&p};
  opt.step(ps);
  // m_hat = 1, v_hat = 1  ->  step = lr / (1 + eps)
  EXPECT_NEAR(p.value[0], 0.5 - 0.1 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(p.grad[0], 0.0);
}

TEST(Adam, MatchesScalarReferenceOverTwoSteps) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, g = 0.37;
  double theta = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    theta -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
  Parameter<double> p("p", Tensor<double>::scalar(1.0));
  Adam<double> opt({lr, b1, b2, eps});
  std::vector<Parameter<double>*> ps{&p};
  for (int t = 0; t < 2; ++t) {
    p.grad[0] = g;
    opt.step(ps);
  }
  EXPECT_NEAR(p.value[0], theta, 1e-15);
}

TEST(Adam, RejectsNonFiniteGradient) {
  Parameter<double> p("p", Tensor<double>::scalar(1.0));
  p.grad[0] = std::numeric_limits<double>::infinity();
  Adam<double> opt;
  std::vector<Parameter<double>*> ps{&p};
  EXPECT_THROW(opt.step(ps), std::domain_error);
}

// ---------------------------------------------------------------- autograd plumbing

TEST(Autograd, NoGradBuildsNoGraph) {
  auto x = random_param("x", 2, 2, 1);
  NoGradGuard ng;
  auto y = ops::swish(leaf(x));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->parents.empty());
}

TEST(Autograd, SinkCollectsWithoutTouchingParameters) {
  auto x = random_param("x", 2, 2, 1);
  GradSink<double> sink;
  backward(ops::sum(ops::mul(leaf(x), leaf(x))), sink);
  EXPECT_EQ(x.grad[0], 0.0);
  ASSERT_FALSE(sink.entries.empty());
  sink.apply();
  EXPECT_NEAR(x.grad[0], 2 * x.value[0], 1e-15);
}

// ---------------------------------------------------------------- checkpoint

TEST(Checkpoint, BitExactRoundTrip) {
  Rng rng(3);
  Parameter<float> a("enc.w", normal_init<float>(3, 4, 1.0, rng));
  Parameter<float> b("scalar", Tensor<float>::scalar(-0.0f));
  Parameter<float> c("vec", Tensor<float>({5}, std::vector<float>{1e-30f, 3.4e38f, -1.5f, 0.1f, 7.0f}));
  std::vector<Parameter<float>*> ps{&a, &b, &c};
  std::ostringstream first;
  write_checkpoint(first, parameters_to_entries<float>(ps, true));
  std::istringstream in(first.str());
  auto entries = read_checkpoint(in);
  std::ostringstream second;
  write_checkpoint(second, entries);
  EXPECT_EQ(first.str(), second.str());
  EXPECT_EQ(first.str().substr(0, 8), "DVC3CKPT");

  Parameter<float> a2("enc.w", Tensor<float>(3, 4));
  Parameter<float> b2("scalar", Tensor<float>::scalar(1.0f));
  Parameter<float> c2("vec", Tensor<float>(std::vector<std::size_t>{5}, 0.0f));
  std::vector<Parameter<float>*> ps2{&a2, &b2, &c2};
  load_parameters<float>(ps2, entries);
  for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(a2.value[i], a.value[i]);
  EXPECT_TRUE(std::signbit(b2.value[0]));
  EXPECT_EQ(c2.value[1], 3.4e38f);
}

TEST(Checkpoint, RejectsCorruption) {
  std::istringstream bad_magic(std::string("DVC3CKPX\x01\x00", 10));
  EXPECT_THROW(read_checkpoint(bad_magic), std::runtime_error);

  Parameter<float> a("w", Tensor<float>(2, 2, 1.0f));
  std::vector<Parameter<float>*> ps{&a};
  std::ostringstream os;
  write_checkpoint(os, parameters_to_entries<float>(ps, false));
  std::string truncated = os.str().substr(0, os.str().size() - 3);
  std::istringstream in(truncated);
  EXPECT_THROW(read_checkpoint(in), std::runtime_error);

  std::string flipped = os.str();
  flipped[flipped.size() - 6] ^= 0x01;  // low bit of the last value
  std::istringstream fin(flipped);
  EXPECT_THROW(read_checkpoint(fin), std::runtime_error);

  Parameter<float> wrong("w", Tensor<float>(3, 2));
  std::vector<Parameter<float>*> ps2{&wrong};
  std::istringstream ok(os.str());
  EXPECT_THROW(load_parameters<float>(ps2, read_checkpoint(ok)), std::runtime_error);
}
