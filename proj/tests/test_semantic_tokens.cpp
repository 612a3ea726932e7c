#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "dvc3/probe.hpp"
#include "dvc3/semantic_tokens.hpp"
#include "test_util.hpp"

using namespace dvc3;

namespace {

Tensor<double> points(std::initializer_list<std::pair<double, double>> p) {
  Tensor<double> x(p.size(), 2);
  std::size_t i = 0;
  for (auto [a, b] : p) {
    x(i, 0) = a;
    x(i, 1) = b;
    ++i;
  }
  return x;
}

double inertia_of(const Tensor<double>& x, const Tensor<double>& c) {
  double s = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double best = 1e300;
    for (std::size_t k = 0; k < c.rows(); ++k) {
      double d = 0;
      for (std::size_t j = 0; j < x.cols(); ++j) d += (x(i, j) - c(k, j)) * (x(i, j) - c(k, j));
      best = std::min(best, d);
    }
    s += best;
  }
  return s;
}

// Smallest within-cluster sum of squares over every assignment of M points to K labels.
double brute_force_optimum(const Tensor<double>& x, std::size_t k) {
  const std::size_t m = x.rows(), d = x.cols();
  std::vector<std::size_t> lab(m, 0);
  double best = 1e300;
  for (;;) {
    std::vector<std::vector<double>> sum(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> cnt(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      cnt[lab[i]]++;
      for (std::size_t j = 0; j < d; ++j) sum[lab[i]][j] += x(i, j);
    }
    double s = 0;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double mu = sum[lab[i]][j] / double(cnt[lab[i]]);
        s += (x(i, j) - mu) * (x(i, j) - mu);
      }
    best = std::min(best, s);
    std::size_t p = 0;
    while (p < m && ++lab[p] == k) lab[p++] = 0;
    if (p == m) break;
  }
  return best;
}

CorpusSpec small_spec(std::uint64_t seed = 3) {
  CorpusSpec s;
  s.utterances_per_speaker = 6;
  s.seed = seed;
  return s;
}

}  // namespace

// ---------------------------------------------------------------- k-means

TEST(KMeans, SquareCornersSplitIntoTwoPairs) {
  auto x = points({{0, 0}, {0, 1}, {10, 0}, {10, 1}});
  auto m = kmeans_fit(x, 2, 50, 1);
  EXPECT_NEAR(m.inertia(), 1.0, 1e-12);
  auto t = tokenize(x, m);
  EXPECT_EQ(t[0], t[1]);
  EXPECT_EQ(t[2], t[3]);
  EXPECT_NE(t[0], t[2]);
}

TEST(KMeans, SeparatedClustersReachBruteForceOptimum) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    std::normal_distribution<double> nd(0.0, 0.3);
    Tensor<double> x(8, 2);
    const double cx[3] = {0, 6, -6}, cy[3] = {0, 5, 5};
    for (std::size_t i = 0; i < 8; ++i) {
      x(i, 0) = cx[i % 3] + nd(rng);
      x(i, 1) = cy[i % 3] + nd(rng);
    }
    auto m = kmeans_fit(x, 3, 100, seed);
    EXPECT_NEAR(m.inertia(), brute_force_optimum(x, 3), 1e-9) << "seed " << seed;
  }
}

TEST(KMeans, NeverBeatsBruteForceOnRandomData) {
  for (std::uint64_t seed = 10; seed < 20; ++seed) {
    auto x = dvc3::testing::random_tensor(7, 2, seed);
    auto m = kmeans_fit(x, 2, 100, seed);
    EXPECT_GE(m.inertia(), brute_force_optimum(x, 2) - 1e-9);
    EXPECT_NEAR(m.inertia(), inertia_of(x, m.centroids), 1e-9);
  }
}

TEST(KMeans, KEqualsMGivesZeroInertia) {
  auto x = dvc3::testing::random_tensor(5, 3, 2);
  auto m = kmeans_fit(x, 5, 20, 4);
  EXPECT_NEAR(m.inertia(), 0.0, 1e-20);
  auto t = tokenize(x, m);
  std::sort(t.begin(), t.end());
  EXPECT_EQ(std::unique(t.begin(), t.end()), t.end());
}

TEST(KMeans, InertiaIsMonotone) {
  auto x = dvc3::testing::random_tensor(200, 4, 6);
  auto m = kmeans_fit(x, 7, 100, 2);
  ASSERT_GE(m.inertia_history.size(), 2u);
  for (std::size_t i = 1; i < m.inertia_history.size(); ++i)
    EXPECT_LE(m.inertia_history[i], m.inertia_history[i - 1] + 1e-9);
}

TEST(KMeans, PermutationInvariantGivenInitialCentres) {
  auto x = dvc3::testing::random_tensor(60, 3, 8);
  auto init = kmeans_plus_plus(x, 5, 9);
  std::vector<std::size_t> perm(60);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), Rng(3));
  Tensor<double> xp(60, 3);
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t j = 0; j < 3; ++j) xp(i, j) = x(perm[i], j);
  auto a = kmeans_lloyd(x, init, 100), b = kmeans_lloyd(xp, init, 100);
  for (std::size_t k = 0; k < 5; ++k)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a.centroids(k, j), b.centroids(k, j), 1e-12);
  auto ta = tokenize(x, a), tb = tokenize(xp, b);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_EQ(tb[i], ta[perm[i]]);
}

TEST(KMeans, Errors) {
  auto x = dvc3::testing::random_tensor(3, 2, 1);
  EXPECT_THROW(kmeans_fit(x, 4, 10, 1), std::invalid_argument);
  EXPECT_THROW(kmeans_fit(x, 0, 10, 1), std::invalid_argument);
  auto m = kmeans_fit(x, 2, 10, 1);
  EXPECT_THROW(tokenize(dvc3::testing::random_tensor(3, 3, 1), m), std::invalid_argument);
}

TEST(Tokenize, NearestCentreWithTiesToLowerIndex) {
  KMeansModel m;
  m.centroids = points({{0, 0}, {2, 0}, {0, 5}});
  auto x = points({{1, 0}, {0.1, 4}, {1.9, 0.1}, {-3, 0}});
  EXPECT_EQ(tokenize(x, m), (std::vector<std::size_t>{0, 2, 1, 0}));
}

TEST(PooledFeatures, WindowMeansAndNormalisation) {
  Tensor<float> mel({5, 1}, {1, 3, 5, 7, 10});
  auto p = pooled_features(mel, 2, false);
  ASSERT_EQ(p.rows(), 3u);
  EXPECT_DOUBLE_EQ(p(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(p(1, 0), 6.0);
  EXPECT_DOUBLE_EQ(p(2, 0), 10.0);
  auto q = pooled_features(mel, 2, true);
  EXPECT_NEAR(q(0, 0) + q(1, 0) + q(2, 0), 0.0, 1e-12);
  EXPECT_NEAR(q(0, 0), -4.0, 1e-12);
}

TEST(ClusterPurity, HandCases) {
  EXPECT_DOUBLE_EQ(cluster_purity({0, 0, 1, 1}, {5, 5, 6, 6}), 1.0);
  EXPECT_DOUBLE_EQ(cluster_purity({0, 0, 0, 0}, {1, 1, 2, 3}), 0.5);
  EXPECT_THROW(cluster_purity({0}, {1, 2}), std::invalid_argument);
}

// ---------------------------------------------------------------- corpus

TEST(Corpus, DeterministicUnderSeed) {
  auto a = generate_corpus(small_spec(3)), b = generate_corpus(small_spec(3)), c = generate_corpus(small_spec(4));
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    auto va = a[i].mel.values(), vb = b[i].mel.values();
    EXPECT_TRUE(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
    differs = differs || a[i].tokens != c[i].tokens;
  }
  EXPECT_TRUE(differs);
}

TEST(Corpus, ShapeContract) {
  auto spec = small_spec();
  auto utts = generate_corpus(spec);
  ASSERT_EQ(utts.size(), spec.num_speakers * spec.utterances_per_speaker);
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const auto& u = utts[i];
    EXPECT_EQ(u.speaker, i / spec.utterances_per_speaker);
    EXPECT_GE(u.tokens.size(), spec.min_tokens);
    EXPECT_LE(u.tokens.size(), spec.max_tokens);
    EXPECT_EQ(u.mel.rows(), spec.downsample * u.tokens.size());
    EXPECT_EQ(u.mel.cols(), spec.mel_bins);
    for (auto t : u.tokens) EXPECT_LT(t, spec.token_vocab);
    EXPECT_TRUE(u.mel.all_finite());
  }
}

TEST(Corpus, SelfTransitionRate) {
  CorpusSpec spec;
  Rng rng(5);
  auto t = markov_tokens(20000, spec, rng);
  std::size_t same = 0;
  for (std::size_t i = 1; i < t.size(); ++i) same += t[i] == t[i - 1];
  EXPECT_NEAR(double(same) / double(t.size() - 1), spec.self_transition, 0.02);
}

TEST(Corpus, Validation) {
  CorpusSpec s;
  s.num_speakers = 0;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = {};
  s.min_tokens = 50;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = {};
  EXPECT_EQ(CorpusSpec::from_kv(s.to_kv()).to_kv(), s.to_kv());
}

TEST(Corpus, TokensAndSpeakersAreLinearlyDecodable) {
  auto utts = generate_corpus(small_spec());
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> tok;
  Tensor<double> spk_x(utts.size(), 80);
  std::vector<std::size_t> spk;
  for (std::size_t u = 0; u < utts.size(); ++u) {
    auto p = pooled_features(utts[u].mel, 2, false);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      rows.emplace_back(p.row(i), p.row(i) + p.cols());
      tok.push_back(utts[u].tokens[i]);
      for (std::size_t j = 0; j < 80; ++j) spk_x(u, j) += p(i, j) / double(p.rows());
    }
    spk.push_back(utts[u].speaker);
  }
  Tensor<double> tok_x(rows.size(), 80);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), tok_x.row(i));
  EXPECT_GE(linear_probe(tok_x, tok, 16).test_accuracy, 0.9);
  EXPECT_GE(linear_probe(spk_x, spk, 8).test_accuracy, 0.9);
}

TEST(Corpus, KMeansRecoversGroundTruthTokens) {
  auto spec = small_spec();
  auto utts = generate_corpus(spec);
  std::vector<Tensor<double>> feats;
  std::size_t total = 0;
  for (const auto& u : utts) {
    feats.push_back(pooled_features(u.mel, spec.downsample, true));
    total += feats.back().rows();
  }
  Tensor<double> x(total, spec.mel_bins);
  std::vector<std::size_t> truth;
  std::size_t r = 0;
  for (std::size_t u = 0; u < utts.size(); ++u)
    for (std::size_t i = 0; i < feats[u].rows(); ++i, ++r) {
      std::copy(feats[u].row(i), feats[u].row(i) + spec.mel_bins, x.row(r));
      truth.push_back(utts[u].tokens[i]);
    }
  auto model = kmeans_fit(x, spec.token_vocab, 100, 1);
  EXPECT_GE(cluster_purity(tokenize(x, model), truth), 0.85);
}

TEST(Corpus, FileRoundTrip) {
  auto spec = small_spec();
  spec.utterances_per_speaker = 2;
  auto utts = generate_corpus(spec);
  auto dir = std::filesystem::temp_directory_path() / "dvc3_corpus_test";
  std::filesystem::remove_all(dir);
  write_corpus(dir, spec, utts);
  auto back = read_corpus(dir);
  ASSERT_EQ(back.utterances.size(), utts.size());
  EXPECT_EQ(back.spec.to_kv(), spec.to_kv());
  for (std::size_t i = 0; i < utts.size(); ++i) {
    EXPECT_EQ(back.utterances[i].tokens, utts[i].tokens);
    EXPECT_EQ(back.utterances[i].speaker, utts[i].speaker);
    auto a = back.utterances[i].mel.values(), b = utts[i].mel.values();
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
  }
  std::filesystem::remove(utterance_path(dir, 1));
  EXPECT_THROW(read_corpus(dir), std::runtime_error);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_corpus(dir), std::runtime_error);
}

TEST(Corpus, RejectsCorruptUtterance) {
  std::stringstream ss;
  ss << "NOTMAGIC";
  EXPECT_THROW(read_utterance(ss), std::runtime_error);
}

// ---------------------------------------------------------------- probe

TEST(LinearProbe, SeparableAndRandomLabels) {
  Rng rng(4);
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor<double> x(300, 5);
  std::vector<std::size_t> y(300), noise_y(300);
  for (std::size_t i = 0; i < 300; ++i) {
    y[i] = i % 3;
    noise_y[i] = rng() % 3;
    for (std::size_t j = 0; j < 5; ++j) x(i, j) = nd(rng) + (j == y[i] ? 4.0 : 0.0);
  }
  EXPECT_GE(linear_probe(x, y, 3).test_accuracy, 0.95);
  EXPECT_LE(linear_probe(x, noise_y, 3).test_accuracy, 0.5);
  EXPECT_THROW(linear_probe(x, std::vector<std::size_t>(300, 3), 3), std::out_of_range);
}
