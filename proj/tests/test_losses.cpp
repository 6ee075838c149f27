#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "pose/losses.hpp"

using namespace pose;
using namespace pose::losses;

namespace {

Tensor<double> random_embeddings(Rng& rng, int n, int d) {
  Tensor<double> t(n, d, 1, 1);
  for (auto& v : t.vec()) v = normal(rng);
  return t;
}

double sqdist(const Tensor<double>& e, int i, int j) {
  double s = 0;
  for (std::size_t k = 0; k < e.sample_size(); ++k) s += std::pow(e.sample(i)[k] - e.sample(j)[k], 2);
  return s;
}

double brute_triplet(const Tensor<double>& e, const std::vector<int>& labels, double m) {
  double total = 0;
  int count = 0;
  const int n = e.n();
  for (int a = 0; a < n; ++a)
    for (int p = 0; p < n; ++p)
      for (int q = 0; q < n; ++q)
        if (a != p && labels[a] == labels[p] && labels[q] != labels[a]) {
          total += std::max(0.0, sqdist(e, a, p) - sqdist(e, a, q) + m);
          ++count;
        }
  return count ? total / count : 0.0;
}

LossConfig paper_constants() { return LossConfig{}; }

}  // namespace

TEST(CrossEntropy, Examples) {
  const std::vector<double> uniform4{0.3, 0.3, 0.3, 0.3};
  EXPECT_NEAR(cross_entropy_loss<double>(uniform4, 2), std::log(4.0), 1e-12);
  const std::vector<double> peaked{10, 0, 0};
  EXPECT_NEAR(cross_entropy_loss<double>(peaked, 0), std::log1p(2 * std::exp(-10.0)), 1e-12);
  EXPECT_NEAR(cross_entropy_loss<double>(peaked, 0), 9.08e-5, 1e-7);
  const std::vector<double> wrong{0, 10};
  EXPECT_NEAR(cross_entropy_loss<double>(wrong, 0), 10 + std::log1p(std::exp(-10.0)), 1e-12);
}

TEST(CrossEntropy, RejectsBadLabel) {
  const std::vector<double> l{1, 2, 3};
  EXPECT_THROW(cross_entropy_loss<double>(l, 3), InvalidLabel);
  EXPECT_THROW(cross_entropy_loss<double>(l, -1), InvalidLabel);
}

TEST(CrossEntropy, LargeLogitsStayFinite) {
  const std::vector<double> l{1000, -1000};
  EXPECT_NEAR(cross_entropy_loss<double>(l, 1), 2000, 1e-9);
  EXPECT_GE(cross_entropy_loss<double>(l, 0), 0.0);
}

TEST(CrossEntropy, BatchIsMean) {
  Tensor<double> logits(2, 3, 1, 1);
  logits.vec() = {1, 2, 3, 0, 0, 5};
  const std::vector<int> y{2, 0};
  const auto r = cross_entropy_batch(logits, std::span<const int>(y));
  const double a = cross_entropy_loss<double>(logits.sample(0), 2), b = cross_entropy_loss<double>(logits.sample(1), 0);
  EXPECT_NEAR(r.value, (a + b) / 2, 1e-12);
}

TEST(Triplet, HingeClamps) {
  Tensor<double> e(3, 1, 1, 1);
  e.vec() = {0.0, 0.0, 1.0};
  const std::vector<int> y{0, 0, 1};
  // anchors 0 and 1 each have one positive and one negative; the remaining
  // anchor has no positive.
  const auto r = triplet_metric_loss(e, std::span<const int>(y), 0.3);
  EXPECT_EQ(r.value, 0.0);
  EXPECT_EQ(r.active, 0u);
}

TEST(Triplet, EqualDistancesLeaveMargin) {
  Tensor<double> e(3, 2, 1, 1);
  e.vec() = {0, 0, 1, 0, 0, 1};
  const std::vector<int> y{0, 0, 1};
  const auto mined = mine_triplets(y);
  ASSERT_EQ(mined.size(), 2u);
  // anchor 0: |a-p|^2 = 1 = |a-n|^2 -> 0.3. anchor 1: |a-p|^2 = 1, |a-n|^2 = 2 -> 0.
  const auto r = triplet_metric_loss(e, std::span<const int>(y), 0.3);
  EXPECT_NEAR(r.value, 0.3 / 2, 1e-12);
}

TEST(Triplet, MatchesExhaustiveEnumeration) {
  Rng rng(31);
  for (int t = 0; t < 20; ++t) {
    const auto e = random_embeddings(rng, 8, 4);
    std::vector<int> y(8);
    for (auto& l : y) l = static_cast<int>(uniform_index(rng, 3));
    const auto r = triplet_metric_loss(e, std::span<const int>(y), 0.3);
    EXPECT_NEAR(r.value, brute_triplet(e, y, 0.3), 1e-12);
  }
}

TEST(Triplet, EmptyFlagged) {
  Tensor<double> e(3, 2, 1, 1, 1.0);
  const std::vector<int> distinct{0, 1, 2}, same{4, 4, 4};
  const auto a = triplet_metric_loss(e, std::span<const int>(distinct), 0.3);
  EXPECT_TRUE(a.empty);
  EXPECT_EQ(a.value, 0.0);
  EXPECT_TRUE(triplet_metric_loss(e, std::span<const int>(same), 0.3).empty);
}

TEST(Triplet, RotationInvariant) {
  Rng rng(32);
  auto e = random_embeddings(rng, 8, 2);
  const std::vector<int> y{0, 0, 1, 1, 2, 2, 3, 3};
  const double before = triplet_metric_loss(e, std::span<const int>(y), 0.5).value;
  const double th = 0.7;
  for (int i = 0; i < 8; ++i) {
    const double a = e.at(i, 0, 0, 0), b = e.at(i, 1, 0, 0);
    e.at(i, 0, 0, 0) = std::cos(th) * a - std::sin(th) * b;
    e.at(i, 1, 0, 0) = std::sin(th) * a + std::cos(th) * b;
  }
  EXPECT_NEAR(triplet_metric_loss(e, std::span<const int>(y), 0.5).value, before, 1e-12);
}

TEST(MineTriplets, Examples) {
  EXPECT_EQ(mine_triplets(std::vector<int>{0, 0, 1, 1}).size(), 8u);
  EXPECT_TRUE(mine_triplets(std::vector<int>{0, 1, 2}).empty());
  EXPECT_TRUE(mine_triplets(std::vector<int>{3, 3, 3}).empty());
  const auto t = mine_triplets(std::vector<int>{0, 0, 1, 1});
  EXPECT_EQ(t.front(), (Triplet{0, 1, 2}));
  EXPECT_EQ(t.back(), (Triplet{3, 2, 1}));
  EXPECT_TRUE(std::is_sorted(t.begin(), t.end(), [](const Triplet& a, const Triplet& b) {
    return std::tie(a.anchor, a.positive, a.negative) < std::tie(b.anchor, b.positive, b.negative);
  }));
}

TEST(ExtendLabel, Examples) {
  EXPECT_EQ(extend_label(0, 5), 5);
  EXPECT_EQ(extend_label(4, 5), 9);
  EXPECT_THROW(extend_label(5, 5), InvalidLabel);
  EXPECT_THROW(extend_label(-1, 5), InvalidLabel);
  const int k = 6;
  for (int i = 0; i < k; ++i) {
    EXPECT_GE(extend_label(i, k), k);
    EXPECT_LT(extend_label(i, k), 2 * k);
  }
}

TEST(Reconstruction, Examples) {
  Tensor<double> x(2, 3, 4, 4, 0.4);
  EXPECT_EQ(reconstruction_loss(x, x).value, 0.0);
  Tensor<double> off(2, 3, 4, 4, 0.5);
  EXPECT_NEAR(reconstruction_loss(x, off).value, 0.01, 1e-12);
  Tensor<double> tiny(2, 3, 4, 4, 0.41);
  const auto r = reconstruction_loss(x, tiny, 2.5e-3);
  EXPECT_NEAR(r.raw_mse, 1e-4, 1e-12);
  EXPECT_EQ(r.value, 2.5e-3);
  EXPECT_TRUE(r.clamped);
  for (double g : r.grad.vec()) EXPECT_EQ(g, 0.0);
  EXPECT_THROW(reconstruction_loss(x, Tensor<double>(2, 3, 4, 5)), InvalidInput);
}

TEST(Reconstruction, ZeroGradientIffBelowFloor) {
  Tensor<double> x(1, 1, 2, 2, 0.0);
  for (double off : {0.01, 0.04, 0.049, 0.051, 0.2}) {
    Tensor<double> y(1, 1, 2, 2, off);
    const auto r = reconstruction_loss(x, y, 2.5e-3);
    const bool all_zero = std::all_of(r.grad.vec().begin(), r.grad.vec().end(), [](double g) { return g == 0.0; });
    EXPECT_EQ(all_zero, off * off < 2.5e-3) << off;
  }
}

TEST(Diversity, Examples) {
  const auto cfg = paper_constants();
  const std::vector<double> v{1, 2, 3};
  EXPECT_NEAR(diversity_loss(v, v, v, cfg).value, -9.4e-3, 1e-15);
  const std::vector<double> e0{1, 0, 0}, e1{0, 1, 0}, e2{0, 0, 1};
  EXPECT_NEAR(diversity_loss(e0, e1, e2, cfg).value, 0.0, 1e-15);
  const std::vector<double> neg{-1, -2, -3};
  EXPECT_NEAR(diversity_loss(v, neg, v, cfg).value, -cfg.alpha - cfg.beta * cfg.d_margin, 1e-15);
}

TEST(Diversity, ZeroVectorRejected) {
  const auto cfg = paper_constants();
  const std::vector<double> v{1, 2}, z{0, 0};
  EXPECT_THROW(diversity_loss(v, z, v, cfg), UndefinedCosine);
  EXPECT_THROW(diversity_loss(z, v, v, cfg), UndefinedCosine);
}

TEST(Diversity, ScaleInvariant) {
  Rng rng(33);
  const auto cfg = paper_constants();
  for (int t = 0; t < 20; ++t) {
    std::vector<double> a(5), b(5), c(5);
    for (int k = 0; k < 5; ++k) {
      a[k] = normal(rng);
      b[k] = normal(rng);
      c[k] = normal(rng);
    }
    const double base = diversity_loss(a, b, c, cfg).value;
    auto sa = a, sb = b, sc = c;
    for (int k = 0; k < 5; ++k) {
      sa[k] *= 3.7;
      sb[k] *= 0.01;
      sc[k] *= 250.0;
    }
    EXPECT_NEAR(diversity_loss(sa, sb, sc, cfg).value, base, 1e-14);
  }
}

TEST(Diversity, ClampZeroesSecondTerm) {
  const auto cfg = paper_constants();
  const std::vector<double> n{1, 0.1, 0}, o{0, 1, 0}, k{1, 0.12, 0.01};
  const auto r = diversity_loss(n, o, k, cfg);
  ASSERT_GT(r.cos_new_known, cfg.d_margin);
  EXPECT_TRUE(r.clamped);
  for (double g : r.grad_new_second_term) EXPECT_EQ(g, 0.0);
  const std::vector<double> far{0, 0, 1};
  const auto u = diversity_loss(n, o, far, cfg);
  EXPECT_FALSE(u.clamped);
  EXPECT_TRUE(std::any_of(u.grad_new_second_term.begin(), u.grad_new_second_term.end(), [](double g) { return g != 0; }));
}

TEST(Spectral, IdentityAndMatchingTargetIsZero) {
  Rng rng(34);
  Tensor<double> x(2, 3, 8, 8);
  for (auto& v : x.vec()) v = uniform01(rng);
  const auto target = spectrum::mean_profile(x, false);
  const auto r = spectral_loss(x, x, x, target, paper_constants());
  EXPECT_NEAR(r.value, 0.0, 1e-15);
}

TEST(Spectral, IdentityWithOtherTargetIsWeightedDistance) {
  Rng rng(35);
  Tensor<double> x(2, 3, 8, 8), y(2, 3, 8, 8);
  for (auto& v : x.vec()) v = uniform01(rng);
  for (auto& v : y.vec()) v = uniform01(rng);
  const auto cfg = paper_constants();
  const auto src = spectrum::mean_profile(x, false), target = spectrum::mean_profile(y, false);
  const auto r = spectral_loss(x, x, x, target, cfg);
  EXPECT_NEAR(r.value, cfg.lambda_spectral * spectrum::profile_distance(src, target), 1e-12);
}

TEST(Spectral, SumOfConstituents) {
  Rng rng(36);
  const auto cfg = paper_constants();
  for (int t = 0; t < 5; ++t) {
    Tensor<double> x(3, 3, 6, 6), ax(3, 3, 6, 6), src(2, 3, 6, 6), tgt(2, 3, 6, 6);
    for (auto* p : {&x, &ax, &src, &tgt})
      for (auto& v : p->vec()) v = uniform01(rng);
    const auto target = spectrum::mean_profile(tgt, false);
    // independent profile: oracle DFT of each luminance, enumerated bins, averaged.
    std::vector<double> prof(3, 0.0);
    for (int i = 0; i < 2; ++i) {
      const auto p = oracle::azimuthal(oracle::power_spectrum(spectrum::luminance(src, i)));
      for (int b = 0; b < 3; ++b) prof[b] += p[b] / 2;
    }
    double dist = 0;
    for (int b = 0; b < 3; ++b) dist += std::pow(prof[b] - target.values[b], 2);
    double mse = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mse += std::pow(x[i] - ax[i], 2) / x.size();
    EXPECT_NEAR(spectral_loss(x, ax, src, target, cfg).value, mse + cfg.lambda_spectral * std::sqrt(dist), 1e-10);
  }
}

TEST(Spectral, GridMismatchRejected) {
  Tensor<double> x(1, 3, 8, 8, 0.5);
  spectrum::SpectrumProfile wrong{{1, 2, 3}, false};
  EXPECT_THROW(spectral_loss(x, x, x, wrong, paper_constants()), InvalidInput);
  spectrum::SpectrumProfile normed{{1, 0, 0, 0}, true};
  EXPECT_THROW(spectral_loss(x, x, x, normed, paper_constants()), InvalidInput);
}

TEST(TaskLoss, SumOfConstituents) {
  Rng rng(37);
  const auto cfg = paper_constants();
  const int k = 3;
  const std::vector<int> y{0, 0, 1, 1, 2, 2};
  for (int t = 0; t < 5; ++t) {
    const auto logits = random_embeddings(rng, 6, k);
    const auto zk = random_embeddings(rng, 6, 4), zo = random_embeddings(rng, 6, 4), zn = random_embeddings(rng, 6, 4);
    std::vector<int> merged = y;
    for (int l : y) merged.push_back(l + k);
    const auto both_o = concat({&zk, &zo}), both_n = concat({&zk, &zn});
    const double expect = cross_entropy_batch(logits, std::span<const int>(y)).value +
                          brute_triplet(both_o, merged, cfg.m_margin) + brute_triplet(both_n, merged, cfg.m_margin);
    EXPECT_NEAR(task_loss(logits, zk, zo, zn, std::span<const int>(y), cfg).value, expect, 1e-12);
  }
}

TEST(TaskLoss, SameAugmentedBatchDoublesMetric) {
  Rng rng(38);
  const auto cfg = paper_constants();
  const std::vector<int> y{0, 0, 1, 1};
  const auto logits = random_embeddings(rng, 4, 2);
  const auto zk = random_embeddings(rng, 4, 3), zn = random_embeddings(rng, 4, 3);
  const auto r = task_loss(logits, zk, zn, zn, std::span<const int>(y), cfg);
  EXPECT_NEAR(r.value, r.cls + 2 * r.metric_new, 1e-12);
  EXPECT_EQ(r.metric_old, r.metric_new);
}

TEST(TaskLoss, AllZeroConstituents) {
  const auto cfg = paper_constants();
  const std::vector<int> y{0, 0, 1, 1};
  Tensor<double> logits(4, 2, 1, 1);
  logits.vec() = {100, 0, 100, 0, 0, 100, 0, 100};
  // known classes far apart, augmented copies far from both
  Tensor<double> zk(4, 2, 1, 1), za(4, 2, 1, 1);
  zk.vec() = {0, 0, 0, 0, 10, 0, 10, 0};
  za.vec() = {0, 10, 0, 10, 10, 10, 10, 10};
  const auto r = task_loss(logits, zk, za, za, std::span<const int>(y), cfg);
  EXPECT_NEAR(r.value, 0.0, 1e-12);
}

TEST(AugLoss, FirstEpochIsReconstructionOnly) {
  Tensor<double> x(2, 3, 4, 4, 0.2), xa(2, 3, 4, 4, 0.3);
  const auto r = aug_loss<double>(x, xa, nullptr, nullptr, nullptr, paper_constants(), false);
  EXPECT_EQ(r.value, reconstruction_loss(x, xa).value);
  EXPECT_TRUE(r.grad_z_new.empty());
}

TEST(AugLoss, PerfectReconstructionOrthogonalEmbeddingsIsZero) {
  Tensor<double> x(1, 3, 4, 4, 0.2);
  Tensor<double> zn(1, 3, 1, 1), zo(1, 3, 1, 1), zk(1, 3, 1, 1);
  zn.vec() = {1, 0, 0};
  zo.vec() = {0, 1, 0};
  zk.vec() = {0, 0, 1};
  EXPECT_NEAR(aug_loss(x, x, &zn, &zo, &zk, paper_constants(), true).value, 0.0, 1e-15);
}

TEST(AugLoss, SumOfConstituents) {
  Rng rng(39);
  const auto cfg = paper_constants();
  for (int t = 0; t < 5; ++t) {
    Tensor<double> x(3, 3, 4, 4), xa(3, 3, 4, 4);
    for (auto* p : {&x, &xa})
      for (auto& v : p->vec()) v = uniform01(rng);
    const auto zn = random_embeddings(rng, 3, 5), zo = random_embeddings(rng, 3, 5), zk = random_embeddings(rng, 3, 5);
    double div = 0;
    for (int i = 0; i < 3; ++i) {
      std::vector<double> a(zn.sample(i).begin(), zn.sample(i).end()), b(zo.sample(i).begin(), zo.sample(i).end()),
          c(zk.sample(i).begin(), zk.sample(i).end());
      auto cosine = [](const std::vector<double>& u, const std::vector<double>& v) {
        double d = 0, nu = 0, nv = 0;
        for (std::size_t k = 0; k < u.size(); ++k) {
          d += u[k] * v[k];
          nu += u[k] * u[k];
          nv += v[k] * v[k];
        }
        return d / std::sqrt(nu * nv);
      };
      div += (cfg.alpha * cosine(a, b) - cfg.beta * std::min(cosine(a, c), cfg.d_margin)) / 3;
    }
    double mse = 0;
    for (std::size_t i = 0; i < x.size(); ++i) mse += std::pow(x[i] - xa[i], 2) / x.size();
    EXPECT_NEAR(aug_loss(x, xa, &zn, &zo, &zk, cfg, true).value, mse + div, 1e-12);
  }
}

TEST(LossConfig, Validation) {
  LossConfig c;
  EXPECT_NO_THROW(c.validate());
  c.d_margin = 1.5;
  EXPECT_THROW(c.validate(), InvalidParameter);
  c = LossConfig{};
  c.m_margin = 0;
  EXPECT_THROW(c.validate(), InvalidParameter);
  c = LossConfig{};
  c.alpha = -1;
  EXPECT_THROW(c.validate(), InvalidParameter);
}
