#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "pose/evalkit.hpp"

using namespace pose;
using namespace pose::eval;

namespace {

PredictionRecord closed_rec(double conf, bool correct, int label = 0) {
  // two-class scores with the given max
  std::vector<double> s = correct == (label == 0) ? std::vector<double>{conf, 1 - conf} : std::vector<double>{1 - conf, conf};
  auto r = make_record(s, label, UnseenType::None);
  r.confidence = conf;
  r.predicted = correct ? label : 1 - label;
  return r;
}

PredictionRecord open_rec(double conf, UnseenType t = UnseenType::Seed) {
  auto r = make_record({conf, 1 - conf}, kUnknown, t);
  r.confidence = conf;
  return r;
}

// Direct CCR/FPR evaluation at every distinct threshold, plus an anchor above
// all scores, integrated by trapezoid.
double oscr_oracle(const std::vector<PredictionRecord>& closed, const std::vector<PredictionRecord>& open) {
  std::vector<double> th{0.0, 1.0};
  for (const auto& r : closed) th.push_back(r.confidence);
  for (const auto& r : open) th.push_back(r.confidence);
  std::sort(th.begin(), th.end());
  th.erase(std::unique(th.begin(), th.end()), th.end());
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  for (auto it = th.rbegin(); it != th.rend(); ++it) {
    double c = 0, o = 0;
    for (const auto& r : closed) c += r.predicted == r.true_label && r.confidence >= *it;
    for (const auto& r : open) o += r.confidence >= *it;
    pts.emplace_back(o / open.size(), c / closed.size());
  }
  double area = 0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].first - pts[i - 1].first) * (pts[i].second + pts[i - 1].second) / 2;
  return area;
}

}  // namespace

TEST(Decide, Examples) {
  const std::vector<double> a{0.9, 0.05, 0.05}, b{0.4, 0.3, 0.3};
  EXPECT_EQ(decide(a, 0.5), 0);
  EXPECT_EQ(decide(b, 0.5), kUnknown);
  EXPECT_EQ(decide(b, 0.4), 0);
  EXPECT_THROW(decide(a, 1.5), InvalidParameter);
  EXPECT_THROW(decide(a, -0.1), InvalidParameter);
  EXPECT_NE(decide(b, 0.0), kUnknown);
  EXPECT_EQ(decide(a, 1.0), kUnknown);
  const std::vector<double> sure{1.0, 0.0};
  EXPECT_EQ(decide(sure, 1.0), 0);
}

TEST(Predict, ThresholdExtremesOnAModel) {
  TaskConfig c;
  c.input_size = 8;
  c.channels = {4, 4};
  c.embed_dim = 4;
  c.num_classes = 3;
  TaskModel<float> task(c, 1);
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    Tensor<float> x(1, 3, 8, 8);
    for (auto& v : x.vec()) v = static_cast<float>(uniform01(rng));
    EXPECT_NE(predict(task, x, 0.0), kUnknown);
    EXPECT_EQ(predict(task, x, 1.0), kUnknown);
  }
  EXPECT_THROW(predict(task, Tensor<float>(1, 3, 8, 8), 2.0), InvalidParameter);
}

TEST(Records, ConfidenceIsMaxAndScoresSumToOne) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    std::vector<float> logits(5);
    for (auto& l : logits) l = static_cast<float>(normal(rng, 0, 3));
    const auto r = make_record(softmax<float>(logits), 1, UnseenType::None);
    double sum = 0;
    for (double s : r.scores) sum += s;
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_EQ(r.confidence, *std::max_element(r.scores.begin(), r.scores.end()));
  }
}

TEST(Accuracy, Examples) {
  std::vector<PredictionRecord> all{closed_rec(0.9, true), closed_rec(0.8, true)};
  EXPECT_EQ(closed_set_accuracy(all), 1.0);
  std::vector<PredictionRecord> none{closed_rec(0.9, false), closed_rec(0.8, false)};
  EXPECT_EQ(closed_set_accuracy(none), 0.0);
  EXPECT_THROW(closed_set_accuracy(std::vector<PredictionRecord>{}), UndefinedMetric);
  Rng rng(4);
  std::vector<PredictionRecord> mixed;
  int hand = 0;
  for (int i = 0; i < 20; ++i) {
    const bool ok = uniform01(rng) < 0.6;
    hand += ok;
    mixed.push_back(closed_rec(0.5 + 0.5 * uniform01(rng), ok, i % 2));
  }
  EXPECT_DOUBLE_EQ(closed_set_accuracy(mixed), hand / 20.0);
}

TEST(Auc, Examples) {
  const std::vector<double> c(10, 0.9), o(10, 0.1), k(10, 0.5);
  EXPECT_EQ(auc_known_unknown(c, o), 1.0);
  EXPECT_EQ(auc_known_unknown(o, c), 0.0);
  EXPECT_EQ(auc_known_unknown(k, k), 0.5);
  EXPECT_THROW(auc_known_unknown(c, std::vector<double>{}), UndefinedMetric);
  EXPECT_THROW(auc_known_unknown(std::vector<double>{}, o), UndefinedMetric);
}

TEST(Auc, MatchesPairwiseOracle) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> c(30), o(30);
    // coarse grid so ties occur
    for (auto& v : c) v = std::round(uniform01(rng) * 20) / 20;
    for (auto& v : o) v = std::round(uniform(rng, 0.0, 0.8) * 20) / 20;
    EXPECT_NEAR(auc_known_unknown(c, o), oracle::pairwise_auc(c, o), 1e-12);
  }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  Rng rng(6);
  std::vector<double> c(25), o(25);
  for (auto& v : c) v = uniform01(rng);
  for (auto& v : o) v = uniform01(rng);
  const double base = auc_known_unknown(c, o);
  auto tf = [](std::vector<double> v) {
    for (auto& x : v) x = std::exp(3 * x) - 7;
    return v;
  };
  EXPECT_NEAR(auc_known_unknown(tf(c), tf(o)), base, 1e-12);
}

TEST(Oscr, Examples) {
  std::vector<PredictionRecord> closed{closed_rec(1.0, true), closed_rec(1.0, true)};
  std::vector<PredictionRecord> open{open_rec(0.0), open_rec(0.0)};
  EXPECT_NEAR(oscr(closed, open), 1.0, 1e-12);
  std::vector<PredictionRecord> wrong{closed_rec(0.9, false), closed_rec(0.7, false)};
  EXPECT_EQ(oscr(wrong, open), 0.0);
  EXPECT_THROW(oscr(closed, std::vector<PredictionRecord>{}), UndefinedMetric);
}

TEST(Oscr, MatchesThresholdSweepOracle) {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    std::vector<PredictionRecord> closed, open;
    for (int i = 0; i < 25; ++i) {
      closed.push_back(closed_rec(std::round((0.5 + 0.5 * uniform01(rng)) * 40) / 40, uniform01(rng) < 0.7));
      open.push_back(open_rec(std::round((0.5 + 0.5 * uniform01(rng)) * 40) / 40));
    }
    EXPECT_NEAR(oscr(closed, open), oscr_oracle(closed, open), 1e-9);
    EXPECT_LE(oscr(closed, open), closed_set_accuracy(closed) + 1e-12);
  }
}

TEST(Oscr, ProductOfAccuracyAndAucWhenIndependent) {
  std::vector<PredictionRecord> closed, open;
  std::vector<double> cc, oc;
  for (double v : {0.2, 0.5, 0.8, 0.95}) {
    closed.push_back(closed_rec(v, true));
    closed.push_back(closed_rec(v, false));
    cc.push_back(v);
    cc.push_back(v);
  }
  for (double v : {0.1, 0.3, 0.5, 0.9, 0.95}) {
    open.push_back(open_rec(v));
    oc.push_back(v);
  }
  EXPECT_NEAR(oscr(closed, open), closed_set_accuracy(closed) * auc_known_unknown(cc, oc), 1e-12);
}

TEST(Oscr, CurveEndsAtAccuracyAndOne) {
  std::vector<PredictionRecord> closed{closed_rec(0.7, true), closed_rec(0.6, false)}, open{open_rec(0.65)};
  const auto pts = oscr_curve(closed, open);
  EXPECT_EQ(pts.front(), std::make_pair(0.0, 0.0));
  EXPECT_EQ(pts.back(), std::make_pair(1.0, 0.5));
}

TEST(Clustering, PerfectAgreement) {
  const std::vector<int> y{0, 0, 1, 1, 2, 2};
  const std::vector<int> a{5, 5, 3, 3, 9, 9};
  const auto s = contingency_scores(a, y);
  EXPECT_NEAR(s.purity, 1.0, 1e-12);
  EXPECT_NEAR(s.nmi, 1.0, 1e-12);
  EXPECT_NEAR(s.ari, 1.0, 1e-12);
}

TEST(Clustering, SingleClusterOverBalancedClasses) {
  for (int l : {2, 3, 5}) {
    std::vector<int> y, a;
    for (int c = 0; c < l; ++c)
      for (int i = 0; i < 4; ++i) {
        y.push_back(c);
        a.push_back(0);
      }
    const auto s = contingency_scores(a, y);
    EXPECT_NEAR(s.purity, 1.0 / l, 1e-12);
    EXPECT_NEAR(s.ari, 0.0, 1e-12);
  }
}

TEST(Clustering, ToySetMatchesContingencyFormulas) {
  // 12 points, three tight blobs, two points deliberately mislabelled.
  std::vector<std::vector<double>> pts;
  std::vector<int> y;
  const double centres[3][2] = {{0, 0}, {10, 0}, {0, 10}};
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 4; ++i) {
      pts.push_back({centres[c][0] + 0.1 * i, centres[c][1] - 0.05 * i});
      y.push_back(c);
    }
  y[3] = 1;
  y[7] = 2;
  const auto km = kmeans(pts, 3, 42);
  // recover the blob partition regardless of cluster numbering
  for (int c = 0; c < 3; ++c)
    for (int i = 1; i < 4; ++i) EXPECT_EQ(km.assignment[c * 4 + i], km.assignment[c * 4]);
  // contingency table: rows = blobs, columns = labels
  // blob0: {0,0,0,1}, blob1: {1,1,1,2}, blob2: {2,2,2,2}
  const double n = 12;
  const double table[3][3] = {{3, 1, 0}, {0, 3, 1}, {0, 0, 4}};
  const double rows[3] = {4, 4, 4}, cols[3] = {3, 4, 5};
  const double purity = (3 + 3 + 4) / n;
  double mi = 0, hu = 0, hv = 0, sij = 0, sa = 0, sb = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      if (table[a][b] > 0) mi += table[a][b] / n * std::log(table[a][b] * n / (rows[a] * cols[b]));
  for (int a = 0; a < 3; ++a) hu -= rows[a] / n * std::log(rows[a] / n);
  for (int b = 0; b < 3; ++b) hv -= cols[b] / n * std::log(cols[b] / n);
  auto c2 = [](double v) { return v * (v - 1) / 2; };
  for (auto& r : table)
    for (double v : r) sij += c2(v);
  for (double v : rows) sa += c2(v);
  for (double v : cols) sb += c2(v);
  const double expected = sa * sb / c2(n);
  const double ari = (sij - expected) / ((sa + sb) / 2 - expected);
  const auto s = cluster_metrics(pts, y, 3, 42);
  EXPECT_NEAR(s.purity, purity, 1e-12);
  EXPECT_NEAR(s.nmi, mi / ((hu + hv) / 2), 1e-12);
  EXPECT_NEAR(s.ari, ari, 1e-12);
}

TEST(Clustering, Errors) {
  std::vector<std::vector<double>> pts{{0.0}, {1.0}};
  const std::vector<int> y{0, 1};
  EXPECT_THROW(cluster_metrics(pts, y, 3, 0), InvalidParameter);
  EXPECT_THROW(cluster_metrics(pts, y, 1, 0), InvalidParameter);
}

TEST(Clustering, KMeansDeterministicPerSeed) {
  Rng rng(8);
  std::vector<std::vector<double>> pts(40, std::vector<double>(3));
  for (auto& p : pts)
    for (auto& v : p) v = normal(rng);
  EXPECT_EQ(kmeans(pts, 4, 9).assignment, kmeans(pts, 4, 9).assignment);
}

TEST(Histogram, Examples) {
  std::vector<PredictionRecord> recs;
  for (int i = 0; i < 10; ++i) recs.push_back(i < 6 ? closed_rec(0.3 + 0.07 * i, true) : open_rec(0.45 + 0.1 * (i - 6)));
  const auto h = confidence_histogram(recs, 2);
  std::size_t total = 0;
  for (const auto& g : h)
    if (g.group == "closed" || g.group == "open")
      for (auto c : g.counts) total += c;
  EXPECT_EQ(total, 10u);

  std::vector<PredictionRecord> ones{closed_rec(1.0, true), open_rec(1.0), open_rec(1.0, UnseenType::Dataset)};
  for (const auto& g : confidence_histogram(ones, 4)) {
    for (std::size_t b = 0; b + 1 < g.counts.size(); ++b) EXPECT_EQ(g.counts[b], 0u);
  }
  EXPECT_THROW(confidence_histogram(ones, 1), InvalidParameter);
}

TEST(Histogram, MatchesDirectBinning) {
  Rng rng(9);
  std::vector<PredictionRecord> recs;
  for (int i = 0; i < 60; ++i) {
    const double c = uniform01(rng);
    recs.push_back(i % 3 ? closed_rec(c, true) : open_rec(c, i % 2 ? UnseenType::Architecture : UnseenType::Seed));
  }
  const int bins = 7;
  const auto h = confidence_histogram(recs, bins);
  for (const auto& g : h) {
    std::vector<std::size_t> expect(bins, 0);
    for (const auto& r : recs) {
      const bool member = g.group == "closed"   ? r.is_closed()
                          : g.group == "open"   ? !r.is_closed()
                                                : !r.is_closed() && to_string(r.unseen_type) == g.group;
      if (!member) continue;
      int b = static_cast<int>(r.confidence * bins);
      if (b == bins) b = bins - 1;
      ++expect[b];
    }
    EXPECT_EQ(g.counts, expect) << g.group;
  }
}

TEST(Report, GroupsByUnseenType) {
  std::vector<PredictionRecord> recs{closed_rec(0.9, true), closed_rec(0.8, false, 1), open_rec(0.3, UnseenType::Seed),
                                     open_rec(0.95, UnseenType::Architecture), open_rec(0.5, UnseenType::Dataset)};
  const auto rep = evaluate(recs, 2);
  EXPECT_EQ(rep.accuracy, 0.5);
  EXPECT_EQ(rep.auc_by_type.at("seed"), 1.0);
  EXPECT_EQ(rep.auc_by_type.at("architecture"), 0.0);
  EXPECT_EQ(rep.auc_by_type.at("dataset"), 1.0);
  EXPECT_NEAR(rep.auc_all, 4.0 / 6.0, 1e-12);
  EXPECT_EQ(rep.confusion[0][0], 1u);
  EXPECT_EQ(rep.confusion[1][0], 1u);
  for (double v : {rep.accuracy, rep.auc_all, rep.oscr_all}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}
