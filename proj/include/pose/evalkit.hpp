#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pose/error.hpp"
#include "pose/models.hpp"
#include "pose/random.hpp"

namespace pose::eval {

inline constexpr int kUnknown = -1;

enum class UnseenType { None, Seed, Architecture, Dataset };

inline std::string to_string(UnseenType t) {
  switch (t) {
    case UnseenType::None: return "none";
    case UnseenType::Seed: return "seed";
    case UnseenType::Architecture: return "architecture";
    case UnseenType::Dataset: return "dataset";
  }
  return "none";
}

inline UnseenType unseen_type_from_string(const std::string& s) {
  if (s == "none") return UnseenType::None;
  if (s == "seed") return UnseenType::Seed;
  if (s == "architecture") return UnseenType::Architecture;
  if (s == "dataset") return UnseenType::Dataset;
  throw InvalidParameter("unknown unseen type '" + s + "'");
}

struct PredictionRecord {
  std::vector<double> scores;  // softmax over the K known classes
  double confidence = 0.0;     // max(scores)
  int predicted = 0;           // argmax(scores)
  int true_label = kUnknown;   // known class or kUnknown
  UnseenType unseen_type = UnseenType::None;

  bool is_closed() const { return true_label != kUnknown; }
};

inline PredictionRecord make_record(std::vector<double> scores, int true_label, UnseenType type) {
  PredictionRecord r;
  r.scores = std::move(scores);
  const auto it = std::max_element(r.scores.begin(), r.scores.end());
  r.predicted = static_cast<int>(it - r.scores.begin());
  r.confidence = *it;
  r.true_label = true_label;
  r.unseen_type = type;
  return r;
}

inline void check_theta(double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw InvalidParameter("theta must be in [0, 1]");
}

// Argmax class if its score reaches theta, otherwise kUnknown.
inline int decide(std::span<const double> scores, double theta) {
  check_theta(theta);
  const auto it = std::max_element(scores.begin(), scores.end());
  return *it >= theta ? static_cast<int>(it - scores.begin()) : kUnknown;
}

template <typename T>
int predict(const TaskModel<T>& task, const Tensor<T>& x, double theta) {
  check_theta(theta);
  const Tensor<T> logits = classify(task, x);
  const auto p = softmax<T>(logits.sample(0));
  return decide(p, theta);
}

// Softmax records for a batch of images, evaluated in chunks.
template <typename T>
std::vector<PredictionRecord> predict_records(const TaskModel<T>& task, const Tensor<T>& images,
                                              std::span<const int> labels, std::span<const UnseenType> types,
                                              int chunk = 64) {
  std::vector<PredictionRecord> out;
  out.reserve(images.n());
  for (int first = 0; first < images.n(); first += chunk) {
    const int count = std::min(chunk, images.n() - first);
    const Tensor<T> logits = classify(task, images.slice(first, count));
    for (int i = 0; i < count; ++i)
      out.push_back(make_record(softmax<T>(logits.sample(i)), labels[first + i], types[first + i]));
  }
  return out;
}

inline double closed_set_accuracy(std::span<const PredictionRecord> records) {
  if (records.empty()) throw UndefinedMetric("accuracy of an empty record set");
  std::size_t correct = 0;
  for (const auto& r : records) {
    if (!r.is_closed()) throw InvalidInput("closed-set accuracy needs known labels");
    correct += r.predicted == r.true_label;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

// Mann-Whitney AUC with closed-set confidence as the positive class; ties
// count one half. Computed from mid-ranks.
inline double auc_known_unknown(std::span<const double> closed, std::span<const double> open) {
  if (closed.empty() || open.empty()) throw UndefinedMetric("AUC needs non-empty closed and open sets");
  struct Item {
    double v;
    bool pos;
  };
  std::vector<Item> all;
  all.reserve(closed.size() + open.size());
  for (double v : closed) all.push_back({v, true});
  for (double v : open) all.push_back({v, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.v < b.v; });
  double rank_sum = 0.0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].v == all[i].v) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (all[k].pos) rank_sum += mid;
    i = j;
  }
  const double np = static_cast<double>(closed.size()), nn = static_cast<double>(open.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// Area under CCR(theta) vs FPR(theta). The threshold grid is every observed
// confidence plus {0, 1}, and the curve is anchored at (0, 0) (threshold
// above every score). Trapezoid integration.
inline double oscr(std::span<const PredictionRecord> closed, std::span<const PredictionRecord> open) {
  if (closed.empty() || open.empty()) throw UndefinedMetric("OSCR needs non-empty closed and open sets");
  std::vector<double> grid{0.0, 1.0};
  for (const auto& r : closed) grid.push_back(r.confidence);
  for (const auto& r : open) grid.push_back(r.confidence);
  std::sort(grid.begin(), grid.end(), std::greater<>());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  // Sweep thresholds from high to low with two sorted lists.
  std::vector<double> correct_conf, open_conf;
  for (const auto& r : closed)
    if (r.predicted == r.true_label) correct_conf.push_back(r.confidence);
  for (const auto& r : open) open_conf.push_back(r.confidence);
  std::sort(correct_conf.begin(), correct_conf.end(), std::greater<>());
  std::sort(open_conf.begin(), open_conf.end(), std::greater<>());

  const double nc = static_cast<double>(closed.size()), no = static_cast<double>(open.size());
  double prev_fpr = 0.0, prev_ccr = 0.0, area = 0.0;
  std::size_t ic = 0, io = 0;
  for (double theta : grid) {
    while (ic < correct_conf.size() && correct_conf[ic] >= theta) ++ic;
    while (io < open_conf.size() && open_conf[io] >= theta) ++io;
    const double fpr = static_cast<double>(io) / no, ccr = static_cast<double>(ic) / nc;
    area += (fpr - prev_fpr) * (ccr + prev_ccr) * 0.5;
    prev_fpr = fpr;
    prev_ccr = ccr;
  }
  return area;
}

// (FPR, CCR) points of the same sweep, for plotting.
inline std::vector<std::pair<double, double>> oscr_curve(std::span<const PredictionRecord> closed,
                                                         std::span<const PredictionRecord> open) {
  std::vector<double> grid{0.0, 1.0};
  for (const auto& r : closed) grid.push_back(r.confidence);
  for (const auto& r : open) grid.push_back(r.confidence);
  std::sort(grid.begin(), grid.end(), std::greater<>());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  for (double theta : grid) {
    std::size_t c = 0, o = 0;
    for (const auto& r : closed) c += (r.predicted == r.true_label && r.confidence >= theta);
    for (const auto& r : open) o += r.confidence >= theta;
    pts.emplace_back(static_cast<double>(o) / open.size(), static_cast<double>(c) / closed.size());
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Clustering

struct ClusterScores {
  double purity = 0.0;
  double nmi = 0.0;
  double ari = 0.0;
};

// Scores of an assignment against ground truth from the contingency table.
// NMI uses the arithmetic mean of the two entropies.
inline ClusterScores contingency_scores(std::span<const int> assignment, std::span<const int> labels) {
  if (assignment.size() != labels.size() || assignment.empty()) throw InvalidInput("assignment/label size mismatch");
  std::map<int, int> cl_index, lb_index;
  for (int a : assignment) cl_index.emplace(a, static_cast<int>(cl_index.size()));
  for (int l : labels) lb_index.emplace(l, static_cast<int>(lb_index.size()));
  // std::map assigns indices in insertion order above; re-number deterministically.
  int k = 0;
  for (auto& [key, idx] : cl_index) idx = k++;
  k = 0;
  for (auto& [key, idx] : lb_index) idx = k++;
  const std::size_t nc = cl_index.size(), nl = lb_index.size();
  std::vector<double> table(nc * nl, 0.0), rows(nc, 0.0), cols(nl, 0.0);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    const int a = cl_index[assignment[i]], b = lb_index[labels[i]];
    table[a * nl + b] += 1.0;
    rows[a] += 1.0;
    cols[b] += 1.0;
  }
  const double n = static_cast<double>(assignment.size());
  ClusterScores s;
  for (std::size_t a = 0; a < nc; ++a) s.purity += *std::max_element(table.begin() + a * nl, table.begin() + (a + 1) * nl);
  s.purity /= n;

  auto entropy = [n](const std::vector<double>& m) {
    double h = 0.0;
    for (double v : m)
      if (v > 0.0) h -= (v / n) * std::log(v / n);
    return h;
  };
  double mi = 0.0;
  for (std::size_t a = 0; a < nc; ++a)
    for (std::size_t b = 0; b < nl; ++b) {
      const double v = table[a * nl + b];
      if (v > 0.0) mi += (v / n) * std::log(v * n / (rows[a] * cols[b]));
    }
  const double hu = entropy(rows), hv = entropy(cols);
  if (hu == 0.0 && hv == 0.0) {
    s.nmi = 1.0;
  } else {
    const double denom = 0.5 * (hu + hv);
    s.nmi = denom > 0.0 ? std::max(0.0, mi / denom) : 0.0;
  }

  auto comb2 = [](double v) { return v * (v - 1.0) / 2.0; };
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (double v : table) sum_ij += comb2(v);
  for (double v : rows) sum_a += comb2(v);
  for (double v : cols) sum_b += comb2(v);
  const double expected = sum_a * sum_b / comb2(n);
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) {
    s.ari = 1.0;  // both partitions trivial in the same way
  } else {
    s.ari = (sum_ij - expected) / (max_index - expected);
  }
  return s;
}

struct KMeansResult {
  std::vector<int> assignment;
  std::vector<std::vector<double>> centers;
  int iterations = 0;
};

// Lloyd's algorithm with seeded farthest-point initialisation: the first
// centre is a seeded uniform pick, each next one the point farthest from the
// chosen centres (lowest index on ties).
inline KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k, std::uint64_t seed,
                           int max_iter = 100) {
  const std::size_t n = points.size();
  if (k < 1) throw InvalidParameter("k must be positive");
  if (static_cast<std::size_t>(k) > n) throw InvalidParameter("k exceeds sample count");
  const std::size_t d = points.front().size();
  auto dist2 = [d](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += (a[j] - b[j]) * (a[j] - b[j]);
    return s;
  };
  KMeansResult res;
  Rng rng(seed);
  res.centers.push_back(points[uniform_index(rng, n)]);
  std::vector<double> mind(n);
  for (std::size_t i = 0; i < n; ++i) mind[i] = dist2(points[i], res.centers[0]);
  while (static_cast<int>(res.centers.size()) < k) {
    const std::size_t far = static_cast<std::size_t>(std::max_element(mind.begin(), mind.end()) - mind.begin());
    res.centers.push_back(points[far]);
    for (std::size_t i = 0; i < n; ++i) mind[i] = std::min(mind[i], dist2(points[i], res.centers.back()));
  }
  res.assignment.assign(n, -1);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = dist2(points[i], res.centers[0]);
      for (int c = 1; c < k; ++c) {
        const double dd = dist2(points[i], res.centers[c]);
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      if (res.assignment[i] != best) {
        res.assignment[i] = best;
        changed = true;
      }
    }
    res.iterations = it + 1;
    if (!changed) break;
    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[res.assignment[i]];
      for (std::size_t j = 0; j < d; ++j) sums[res.assignment[i]][j] += points[i][j];
    }
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (std::size_t j = 0; j < d; ++j) res.centers[c][j] = sums[c][j] / static_cast<double>(counts[c]);
  }
  return res;
}

inline ClusterScores cluster_metrics(const std::vector<std::vector<double>>& features, std::span<const int> labels,
                                     int k, std::uint64_t seed) {
  if (k < 2) throw InvalidParameter("k must be at least 2");
  if (features.size() != labels.size()) throw InvalidInput("feature/label count mismatch");
  if (static_cast<std::size_t>(k) > features.size()) throw InvalidParameter("k exceeds sample count");
  const auto km = kmeans(features, k, seed);
  return contingency_scores(km.assignment, labels);
}

// ---------------------------------------------------------------------------
// Confidence histograms and the metrics report

struct Histogram {
  std::string group;
  std::vector<std::size_t> counts;
};

inline std::size_t confidence_bin(double conf, int bins) {
  const auto b = static_cast<long>(std::floor(conf * bins));
  return static_cast<std::size_t>(std::clamp<long>(b, 0, bins - 1));
}

// Groups: closed, open, and one per unseen type present.
inline std::vector<Histogram> confidence_histogram(std::span<const PredictionRecord> records, int bins) {
  if (bins < 2) throw InvalidParameter("histogram needs at least two bins");
  std::vector<Histogram> out;
  auto group = [&](const std::string& name) -> Histogram& {
    for (auto& h : out)
      if (h.group == name) return h;
    out.push_back({name, std::vector<std::size_t>(bins, 0)});
    return out.back();
  };
  group("closed");
  group("open");
  for (const auto& r : records) {
    const std::size_t b = confidence_bin(r.confidence, bins);
    if (r.is_closed()) {
      ++group("closed").counts[b];
    } else {
      ++group("open").counts[b];
      ++group(to_string(r.unseen_type)).counts[b];
    }
  }
  return out;
}

struct MetricsReport {
  double accuracy = 0.0;
  std::map<std::string, double> auc_by_type;  // seed / architecture / dataset
  double auc_all = 0.0;
  double oscr_all = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted], argmax only
};

inline MetricsReport evaluate(std::span<const PredictionRecord> records, int num_classes) {
  std::vector<PredictionRecord> closed, open;
  for (const auto& r : records) (r.is_closed() ? closed : open).push_back(r);
  MetricsReport rep;
  rep.accuracy = closed_set_accuracy(closed);
  std::vector<double> cc;
  for (const auto& r : closed) cc.push_back(r.confidence);
  for (UnseenType t : {UnseenType::Seed, UnseenType::Architecture, UnseenType::Dataset}) {
    std::vector<double> oc;
    for (const auto& r : open)
      if (r.unseen_type == t) oc.push_back(r.confidence);
    rep.auc_by_type[to_string(t)] = oc.empty() ? std::nan("") : auc_known_unknown(cc, oc);
  }
  std::vector<double> all_open;
  for (const auto& r : open) all_open.push_back(r.confidence);
  rep.auc_all = auc_known_unknown(cc, all_open);
  rep.oscr_all = oscr(closed, open);
  rep.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  for (const auto& r : closed) ++rep.confusion[r.true_label][r.predicted];
  return rep;
}

}  // namespace pose::eval
