#pragma once

// Training objectives with analytic gradients. Everything is templated on the
// scalar so the same code runs in float for training and in double for
// finite-difference checks; accumulation is always in double.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "pose/error.hpp"
#include "pose/spectrum.hpp"
#include "pose/tensor.hpp"

namespace pose::losses {

struct LossConfig {
  double lambda_spectral = 1e-4;
  double alpha = 1e-4;
  double beta = 1e-2;
  double d_margin = 0.95;
  double m_margin = 0.3;
  double epsilon_floor = 0.0;  // 0 disables the reconstruction floor

  // alpha = beta = 0 is accepted: it is how the no-diversity ablation is expressed.
  void validate() const {
    if (!(d_margin > 0.0 && d_margin <= 1.0)) throw InvalidParameter("d_margin must be in (0, 1]");
    if (!(m_margin > 0.0)) throw InvalidParameter("m_margin must be positive");
    if (alpha < 0.0 || beta < 0.0) throw InvalidParameter("alpha and beta must be non-negative");
    if (!(lambda_spectral > 0.0)) throw InvalidParameter("lambda_spectral must be positive");
    if (epsilon_floor < 0.0) throw InvalidParameter("epsilon_floor must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Classification

// -log softmax(logits)[label]; if grad is non-empty it receives dL/dlogits.
template <typename T>
double cross_entropy_loss(std::span<const T> logits, int label, std::span<T> grad = {}) {
  const int k = static_cast<int>(logits.size());
  if (label < 0 || label >= k)
    throw InvalidLabel("label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  for (T v : logits) sum += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(sum);
  if (!grad.empty()) {
    for (int i = 0; i < k; ++i) {
      const double p = std::exp(static_cast<double>(logits[i]) - lse);
      grad[i] = static_cast<T>(p - (i == label ? 1.0 : 0.0));
    }
  }
  return lse - static_cast<double>(logits[label]);
}

template <typename T>
struct BatchLoss {
  double value = 0.0;
  Tensor<T> grad;
};

// Mean cross-entropy over a (N, K, 1, 1) batch.
template <typename T>
BatchLoss<T> cross_entropy_batch(const Tensor<T>& logits, std::span<const int> labels) {
  if (static_cast<std::size_t>(logits.n()) != labels.size()) throw InvalidInput("label count mismatch");
  BatchLoss<T> out;
  out.grad = Tensor<T>::like(logits);
  const double inv = 1.0 / logits.n();
  for (int i = 0; i < logits.n(); ++i) {
    auto g = out.grad.sample(i);
    out.value += cross_entropy_loss<T>(logits.sample(i), labels[i], g) * inv;
    for (auto& v : g) v = static_cast<T>(v * inv);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Triplet metric

struct Triplet {
  int anchor, positive, negative;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

// Every (a, p, n) with label[a] == label[p], a != p, label[n] != label[a],
// ordered lexicographically by (a, p, n).
inline std::vector<Triplet> mine_triplets(std::span<const int> labels) {
  std::vector<Triplet> out;
  const int n = static_cast<int>(labels.size());
  for (int a = 0; a < n; ++a)
    for (int p = 0; p < n; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      for (int q = 0; q < n; ++q)
        if (labels[q] != labels[a]) out.push_back({a, p, q});
    }
  return out;
}

inline int extend_label(int known_class, int num_known) {
  if (known_class < 0 || known_class >= num_known)
    throw InvalidLabel("known class " + std::to_string(known_class) + " outside [0, " + std::to_string(num_known) + ")");
  return num_known + known_class;
}

template <typename T>
struct TripletResult {
  double value = 0.0;
  Tensor<T> grad;            // dL/dembeddings, same shape as the input
  std::size_t triplets = 0;  // number of mined triplets
  std::size_t active = 0;    // triplets with a positive hinge
  bool empty = false;        // no valid triplet; value is 0
};

// Batch-all triplet loss on (N, D, 1, 1) embeddings: mean over mined
// triplets of [|a-p|^2 - |a-n|^2 + m]_+.
template <typename T>
TripletResult<T> triplet_metric_loss(const Tensor<T>& emb, std::span<const int> labels, double margin) {
  if (static_cast<std::size_t>(emb.n()) != labels.size()) throw InvalidInput("label count mismatch");
  TripletResult<T> out;
  out.grad = Tensor<T>::like(emb);
  const int n = emb.n();
  const std::size_t d = emb.sample_size();

  // Pairwise squared distances.
  std::vector<double> dist(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      auto a = emb.sample(i), b = emb.sample(j);
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double t = static_cast<double>(a[k]) - b[k];
        s += t * t;
      }
      dist[i * n + j] = dist[j * n + i] = s;
    }

  const auto triplets = mine_triplets(labels);
  out.triplets = triplets.size();
  if (triplets.empty()) {
    out.empty = true;
    return out;
  }

  // dL/demb = sum over active triplets of 2(n-p) on a, -2(a-p) on p, 2(a-n) on n;
  // accumulated as pair weights then applied once per pair.
  std::vector<double> pair_w(static_cast<std::size_t>(n) * n, 0.0);
  double total = 0.0;
  for (const auto& t : triplets) {
    const double h = dist[t.anchor * n + t.positive] - dist[t.anchor * n + t.negative] + margin;
    if (h <= 0.0) continue;
    total += h;
    ++out.active;
    pair_w[t.anchor * n + t.positive] += 1.0;  // +|a-p|^2
    pair_w[t.anchor * n + t.negative] -= 1.0;  // -|a-n|^2
  }
  const double inv = 1.0 / static_cast<double>(triplets.size());
  out.value = total * inv;
  std::vector<double> g(static_cast<std::size_t>(n) * d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const double w = pair_w[i * n + j];
      if (w == 0.0) continue;
      // d(w |x_i - x_j|^2) = 2w (x_i - x_j) on i, -2w (x_i - x_j) on j
      auto a = emb.sample(i), b = emb.sample(j);
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = 2.0 * w * (static_cast<double>(a[k]) - b[k]) * inv;
        g[i * d + k] += diff;
        g[j * d + k] -= diff;
      }
    }
  for (std::size_t k = 0; k < g.size(); ++k) out.grad[k] = static_cast<T>(g[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Reconstruction

template <typename T>
struct ReconResult {
  double value = 0.0;
  double raw_mse = 0.0;
  bool clamped = false;
  Tensor<T> grad;  // dL/dx_aug
};

// Mean squared pixel error, optionally floored: max(floor, mse). Below the
// floor the gradient is exactly zero.
template <typename T>
ReconResult<T> reconstruction_loss(const Tensor<T>& x, const Tensor<T>& x_aug, double epsilon_floor = 0.0) {
  if (!x.same_shape(x_aug)) throw InvalidInput("reconstruction shapes differ: " + x.shape_string() + " vs " + x_aug.shape_string());
  if (epsilon_floor < 0.0) throw InvalidParameter("epsilon_floor must be non-negative");
  ReconResult<T> out;
  out.raw_mse = mean_squared_difference(x, x_aug);
  out.grad = Tensor<T>::like(x);
  if (epsilon_floor > 0.0 && out.raw_mse < epsilon_floor) {
    out.value = epsilon_floor;
    out.clamped = true;
    return out;
  }
  out.value = out.raw_mse;
  const double scale = 2.0 / static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.grad[i] = static_cast<T>(scale * (static_cast<double>(x_aug[i]) - x[i]));
  return out;
}

// ---------------------------------------------------------------------------
// Diversity

namespace detail {

inline double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// cos(a, b) and its gradients w.r.t. a and b.
inline double cosine_with_grads(std::span<const double> a, std::span<const double> b, std::vector<double>* ga,
                                std::vector<double>* gb) {
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) throw UndefinedCosine("zero vector");
  double dot = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) dot += a[k] * b[k];
  const double c = dot / (na * nb);
  if (ga) {
    ga->resize(a.size());
    for (std::size_t k = 0; k < a.size(); ++k) (*ga)[k] = (b[k] / nb - c * a[k] / na) / na;
  }
  if (gb) {
    gb->resize(b.size());
    for (std::size_t k = 0; k < b.size(); ++k) (*gb)[k] = (a[k] / na - c * b[k] / nb) / nb;
  }
  return c;
}

}  // namespace detail

struct DiversityResult {
  double value = 0.0;
  double cos_new_old = 0.0;
  double cos_new_known = 0.0;
  bool clamped = false;  // cos(new, known) > d: second term contributes no gradient
  std::vector<double> grad_new, grad_old, grad_known;
  std::vector<double> grad_new_second_term;  // second term's share of grad_new
};

// alpha * cos(z_new, z_old) - beta * min(cos(z_new, z_known), d)
inline DiversityResult diversity_loss(std::span<const double> z_new, std::span<const double> z_old,
                                      std::span<const double> z_known, const LossConfig& cfg) {
  if (z_new.size() != z_old.size() || z_new.size() != z_known.size()) throw InvalidInput("embedding widths differ");
  DiversityResult r;
  std::vector<double> gn1, go, gn2, gk;
  r.cos_new_old = detail::cosine_with_grads(z_new, z_old, &gn1, &go);
  r.cos_new_known = detail::cosine_with_grads(z_new, z_known, &gn2, &gk);
  r.clamped = r.cos_new_known > cfg.d_margin;
  const double second = r.clamped ? cfg.d_margin : r.cos_new_known;
  r.value = cfg.alpha * r.cos_new_old - cfg.beta * second;
  const std::size_t d = z_new.size();
  r.grad_new.assign(d, 0.0);
  r.grad_old.assign(d, 0.0);
  r.grad_known.assign(d, 0.0);
  r.grad_new_second_term.assign(d, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    r.grad_old[k] = cfg.alpha * go[k];
    if (!r.clamped) {
      r.grad_new_second_term[k] = -cfg.beta * gn2[k];
      r.grad_known[k] = -cfg.beta * gk[k];
    }
    r.grad_new[k] = cfg.alpha * gn1[k] + r.grad_new_second_term[k];
  }
  return r;
}

template <typename T>
struct DiversityBatchResult {
  double value = 0.0;
  double mean_cos_new_old = 0.0;
  double mean_cos_new_known = 0.0;
  Tensor<T> grad_new;  // dL/dz_new for the batch mean
};

// Mean diversity loss over aligned rows of three (N, D, 1, 1) batches.
template <typename T>
DiversityBatchResult<T> diversity_batch(const Tensor<T>& z_new, const Tensor<T>& z_old, const Tensor<T>& z_known,
                                        const LossConfig& cfg) {
  if (!z_new.same_shape(z_old) || !z_new.same_shape(z_known)) throw InvalidInput("embedding batches differ in shape");
  DiversityBatchResult<T> out;
  out.grad_new = Tensor<T>::like(z_new);
  const std::size_t d = z_new.sample_size();
  const double inv = 1.0 / z_new.n();
  std::vector<double> a(d), b(d), c(d);
  for (int i = 0; i < z_new.n(); ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      a[k] = z_new.sample(i)[k];
      b[k] = z_old.sample(i)[k];
      c[k] = z_known.sample(i)[k];
    }
    const auto r = diversity_loss(a, b, c, cfg);
    out.value += r.value * inv;
    out.mean_cos_new_old += r.cos_new_old * inv;
    out.mean_cos_new_known += r.cos_new_known * inv;
    auto g = out.grad_new.sample(i);
    for (std::size_t k = 0; k < d; ++k) g[k] = static_cast<T>(r.grad_new[k] * inv);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Spectral matching

template <typename T>
struct SpectralResult {
  double value = 0.0;
  double recon_term = 0.0;
  double profile_term = 0.0;  // unweighted profile distance
  Tensor<T> grad_aug_all;     // dL/dA(x_all)
  Tensor<T> grad_aug_src;     // dL/dA(x_src)
};

// mse(x_all, A(x_all)) + lambda * |mean_profile(A(x_src)) - target|. The
// profile is taken over the luminance of each sample and averaged over the
// batch; the target must use the same normalisation flag (gradients are only
// supported for unnormalised profiles).
template <typename T>
SpectralResult<T> spectral_loss(const Tensor<T>& x_all, const Tensor<T>& aug_all, const Tensor<T>& aug_src,
                                const spectrum::SpectrumProfile& target, const LossConfig& cfg) {
  if (target.normalized) throw InvalidInput("spectral loss gradients need an unnormalised target profile");
  if (aug_src.h() != aug_src.w() || static_cast<std::size_t>(aug_src.h() / 2) != target.size())
    throw InvalidInput("grid size does not match the target profile");
  SpectralResult<T> out;
  const auto recon = reconstruction_loss(x_all, aug_all, 0.0);
  out.recon_term = recon.value;
  out.grad_aug_all = recon.grad;

  const spectrum::SpectrumProfile p = spectrum::mean_profile(aug_src, false);
  const double dist = spectrum::profile_distance(p, target);
  out.profile_term = dist;
  out.value = recon.value + cfg.lambda_spectral * dist;

  out.grad_aug_src = Tensor<T>::like(aug_src);
  if (dist == 0.0) return out;  // subgradient 0 at the kink
  std::vector<double> gp(p.size());
  for (std::size_t b = 0; b < p.size(); ++b)
    gp[b] = cfg.lambda_spectral * (p.values[b] - target.values[b]) / dist / aug_src.n();
  const Eigen::Index n = aug_src.h();
  const spectrum::Grid gpow = spectrum::azimuthal_integration_backward(n, gp);
  for (int i = 0; i < aug_src.n(); ++i) {
    const spectrum::Grid lum = spectrum::luminance(aug_src, i);
    const spectrum::Grid gl = spectrum::power_spectrum_2d_backward(lum, gpow);
    if (aug_src.c() == 1) {
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) out.grad_aug_src.at(i, 0, y, x) = static_cast<T>(gl(y, x));
    } else {
      const double wts[3] = {spectrum::kLumaR, spectrum::kLumaG, spectrum::kLumaB};
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < n; ++y)
          for (int x = 0; x < n; ++x) out.grad_aug_src.at(i, c, y, x) = static_cast<T>(wts[c] * gl(y, x));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composite objectives

template <typename T>
struct TaskLossResult {
  double value = 0.0;
  double cls = 0.0;
  double metric_old = 0.0;
  double metric_new = 0.0;
  Tensor<T> grad_logits;  // for the known images
  Tensor<T> grad_known;   // dL/dz for known embeddings (both metric terms)
  Tensor<T> grad_old;
  Tensor<T> grad_new;
};

// L_cls(x) + L_metric(x, x_old) + L_metric(x, x_new). Each metric term runs
// batch-all triplet mining over known embeddings (label i) merged with the
// augmented embeddings (label K + i).
template <typename T>
TaskLossResult<T> task_loss(const Tensor<T>& logits, const Tensor<T>& z_known, const Tensor<T>& z_old,
                            const Tensor<T>& z_new, std::span<const int> labels, const LossConfig& cfg) {
  const int n = z_known.n();
  if (!z_known.same_shape(z_old) || !z_known.same_shape(z_new)) throw InvalidInput("embedding batches differ in shape");
  const int k = logits.c();
  TaskLossResult<T> out;
  auto ce = cross_entropy_batch(logits, labels);
  out.cls = ce.value;
  out.grad_logits = std::move(ce.grad);

  std::vector<int> merged(labels.begin(), labels.end());
  for (int l : labels) merged.push_back(extend_label(l, k));

  out.grad_known = Tensor<T>::like(z_known);
  auto metric = [&](const Tensor<T>& z_aug, Tensor<T>& grad_aug) {
    const Tensor<T> both = concat({&z_known, &z_aug});
    auto r = triplet_metric_loss(both, merged, cfg.m_margin);
    grad_aug = r.grad.slice(n, n);
    const Tensor<T> gk = r.grad.slice(0, n);
    for (std::size_t i = 0; i < gk.size(); ++i) out.grad_known[i] += gk[i];
    return r.value;
  };
  out.metric_old = metric(z_old, out.grad_old);
  out.metric_new = metric(z_new, out.grad_new);
  out.value = out.cls + out.metric_old + out.metric_new;
  return out;
}

template <typename T>
struct AugLossResult {
  double value = 0.0;
  double recon = 0.0;
  double raw_mse = 0.0;
  double diversity = 0.0;
  double mean_cos_new_old = 0.0;
  double mean_cos_new_known = 0.0;
  Tensor<T> grad_x_new;  // reconstruction share of dL/dx_new
  Tensor<T> grad_z_new;  // empty when the diversity term is off
};

// L_recons(x, x_new) + L_div(z_new, z_old, z_known). The diversity term is
// skipped when with_diversity is false (first epoch, or no old model yet).
template <typename T>
AugLossResult<T> aug_loss(const Tensor<T>& x, const Tensor<T>& x_new, const Tensor<T>* z_new, const Tensor<T>* z_old,
                          const Tensor<T>* z_known, const LossConfig& cfg, bool with_diversity) {
  AugLossResult<T> out;
  auto rec = reconstruction_loss(x, x_new, cfg.epsilon_floor);
  out.recon = rec.value;
  out.raw_mse = rec.raw_mse;
  out.grad_x_new = std::move(rec.grad);
  out.value = rec.value;
  if (with_diversity) {
    if (!z_new || !z_old || !z_known) throw InvalidInput("diversity term needs all three embedding batches");
    auto div = diversity_batch(*z_new, *z_old, *z_known, cfg);
    out.diversity = div.value;
    out.mean_cos_new_old = div.mean_cos_new_old;
    out.mean_cos_new_known = div.mean_cos_new_known;
    out.grad_z_new = std::move(div.grad_new);
    out.value += div.value;
  }
  return out;
}

// Backprop through row-wise L2 normalisation: given z and dL/dzhat, returns
// dL/dz = (g - (g . zhat) zhat) / |z|.
template <typename T>
Tensor<T> l2_normalize_backward(const Tensor<T>& z, const Tensor<T>& grad_hat) {
  Tensor<T> out = Tensor<T>::like(z);
  const std::size_t d = z.sample_size();
  for (int i = 0; i < z.n(); ++i) {
    auto zi = z.sample(i);
    auto gi = grad_hat.sample(i);
    double nrm = 0.0;
    for (std::size_t k = 0; k < d; ++k) nrm += static_cast<double>(zi[k]) * zi[k];
    nrm = std::sqrt(nrm);
    double dot = 0.0;
    for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(gi[k]) * zi[k] / nrm;
    auto oi = out.sample(i);
    for (std::size_t k = 0; k < d; ++k) oi[k] = static_cast<T>((gi[k] - dot * zi[k] / nrm) / nrm);
  }
  return out;
}

}  // namespace pose::losses
