#pragma once

// Progressive open-space expansion training: each epoch trains one new
// augmentation model against a randomly drawn older one (task model frozen),
// then trains the task model on known images plus both augmented copies
// (augmentation models frozen).

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "pose/bench.hpp"
#include "pose/checkpoint.hpp"
#include "pose/error.hpp"
#include "pose/losses.hpp"
#include "pose/models.hpp"
#include "pose/nn.hpp"
#include "pose/random.hpp"
#include "pose/spectrum.hpp"
#include "pose/tensor.hpp"

namespace pose::train {

enum class TrainMode { Pose, Base, PoseNoDiv, Joint };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Pose: return "pose";
    case TrainMode::Base: return "base";
    case TrainMode::PoseNoDiv: return "pose-nodiv";
    case TrainMode::Joint: return "joint";
  }
  return "pose";
}

inline TrainMode mode_from_string(const std::string& s) {
  if (s == "pose") return TrainMode::Pose;
  if (s == "base") return TrainMode::Base;
  if (s == "pose-nodiv") return TrainMode::PoseNoDiv;
  if (s == "joint") return TrainMode::Joint;
  throw InvalidParameter("unknown training mode '" + s + "' (pose|base|pose-nodiv|joint)");
}

// Train-time perturbation of known images ("immunized" training).
struct Immunize {
  bench::PerturbKind kind = bench::PerturbKind::Blur;
  double max_strength = 0.0;
  double probability = 0.5;
};

struct TrainConfig {
  int epochs = 20;
  double lr_task = 1e-4;
  double lr_aug = 1e-2;
  double lr_decay = 0.9;
  long lr_decay_every = 500;
  int batch_per_class = 8;
  int input_size = 128;
  int aug_steps_per_epoch = 0;  // 0: one pass over the train split, capped at 200
  std::uint64_t seed = 0;
  losses::LossConfig loss;
  TrainMode mode = TrainMode::Pose;
  AugArch aug_arch;
  std::vector<int> channels{64, 64, 128, 128, 256, 256, 512, 512};
  int embed_dim = 128;
  int head_depth = 1;
  double dropout = 0.2;
  double dct_eps = spectrum::kDefaultDctEps;
  std::optional<Immunize> immunize;

  void validate() const {
    if (epochs < 1) throw InvalidParameter("epochs must be >= 1");
    if (!(lr_task > 0.0) || !(lr_aug > 0.0)) throw InvalidParameter("learning rates must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw InvalidParameter("lr_decay must be in (0, 1]");
    if (lr_decay_every < 1) throw InvalidParameter("lr_decay_every must be >= 1");
    if (batch_per_class < 2) throw InvalidParameter("batch_per_class must be >= 2");
    if (input_size < 4) throw InvalidParameter("input_size too small");
    if (aug_steps_per_epoch < 0) throw InvalidParameter("aug_steps_per_epoch must be >= 0");
    if (immunize && (immunize->probability < 0.0 || immunize->probability > 1.0))
      throw InvalidParameter("immunize probability must be in [0, 1]");
    loss.validate();
    aug_arch.validate();
  }

  // Loss weights actually used by the augmentation phase.
  losses::LossConfig effective_loss() const {
    losses::LossConfig l = loss;
    if (mode == TrainMode::PoseNoDiv) l.alpha = l.beta = 0.0;
    return l;
  }

  TaskConfig task_config(int num_classes) const {
    TaskConfig t;
    t.input_size = input_size;
    t.channels = channels;
    t.embed_dim = embed_dim;
    t.num_classes = num_classes;
    t.head_depth = head_depth;
    t.dropout = dropout;
    t.dct_eps = dct_eps;
    return t;
  }
};

struct TrainingData {
  Tensor<float> images;
  std::vector<int> labels;
  int num_classes = 0;

  void validate(const TrainConfig& cfg) const {
    if (num_classes < 2) throw DatasetError("need at least two known classes");
    if (static_cast<std::size_t>(images.n()) != labels.size()) throw DatasetError("image and label counts differ");
    if (images.c() != 3 || images.h() != cfg.input_size || images.w() != cfg.input_size)
      throw DatasetError("train images must be (N,3," + std::to_string(cfg.input_size) + "," +
                         std::to_string(cfg.input_size) + "), got " + images.shape_string());
    std::vector<int> counts(num_classes, 0);
    for (int l : labels) {
      if (l < 0 || l >= num_classes) throw DatasetError("train label " + std::to_string(l) + " outside [0, K)");
      ++counts[l];
    }
    for (int c = 0; c < num_classes; ++c)
      if (counts[c] < cfg.batch_per_class)
        throw DatasetError("class " + std::to_string(c) + " has " + std::to_string(counts[c]) +
                           " train images, fewer than batch_per_class");
  }
};

inline TrainingData training_data(const bench::LabeledImages& split, int num_classes) {
  TrainingData d{split.images, split.labels, num_classes};
  return d;
}

// Class-balanced batches: every batch holds batch_per_class images of each
// class, class-major. One epoch covers the largest class once; smaller
// classes wrap around their own permutation.
class BalancedSampler {
 public:
  BalancedSampler(std::span<const int> labels, int num_classes, int per_class)
      : by_class_(num_classes), per_class_(per_class) {
    for (std::size_t i = 0; i < labels.size(); ++i) by_class_[labels[i]].push_back(static_cast<int>(i));
  }

  std::size_t batches_per_epoch() const {
    std::size_t mx = 0;
    for (const auto& c : by_class_) mx = std::max(mx, c.size());
    return (mx + per_class_ - 1) / per_class_;
  }

  std::vector<std::vector<int>> epoch(Rng& rng) const {
    std::vector<std::vector<int>> perms = by_class_;
    for (auto& p : perms) shuffle(p, rng);
    std::vector<std::vector<int>> out(batches_per_epoch());
    for (std::size_t b = 0; b < out.size(); ++b)
      for (const auto& p : perms)
        for (int j = 0; j < per_class_; ++j) out[b].push_back(p[(b * per_class_ + j) % p.size()]);
    return out;
  }

 private:
  std::vector<std::vector<int>> by_class_;
  int per_class_;
};

template <typename T>
Tensor<T> gather(const Tensor<T>& images, std::span<const int> idx) {
  Tensor<T> out(static_cast<int>(idx.size()), images.c(), images.h(), images.w());
  const std::size_t s = images.sample_size();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(images.data() + idx[i] * s, s, out.data() + i * s);
  return out;
}

// Append-only JSONL sink; records are counted even without a file.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& path) : os_(std::make_unique<std::ofstream>(path, std::ios::app)) {
    if (!*os_) throw IoError("cannot open metrics log " + path.string());
  }
  void append(const nlohmann::ordered_json& record) {
    ++records_;
    if (os_) *os_ << record.dump() << '\n';
  }
  long records() const { return records_; }
  void flush() {
    if (os_) os_->flush();
  }

 private:
  std::unique_ptr<std::ofstream> os_;
  long records_ = 0;
};

struct AugEpochStats {
  int model_id = 0;
  int steps = 0;
  double mean_loss = 0.0;
  double final_raw_mse = 0.0;
  double cos_new_old_start = 0.0;  // mean over the first tenth of steps
  double cos_new_old_end = 0.0;    // mean over the last tenth
  bool diversity = false;
};

struct TaskEpochStats {
  int steps = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
};

struct EpochSummary {
  int epoch = 0;
  std::vector<AugEpochStats> aug;
  TaskEpochStats task;
};

inline nlohmann::ordered_json to_json(const EpochSummary& s) {
  nlohmann::ordered_json j;
  j["epoch"] = s.epoch;
  j["train_accuracy"] = s.task.train_accuracy;
  j["task_loss"] = s.task.mean_loss;
  j["task_steps"] = s.task.steps;
  auto arr = nlohmann::ordered_json::array();
  for (const auto& a : s.aug) {
    nlohmann::ordered_json m;
    m["model_id"] = a.model_id;
    m["steps"] = a.steps;
    m["mean_loss"] = a.mean_loss;
    m["final_raw_mse"] = a.final_raw_mse;
    m["diversity"] = a.diversity;
    m["cos_new_old_start"] = a.cos_new_old_start;
    m["cos_new_old_end"] = a.cos_new_old_end;
    arr.push_back(m);
  }
  j["augmentation"] = arr;
  return j;
}

struct TrainState {
  int epoch = 0;  // epochs completed
  ModelPool<float> pool;
  TaskModel<float> task;
  nn::Adam<float> task_opt;
  Rng rng;
  long task_iteration = 0;
  std::vector<EpochSummary> history;
  MetricsLog log;

  TrainState() = default;
  TrainState(const TrainState&) = delete;
  TrainState& operator=(const TrainState&) = delete;
  TrainState(TrainState&&) = default;
  TrainState& operator=(TrainState&&) = default;
};

inline std::uint64_t task_seed(std::uint64_t seed) { return hash_seed(seed, hash_string("task")); }
inline std::uint64_t aug_seed(std::uint64_t seed, int epoch) {
  return hash_seed(seed, hash_string("augmentation"), static_cast<std::uint64_t>(epoch));
}

inline std::unique_ptr<TrainState> make_state(const TrainingData& data, const TrainConfig& cfg,
                                              const std::filesystem::path& log_path = {}) {
  cfg.validate();
  data.validate(cfg);
  auto s = std::make_unique<TrainState>();
  s->pool = ModelPool<float>(hash_seed(cfg.seed, hash_string("pool")));
  s->task = TaskModel<float>(cfg.task_config(data.num_classes), task_seed(cfg.seed));
  s->task.fit_input_stats(data.images);
  s->task_opt = nn::Adam<float>(s->task.params(), nn::AdamConfig{cfg.lr_task});
  s->rng = Rng(hash_seed(cfg.seed, hash_string("stream")));
  if (!log_path.empty()) s->log = MetricsLog(log_path);
  return s;
}

namespace detail {

inline bool finite_or_count(double v, int& bad, int epoch, int step, const char* what) {
  if (std::isfinite(v)) {
    bad = 0;
    return true;
  }
  if (++bad >= 3) throw DivergenceError(epoch, step, std::string(what) + " loss non-finite for 3 consecutive steps");
  return false;
}

inline int aug_steps(const TrainConfig& cfg, std::size_t batches_per_epoch) {
  if (cfg.aug_steps_per_epoch > 0) return cfg.aug_steps_per_epoch;
  return static_cast<int>(std::min<std::size_t>(batches_per_epoch, 200));
}

// Endless stream of balanced batches drawn from the state's rng.
class BatchStream {
 public:
  BatchStream(const BalancedSampler& sampler, Rng& rng) : sampler_(sampler), rng_(rng) {}
  const std::vector<int>& next() {
    if (pos_ >= batches_.size()) {
      batches_ = sampler_.epoch(rng_);
      pos_ = 0;
    }
    return batches_[pos_++];
  }

 private:
  const BalancedSampler& sampler_;
  Rng& rng_;
  std::vector<std::vector<int>> batches_;
  std::size_t pos_ = 0;
};

inline std::vector<int> batch_labels(const TrainingData& d, std::span<const int> idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int i : idx) out.push_back(d.labels[i]);
  return out;
}

}  // namespace detail

// Optimises one augmentation model for `steps` steps. With diversity on,
// each step draws the old model uniformly from `old_candidates` (pool
// indices).
inline AugEpochStats optimize_augmentation(TrainState& s, const TrainingData& data, const TrainConfig& cfg,
                                           AugmentationModel<float>& model, int steps, bool diversity,
                                           const std::vector<std::size_t>& old_candidates, int epoch) {
  const losses::LossConfig lc = cfg.effective_loss();
  diversity = diversity && !old_candidates.empty() && (lc.alpha > 0.0 || lc.beta > 0.0);
  BalancedSampler sampler(data.labels, data.num_classes, cfg.batch_per_class);
  detail::BatchStream stream(sampler, s.rng);
  nn::Adam<float> opt(model.params(), nn::AdamConfig{cfg.lr_aug});
  AugEpochStats st;
  st.model_id = model.model_id();
  st.steps = steps;
  st.diversity = diversity;
  std::vector<double> cos_trace;
  int bad = 0;
  for (int step = 0; step < steps; ++step) {
    const auto& idx = stream.next();
    const Tensor<float> x = gather(data.images, idx);
    const double lr = nn::step_lr(cfg.lr_aug, cfg.lr_decay, cfg.lr_decay_every, step);
    opt.set_lr(lr);
    model.zero_grad();
    Tensor<float> x_new = model.forward_train(x);

    losses::AugLossResult<float> r;
    if (diversity) {
      const auto& old = s.pool[old_candidates[uniform_index(s.rng, old_candidates.size())]];
      const Tensor<float> x_old = old.forward(x);
      const Tensor<float> z_known = s.task.forward(x).embedding;
      const Tensor<float> z_old = s.task.forward(x_old).embedding;
      const Tensor<float> z_new = s.task.forward_train(x_new, s.rng).embedding;
      r = losses::aug_loss(x, x_new, &z_new, &z_old, &z_known, lc, true);
      if (std::isfinite(r.value)) {
        const Tensor<float> dx = s.task.backward(&r.grad_z_new, nullptr, true);
        for (std::size_t i = 0; i < dx.size(); ++i) r.grad_x_new[i] += dx[i];
      }
      cos_trace.push_back(r.mean_cos_new_old);
    } else {
      r = losses::aug_loss<float>(x, x_new, nullptr, nullptr, nullptr, lc, false);
    }
    const bool ok = detail::finite_or_count(r.value, bad, epoch, step, "augmentation");
    if (ok) {
      model.backward(r.grad_x_new);
      opt.step();
    }
    st.mean_loss += r.value / steps;
    st.final_raw_mse = r.raw_mse;

    nlohmann::ordered_json rec;
    rec["phase"] = "aug";
    rec["epoch"] = epoch;
    rec["step"] = step;
    rec["model_id"] = model.model_id();
    rec["loss"] = r.value;
    rec["recon"] = r.recon;
    rec["raw_mse"] = r.raw_mse;
    rec["diversity"] = r.diversity;
    rec["cos_new_old"] = r.mean_cos_new_old;
    rec["cos_new_known"] = r.mean_cos_new_known;
    rec["lr"] = lr;
    s.log.append(rec);
  }
  s.task.zero_grad();
  if (!cos_trace.empty()) {
    const std::size_t w = std::max<std::size_t>(1, cos_trace.size() / 10);
    for (std::size_t i = 0; i < w; ++i) {
      st.cos_new_old_start += cos_trace[i] / w;
      st.cos_new_old_end += cos_trace[cos_trace.size() - 1 - i] / w;
    }
  }
  return st;
}

// Trains a fresh model (seeded by the epoch index) and appends it to the pool.
inline const AugmentationModel<float>& train_aug_epoch(TrainState& s, const TrainingData& data,
                                                       const TrainConfig& cfg, AugEpochStats* stats = nullptr) {
  const int epoch = s.epoch;
  if (static_cast<int>(s.pool.size()) != epoch) throw InvalidInput("pool size must equal completed epochs");
  AugmentationModel<float> model(cfg.aug_arch, epoch, aug_seed(cfg.seed, epoch));
  std::vector<std::size_t> olds(s.pool.size());
  for (std::size_t i = 0; i < olds.size(); ++i) olds[i] = i;
  BalancedSampler sampler(data.labels, data.num_classes, cfg.batch_per_class);
  const int steps = detail::aug_steps(cfg, sampler.batches_per_epoch());
  const auto st = optimize_augmentation(s, data, cfg, model, steps, epoch >= 1, olds, epoch);
  if (stats) *stats = st;
  s.pool.append(std::move(model));
  return s.pool[s.pool.size() - 1];
}

namespace detail {

inline Tensor<float> immunize_batch(const Tensor<float>& x, const Immunize& im, Rng& rng) {
  Tensor<float> out = x;
  const std::size_t s = x.sample_size();
  const auto [lo, hi] = bench::strength_range(im.kind);
  for (int i = 0; i < x.n(); ++i) {
    if (uniform01(rng) >= im.probability) continue;
    const double strength = std::clamp(uniform(rng, 0.0, im.max_strength), lo, hi);
    const Tensor<float> p = bench::perturb(x.slice(i, 1), im.kind, strength, rng());
    std::copy_n(p.data(), s, out.data() + i * s);
  }
  return out;
}

}  // namespace detail

// One pass over the train split. `new_index` is the pool member playing the
// new model; the old model is drawn per batch from members before it (the
// new model itself at epoch 0). Joint mode draws both from the whole pool.
inline TaskEpochStats train_task_epoch(TrainState& s, const TrainingData& data, const TrainConfig& cfg) {
  const int epoch = s.epoch;
  const bool augment = cfg.mode != TrainMode::Base;
  if (augment && s.pool.empty()) throw InvalidInput("task epoch needs at least one augmentation model");
  BalancedSampler sampler(data.labels, data.num_classes, cfg.batch_per_class);
  const auto batches = sampler.epoch(s.rng);
  TaskEpochStats st;
  st.steps = static_cast<int>(batches.size());
  std::size_t correct = 0, seen = 0;
  int bad = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    Tensor<float> x = gather(data.images, batches[b]);
    if (cfg.immunize) x = detail::immunize_batch(x, *cfg.immunize, s.rng);
    const std::vector<int> labels = detail::batch_labels(data, batches[b]);
    const int n = x.n();
    const double lr = nn::step_lr(cfg.lr_task, cfg.lr_decay, cfg.lr_decay_every, s.task_iteration);
    s.task_opt.set_lr(lr);
    s.task.zero_grad();

    nlohmann::ordered_json rec;
    rec["phase"] = "task";
    rec["epoch"] = epoch;
    rec["step"] = static_cast<int>(b);
    double loss = 0.0;
    Tensor<float> logits;
    if (!augment) {
      const auto out = s.task.forward_train(x, s.rng);
      auto ce = losses::cross_entropy_batch(out.logits, labels);
      loss = ce.value;
      if (detail::finite_or_count(loss, bad, epoch, static_cast<int>(b), "task")) {
        s.task.backward(nullptr, &ce.grad);
        s.task_opt.step();
      }
      logits = out.logits;
      rec["loss"] = loss;
      rec["cls"] = ce.value;
    } else {
      std::size_t new_i, old_i;
      if (cfg.mode == TrainMode::Joint) {
        new_i = uniform_index(s.rng, s.pool.size());
        old_i = s.pool.size() > 1 ? (new_i + 1 + uniform_index(s.rng, s.pool.size() - 1)) % s.pool.size() : new_i;
      } else {
        new_i = s.pool.size() - 1;
        old_i = new_i == 0 ? 0 : uniform_index(s.rng, new_i);
      }
      const Tensor<float> x_old = s.pool[old_i].forward(x);
      const Tensor<float> x_new = s.pool[new_i].forward(x);
      const Tensor<float> all = concat({&x, &x_old, &x_new});
      const auto out = s.task.forward_train(all, s.rng);
      const Tensor<float> zhat = l2_normalize_rows(out.embedding);
      const Tensor<float> zk = zhat.slice(0, n), zo = zhat.slice(n, n), zn = zhat.slice(2 * n, n);
      logits = out.logits.slice(0, n);
      auto r = losses::task_loss(logits, zk, zo, zn, labels, cfg.loss);
      loss = r.value;
      if (detail::finite_or_count(loss, bad, epoch, static_cast<int>(b), "task")) {
        Tensor<float> d_logits = Tensor<float>::like(out.logits);
        std::copy_n(r.grad_logits.data(), r.grad_logits.size(), d_logits.data());
        const Tensor<float> d_hat = concat({&r.grad_known, &r.grad_old, &r.grad_new});
        const Tensor<float> d_emb = losses::l2_normalize_backward(out.embedding, d_hat);
        s.task.backward(&d_emb, &d_logits);
        s.task_opt.step();
      }
      rec["loss"] = loss;
      rec["cls"] = r.cls;
      rec["metric_old"] = r.metric_old;
      rec["metric_new"] = r.metric_new;
      rec["old_model"] = static_cast<int>(old_i);
      rec["new_model"] = static_cast<int>(new_i);
    }
    for (int i = 0; i < n; ++i) {
      auto row = logits.sample(i);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      correct += best == labels[i];
    }
    seen += n;
    st.mean_loss += loss / batches.size();
    rec["lr"] = lr;
    s.log.append(rec);
    ++s.task_iteration;
  }
  st.train_accuracy = static_cast<double>(correct) / seen;
  return st;
}

// Writes task model and every pool member under dir.
inline void save_checkpoint(const std::filesystem::path& dir, const TrainState& s, const TrainConfig& cfg) {
  nlohmann::ordered_json snapshot = s.history.empty() ? nlohmann::ordered_json::object() : to_json(s.history.back());
  snapshot["mode"] = to_string(cfg.mode);
  snapshot["train_seed"] = cfg.seed;
  ckpt::save_task_model(dir / "task", s.task, s.epoch, snapshot);
  for (std::size_t i = 0; i < s.pool.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "aug_%03zu", i);
    ckpt::save_augmentation_model(dir / name, s.pool[i], static_cast<int>(i));
  }
}

inline std::filesystem::path epoch_dir(const std::filesystem::path& run_dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch_%04d", epoch);
  return run_dir / "checkpoints" / name;
}

inline std::filesystem::path final_dir(const std::filesystem::path& run_dir) { return run_dir / "checkpoints" / "final"; }

// Full training run. With a run directory, per-epoch checkpoints go to
// checkpoints/epoch_NNNN, the last one also to checkpoints/final, and the
// step log to metrics.jsonl.
inline std::unique_ptr<TrainState> train_pose(const TrainingData& data, const TrainConfig& cfg,
                                              const std::filesystem::path& run_dir = {}) {
  if (!run_dir.empty()) {
    std::filesystem::create_directories(run_dir);
    std::filesystem::remove(run_dir / "metrics.jsonl");
  }
  auto s = make_state(data, cfg, run_dir.empty() ? std::filesystem::path{} : run_dir / "metrics.jsonl");
  BalancedSampler sampler(data.labels, data.num_classes, cfg.batch_per_class);
  const int steps = detail::aug_steps(cfg, sampler.batches_per_epoch());

  if (cfg.mode == TrainMode::Joint)
    for (int i = 0; i < cfg.epochs; ++i) s->pool.append(AugmentationModel<float>(cfg.aug_arch, i, aug_seed(cfg.seed, i)));

  for (int e = 0; e < cfg.epochs; ++e) {
    EpochSummary sum;
    sum.epoch = e;
    if (cfg.mode == TrainMode::Pose || cfg.mode == TrainMode::PoseNoDiv) {
      AugEpochStats a;
      train_aug_epoch(*s, data, cfg, &a);
      sum.aug.push_back(a);
    } else if (cfg.mode == TrainMode::Joint) {
      const int per_model = std::max(1, steps / cfg.epochs);
      for (std::size_t i = 0; i < s->pool.size(); ++i) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < s->pool.size(); ++j)
          if (j != i) others.push_back(j);
        sum.aug.push_back(
            optimize_augmentation(*s, data, cfg, s->pool.mutable_member(i), per_model, e >= 1, others, e));
      }
    }
    sum.task = train_task_epoch(*s, data, cfg);
    s->history.push_back(sum);
    s->epoch = e + 1;

    nlohmann::ordered_json rec = to_json(sum);
    rec["phase"] = "epoch";
    s->log.append(rec);
    s->log.flush();
    if (!run_dir.empty()) save_checkpoint(epoch_dir(run_dir, e), *s, cfg);
  }
  if (!run_dir.empty()) save_checkpoint(final_dir(run_dir), *s, cfg);
  return s;
}

struct LoadedRun {
  TaskModel<float> task;
  std::vector<AugmentationModel<float>> pool;
};

inline LoadedRun load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir / "task")) throw IoError("no checkpoint at " + dir.string());
  LoadedRun r{ckpt::load_task_model<float>(dir / "task"), {}};
  std::vector<std::filesystem::path> augs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory() && e.path().filename().string().rfind("aug_", 0) == 0) augs.push_back(e.path());
  std::sort(augs.begin(), augs.end());
  for (const auto& p : augs) r.pool.push_back(ckpt::load_augmentation_model<float>(p));
  return r;
}

// ---------------------------------------------------------------------------
// Measurements on trained models

// Batch-mean pixel MSE between images and their augmented copies.
inline double residual_mse(const AugmentationModel<float>& model, const Tensor<float>& images) {
  return mean_squared_difference(images, model.forward(images));
}

// Embedding-space centroid of each member's augmented corpus (unit-normalised
// embeddings), then the mean pairwise cosine between centroids.
inline double centroid_similarity(const TaskModel<float>& task, const std::vector<AugmentationModel<float>>& pool,
                                  const Tensor<float>& images) {
  if (pool.size() < 2) throw InvalidInput("centroid similarity needs at least two augmentation models");
  std::vector<std::vector<double>> cents;
  for (const auto& m : pool) {
    const Tensor<float> z = l2_normalize_rows(task.forward(m.forward(images)).embedding);
    std::vector<double> c(z.sample_size(), 0.0);
    for (int i = 0; i < z.n(); ++i)
      for (std::size_t k = 0; k < c.size(); ++k) c[k] += z.sample(i)[k];
    cents.push_back(std::move(c));
  }
  double total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < cents.size(); ++i)
    for (std::size_t j = i + 1; j < cents.size(); ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t k = 0; k < cents[i].size(); ++k) {
        dot += cents[i][k] * cents[j][k];
        na += cents[i][k] * cents[i][k];
        nb += cents[j][k] * cents[j][k];
      }
      total += dot / std::sqrt(na * nb);
      ++pairs;
    }
  return total / pairs;
}

// ---------------------------------------------------------------------------
// Spectral feasibility: fit one augmentation model so the mean spectrum of
// A(source) matches the target corpus while staying close to the source.

struct FeasibilityConfig {
  int steps = 300;
  int batch = 16;
  double lr = 1e-2;
  std::uint64_t seed = 0;
  AugArch arch;
  losses::LossConfig loss;
};

struct FeasibilityReport {
  double baseline_distance = 0.0;  // source corpus vs target, before any model
  double initial_distance = 0.0;   // A at initialisation
  double final_distance = 0.0;
  double final_mse = 0.0;          // pixel MSE between A(source) and source
  int steps = 0;
};

inline nlohmann::ordered_json to_json(const FeasibilityReport& r) {
  nlohmann::ordered_json j;
  j["baseline_distance"] = r.baseline_distance;
  j["initial_distance"] = r.initial_distance;
  j["final_distance"] = r.final_distance;
  j["final_mse"] = r.final_mse;
  j["steps"] = r.steps;
  return j;
}

inline std::pair<AugmentationModel<float>, FeasibilityReport> spectral_feasibility(const Tensor<float>& source,
                                                                                   const Tensor<float>& target,
                                                                                   const FeasibilityConfig& cfg) {
  if (source.h() != target.h() || source.w() != target.w() || source.c() != target.c())
    throw InvalidInput("source and target corpora differ in resolution: " + source.shape_string() + " vs " +
                       target.shape_string());
  if (cfg.steps < 0 || cfg.batch < 1) throw InvalidParameter("feasibility needs steps >= 0 and batch >= 1");
  cfg.loss.validate();
  const spectrum::SpectrumProfile tgt = spectrum::mean_profile(target, false);
  AugmentationModel<float> model(cfg.arch, 0, cfg.seed);
  FeasibilityReport rep;
  rep.baseline_distance = spectrum::profile_distance(spectrum::mean_profile(source, false), tgt);
  rep.initial_distance = spectrum::profile_distance(spectrum::mean_profile(model.forward(source), false), tgt);
  nn::Adam<float> opt(model.params(), nn::AdamConfig{cfg.lr});
  Rng rng(hash_seed(cfg.seed, hash_string("feasibility")));
  std::vector<int> order(source.n());
  for (int i = 0; i < source.n(); ++i) order[i] = i;
  std::size_t pos = order.size();
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx;
    for (int b = 0; b < std::min(cfg.batch, source.n()); ++b) {
      if (pos >= order.size()) {
        shuffle(order, rng);
        pos = 0;
      }
      idx.push_back(order[pos++]);
    }
    const Tensor<float> x = gather(source, idx);
    model.zero_grad();
    const Tensor<float> y = model.forward_train(x);
    auto r = losses::spectral_loss(x, y, y, tgt, cfg.loss);
    if (!std::isfinite(r.value)) throw DivergenceError(0, step, "spectral loss non-finite");
    for (std::size_t i = 0; i < r.grad_aug_all.size(); ++i) r.grad_aug_all[i] += r.grad_aug_src[i];
    model.backward(r.grad_aug_all);
    opt.set_lr(nn::step_lr(cfg.lr, 0.9, 500, step));
    opt.step();
  }
  const Tensor<float> out = model.forward(source);
  rep.final_distance = spectrum::profile_distance(spectrum::mean_profile(out, false), tgt);
  rep.final_mse = mean_squared_difference(source, out);
  rep.steps = cfg.steps;
  return {std::move(model), rep};
}

}  // namespace pose::train
