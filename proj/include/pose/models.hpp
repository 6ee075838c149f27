#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pose/error.hpp"
#include "pose/nn.hpp"
#include "pose/random.hpp"
#include "pose/spectrum.hpp"
#include "pose/tensor.hpp"

namespace pose {

// ===========================================================================
// Augmentation models

enum class AugVariant { Plain, DownUp };

struct AugArch {
  int layers = 2;   // convolution count, 1..4 (Plain only)
  int kernel = 3;   // odd, 1..7
  int hidden = 32;  // width of the hidden feature maps
  AugVariant variant = AugVariant::Plain;

  void validate() const {
    if (layers < 1 || layers > 4) throw InvalidParameter("augmentation layers must be in [1, 4]");
    if (kernel < 1 || kernel > 7 || kernel % 2 == 0) throw InvalidParameter("augmentation kernel must be odd, <= 7");
    if (hidden < 1) throw InvalidParameter("augmentation hidden width must be positive");
  }

  std::string tag() const {
    if (variant == AugVariant::DownUp) return "up_down";
    return "conv" + std::to_string(layers) + "_k" + std::to_string(kernel);
  }
};

inline AugArch aug_arch_from_tag(const std::string& tag) {
  if (tag == "up_down") return AugArch{2, 3, 32, AugVariant::DownUp};
  AugArch a;
  if (std::sscanf(tag.c_str(), "conv%d_k%d", &a.layers, &a.kernel) != 2)
    throw InvalidParameter("unknown architecture tag '" + tag + "'");
  a.validate();
  if (a.tag() != tag) throw InvalidParameter("unknown architecture tag '" + tag + "'");
  return a;
}

// Tiny convolutional network rewriting low-level traces of its input. The
// default is two 3x3 convolutions 3->32->3 with tanh in between, no skip
// connection: the network has to learn the reconstruction itself.
template <typename T>
class AugmentationModel {
 public:
  AugmentationModel() = default;
  AugmentationModel(AugArch arch, int model_id, std::uint64_t seed)
      : arch_(arch), model_id_(model_id), seed_(seed) {
    arch_.validate();
    build();
  }

  const AugArch& arch() const { return arch_; }
  int model_id() const { return model_id_; }
  void set_model_id(int id) { model_id_ = id; }
  std::uint64_t seed() const { return seed_; }

  Tensor<T> forward(const Tensor<T>& x) const {
    check(x);
    return net_.forward(x);
  }
  Tensor<T> forward_train(const Tensor<T>& x) {
    check(x);
    return net_.forward_train(x, dummy_rng_);
  }
  Tensor<T> backward(const Tensor<T>& g) { return net_.backward(g); }

  std::vector<nn::Param<T>*> params() { return net_.params(); }
  std::vector<const nn::Param<T>*> params() const { return net_.params(); }
  void zero_grad() { net_.zero_grad(); }

  // Convolution layers in order (for shape checks and weight export).
  std::vector<const nn::Conv2d<T>*> convs() const {
    std::vector<const nn::Conv2d<T>*> out;
    for (std::size_t i = 0; i < net_.size(); ++i)
      if (auto* c = dynamic_cast<const nn::Conv2d<T>*>(&net_.layer(i))) out.push_back(c);
    return out;
  }

  template <typename U>
  AugmentationModel<U> cast() const {
    AugmentationModel<U> out(arch_, model_id_, seed_);
    auto src = params();
    auto dst = out.params();
    for (std::size_t k = 0; k < src.size(); ++k) dst[k]->value = src[k]->value.template cast<U>();
    return out;
  }

 private:
  void check(const Tensor<T>& x) const {
    if (x.c() != 3) throw InvalidInput("augmentation model expects 3 channels, got " + std::to_string(x.c()));
  }

  void build() {
    Rng rng(seed_);
    const int pad = arch_.kernel / 2;
    auto conv = [&](int in, int out) -> nn::Conv2d<T>& {
      auto& c = net_.template add<nn::Conv2d<T>>(in, out, arch_.kernel, 1, pad);
      c.init(rng, 1.0);
      return c;
    };
    if (arch_.variant == AugVariant::DownUp) {
      net_.template add<nn::AvgPool2<T>>();
      conv(3, arch_.hidden);
      net_.template add<nn::Tanh<T>>();
      net_.template add<nn::Upsample2<T>>();
      conv(arch_.hidden, 3);
      return;
    }
    if (arch_.layers == 1) {
      conv(3, 3);
      return;
    }
    conv(3, arch_.hidden);
    net_.template add<nn::Tanh<T>>();
    for (int l = 1; l + 1 < arch_.layers; ++l) {
      conv(arch_.hidden, arch_.hidden);
      net_.template add<nn::Tanh<T>>();
    }
    conv(arch_.hidden, 3);
  }

  AugArch arch_;
  int model_id_ = 0;
  std::uint64_t seed_ = 0;
  nn::Sequential<T> net_;
  Rng dummy_rng_{0};
};

template <typename T = float>
AugmentationModel<T> init_augmentation_model(std::uint64_t seed, AugArch arch = {}, int model_id = 0) {
  return AugmentationModel<T>(arch, model_id, seed);
}

// Same shape, no clamping; clamping to [0, 1] happens only on export.
template <typename T>
Tensor<T> aug_forward(const AugmentationModel<T>& model, const Tensor<T>& x) {
  return model.forward(x);
}

template <typename T>
Tensor<T> clamp01(Tensor<T> x) {
  for (auto& v : x.vec()) v = std::min(T{1}, std::max(T{0}, v));
  return x;
}

// Append-only pool; member i was trained at epoch i.
template <typename T>
class ModelPool {
 public:
  explicit ModelPool(std::uint64_t seed = 0) : rng_(seed) {}

  void append(AugmentationModel<T> m) {
    if (m.model_id() != static_cast<int>(members_.size()))
      throw InvalidInput("pool append out of order: model " + std::to_string(m.model_id()) + " at position " +
                         std::to_string(members_.size()));
    members_.push_back(std::move(m));
  }

  std::size_t size() const { return members_.size(); }
  bool empty() const { return members_.empty(); }
  const AugmentationModel<T>& operator[](std::size_t i) const { return members_[i]; }
  AugmentationModel<T>& mutable_member(std::size_t i) { return members_[i]; }
  const std::vector<AugmentationModel<T>>& members() const { return members_; }

  // Uniformly chosen previous member.
  const AugmentationModel<T>& sample(Rng& rng) const {
    if (members_.empty()) throw InvalidInput("cannot sample from an empty pool");
    return members_[uniform_index(rng, members_.size())];
  }
  std::size_t sample_index() { return static_cast<std::size_t>(uniform_index(rng_, members_.size())); }
  Rng& rng() { return rng_; }

 private:
  std::vector<AugmentationModel<T>> members_;
  Rng rng_;
};

// ===========================================================================
// Task model

struct TaskConfig {
  int input_size = 128;
  std::vector<int> channels{64, 64, 128, 128, 256, 256, 512, 512};
  int embed_dim = 128;
  int num_classes = 5;
  int head_depth = 1;  // 1: dropout + affine; 2: dropout + affine + relu + affine
  double dropout = 0.2;
  double dct_eps = spectrum::kDefaultDctEps;

  void validate() const {
    if (input_size < 4) throw InvalidParameter("input size too small");
    if (channels.empty()) throw InvalidParameter("extractor needs at least one convolution");
    for (int c : channels)
      if (c < 1) throw InvalidParameter("channel counts must be positive");
    if (embed_dim < 1) throw InvalidParameter("embedding dimension must be positive");
    if (num_classes < 2) throw InvalidParameter("need at least two classes");
    if (head_depth != 1 && head_depth != 2) throw InvalidParameter("head depth must be 1 or 2");
    if (!(dct_eps > 0.0)) throw InvalidParameter("dct eps must be positive");
  }
};

template <typename T>
struct TaskOutputs {
  Tensor<T> features;   // pooled extractor output (N, C, 1, 1)
  Tensor<T> embedding;  // projection head output (N, D, 1, 1)
  Tensor<T> logits;     // classification head output (N, K, 1, 1)
};

// DCT front end -> conv stack (stride 2 on every second conv) -> global
// average pool -> {projection MLP with two hidden layers, classifier}.
template <typename T>
class TaskModel {
 public:
  TaskModel() = default;
  TaskModel(TaskConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
    cfg_.validate();
    build();
  }

  const TaskConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }
  int num_classes() const { return cfg_.num_classes; }
  int feature_dim() const { return cfg_.channels.back(); }

  // Per-coefficient standardisation of the log-DCT input, estimated on
  // training images.
  void fit_input_stats(const Tensor<T>& images) {
    const Tensor<T> logs = log_dct(images);
    const std::size_t m = logs.sample_size();
    std::vector<double> mean(m, 0.0), sq(m, 0.0);
    for (int i = 0; i < logs.n(); ++i) {
      auto s = logs.sample(i);
      for (std::size_t k = 0; k < m; ++k) {
        mean[k] += s[k];
        sq[k] += static_cast<double>(s[k]) * s[k];
      }
    }
    for (std::size_t k = 0; k < m; ++k) {
      mean[k] /= logs.n();
      const double var = std::max(0.0, sq[k] / logs.n() - mean[k] * mean[k]);
      in_mean_[k] = static_cast<T>(mean[k]);
      in_std_[k] = static_cast<T>(std::sqrt(var) + 1e-3);
    }
  }
  const std::vector<T>& input_mean() const { return in_mean_; }
  const std::vector<T>& input_std() const { return in_std_; }
  std::vector<T>& input_mean() { return in_mean_; }
  std::vector<T>& input_std() { return in_std_; }

  TaskOutputs<T> forward(const Tensor<T>& x) const {
    check(x);
    TaskOutputs<T> out;
    out.features = extractor_.forward(frontend(x));
    out.embedding = projection_.forward(out.features);
    out.logits = head_.forward(out.features);
    return out;
  }

  TaskOutputs<T> forward_train(const Tensor<T>& x, Rng& rng) {
    check(x);
    TaskOutputs<T> out;
    out.features = extractor_.forward_train(frontend_train(x), rng);
    out.embedding = projection_.forward_train(out.features, rng);
    out.logits = head_.forward_train(out.features, rng);
    return out;
  }

  // Backpropagates whichever head gradients are given (null = not used).
  // Returns dL/dx when to_input is set, otherwise an empty tensor.
  Tensor<T> backward(const Tensor<T>* d_embedding, const Tensor<T>* d_logits, bool to_input = false) {
    Tensor<T> d_feat;
    if (d_embedding) d_feat = projection_.backward(*d_embedding);
    if (d_logits) {
      Tensor<T> g = head_.backward(*d_logits);
      if (d_feat.empty()) {
        d_feat = std::move(g);
      } else {
        for (std::size_t i = 0; i < d_feat.size(); ++i) d_feat[i] += g[i];
      }
    }
    if (d_feat.empty()) throw InvalidInput("backward needs at least one head gradient");
    Tensor<T> d_front = extractor_.backward(d_feat);
    if (!to_input) return {};
    return frontend_backward(d_front);
  }

  std::vector<nn::Param<T>*> params() {
    auto p = extractor_.params();
    for (auto* q : projection_.params()) p.push_back(q);
    for (auto* q : head_.params()) p.push_back(q);
    return p;
  }
  std::vector<const nn::Param<T>*> params() const {
    auto p = extractor_.params();
    for (auto* q : projection_.params()) p.push_back(q);
    for (auto* q : head_.params()) p.push_back(q);
    return p;
  }
  std::vector<nn::Param<T>*> extractor_params() { return extractor_.params(); }
  std::vector<nn::Param<T>*> projection_params() { return projection_.params(); }
  std::vector<nn::Param<T>*> head_params() { return head_.params(); }
  void zero_grad() {
    extractor_.zero_grad();
    projection_.zero_grad();
    head_.zero_grad();
  }

  // log(|DCT(x)| + eps) per channel, before standardisation.
  Tensor<T> log_dct(const Tensor<T>& x) const {
    Tensor<T> out = Tensor<T>::like(x);
    const int n = cfg_.input_size;
    const T eps = static_cast<T>(cfg_.dct_eps);
    MatT g(n, n), r(n, n);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        Eigen::Map<const MatT> src(x.data() + x.index(i, c, 0, 0), n, n);
        r.noalias() = dct_ * src * dct_.transpose();
        T* dst = out.data() + out.index(i, c, 0, 0);
        for (Eigen::Index k = 0; k < n * n; ++k) dst[k] = std::log(std::abs(r.data()[k]) + eps);
      }
    return out;
  }

 private:
  using MatT = nn::MatR<T>;

  void check(const Tensor<T>& x) const {
    if (x.c() != 3 || x.h() != cfg_.input_size || x.w() != cfg_.input_size)
      throw InvalidInput("task model expects (N,3," + std::to_string(cfg_.input_size) + "," +
                         std::to_string(cfg_.input_size) + "), got " + x.shape_string());
  }

  void build() {
    Rng rng(seed_);
    const spectrum::Grid d = spectrum::dct_matrix(cfg_.input_size);
    dct_ = d.cast<T>();
    const std::size_t m = static_cast<std::size_t>(3) * cfg_.input_size * cfg_.input_size;
    in_mean_.assign(m, T{0});
    in_std_.assign(m, T{1});

    int in = 3;
    for (std::size_t l = 0; l < cfg_.channels.size(); ++l) {
      const int stride = (l % 2 == 1) ? 2 : 1;
      auto& c = extractor_.template add<nn::Conv2d<T>>(in, cfg_.channels[l], 3, stride, 1);
      c.init(rng, std::sqrt(6.0));  // He-uniform for ReLU
      extractor_.template add<nn::ReLU<T>>();
      in = cfg_.channels[l];
    }
    extractor_.template add<nn::GlobalAvgPool<T>>();

    const int f = cfg_.channels.back();
    projection_.template add<nn::Linear<T>>(f, f).init(rng, std::sqrt(6.0));
    projection_.template add<nn::ReLU<T>>();
    projection_.template add<nn::Linear<T>>(f, f).init(rng, std::sqrt(6.0));
    projection_.template add<nn::ReLU<T>>();
    projection_.template add<nn::Linear<T>>(f, cfg_.embed_dim).init(rng, 1.0);

    head_.template add<nn::Dropout<T>>(cfg_.dropout);
    if (cfg_.head_depth == 2) {
      head_.template add<nn::Linear<T>>(f, f).init(rng, std::sqrt(6.0));
      head_.template add<nn::ReLU<T>>();
    }
    head_.template add<nn::Linear<T>>(f, cfg_.num_classes).init(rng, 1.0);
  }

  Tensor<T> frontend(const Tensor<T>& x) const {
    Tensor<T> z = log_dct(x);
    const std::size_t m = z.sample_size();
    for (int i = 0; i < z.n(); ++i) {
      auto s = z.sample(i);
      for (std::size_t k = 0; k < m; ++k) s[k] = (s[k] - in_mean_[k]) / in_std_[k];
    }
    return z;
  }

  Tensor<T> frontend_train(const Tensor<T>& x) {
    const int n = cfg_.input_size;
    coeffs_ = Tensor<T>::like(x);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        Eigen::Map<const MatT> src(x.data() + x.index(i, c, 0, 0), n, n);
        Eigen::Map<MatT> dst(coeffs_.data() + coeffs_.index(i, c, 0, 0), n, n);
        dst.noalias() = dct_ * src * dct_.transpose();
      }
    Tensor<T> z = Tensor<T>::like(x);
    const T eps = static_cast<T>(cfg_.dct_eps);
    const std::size_t m = z.sample_size();
    for (int i = 0; i < z.n(); ++i) {
      auto s = z.sample(i);
      auto co = coeffs_.sample(i);
      for (std::size_t k = 0; k < m; ++k) s[k] = (std::log(std::abs(co[k]) + eps) - in_mean_[k]) / in_std_[k];
    }
    return z;
  }

  Tensor<T> frontend_backward(const Tensor<T>& g) const {
    const int n = cfg_.input_size;
    const T eps = static_cast<T>(cfg_.dct_eps);
    Tensor<T> dx = Tensor<T>::like(g);
    MatT dc(n, n);
    for (int i = 0; i < g.n(); ++i)
      for (int c = 0; c < g.c(); ++c) {
        const std::size_t base = g.index(i, c, 0, 0);
        for (Eigen::Index k = 0; k < n * n; ++k) {
          const T co = coeffs_[base + k];
          const T sign = co > T{0} ? T{1} : (co < T{0} ? T{-1} : T{0});
          dc.data()[k] = g[base + k] / in_std_[(c * n * n) + k] * sign / (std::abs(co) + eps);
        }
        Eigen::Map<MatT> dst(dx.data() + base, n, n);
        dst.noalias() = dct_.transpose() * dc * dct_;
      }
    return dx;
  }

  TaskConfig cfg_;
  std::uint64_t seed_ = 0;
  MatT dct_;
  std::vector<T> in_mean_, in_std_;
  nn::Sequential<T> extractor_;
  nn::Sequential<T> projection_;
  nn::Sequential<T> head_;
  Tensor<T> coeffs_;
};

template <typename T>
Tensor<T> extract_embedding(const TaskModel<T>& task, const Tensor<T>& x) {
  return task.forward(x).embedding;
}

template <typename T>
Tensor<T> classify(const TaskModel<T>& task, const Tensor<T>& x) {
  return task.forward(x).logits;
}

// Row-wise L2 normalisation of a (N, D, 1, 1) batch.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& z) {
  Tensor<T> out = z;
  const std::size_t d = z.sample_size();
  for (int i = 0; i < z.n(); ++i) {
    auto s = out.sample(i);
    double nrm = 0.0;
    for (std::size_t k = 0; k < d; ++k) nrm += static_cast<double>(s[k]) * s[k];
    nrm = std::sqrt(nrm);
    if (nrm == 0.0) throw UndefinedCosine("cannot normalise a zero vector");
    for (std::size_t k = 0; k < d; ++k) s[k] = static_cast<T>(s[k] / nrm);
  }
  return out;
}

template <typename T>
std::vector<double> softmax(std::span<const T> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) sum += (p[k] = std::exp(static_cast<double>(logits[k]) - mx));
  for (double& v : p) v /= sum;
  return p;
}

// ===========================================================================
// Weight distance

// One flattened weight array per learnable layer.
using WeightCollection = std::vector<std::vector<double>>;

template <typename T>
WeightCollection layer_weights(const std::vector<const nn::Param<T>*>& params) {
  // Params come in (weight, bias) pairs per layer.
  WeightCollection out;
  for (std::size_t k = 0; k + 1 < params.size(); k += 2) {
    std::vector<double> w;
    for (T v : params[k]->value.vec()) w.push_back(static_cast<double>(v));
    for (T v : params[k + 1]->value.vec()) w.push_back(static_cast<double>(v));
    out.push_back(std::move(w));
  }
  return out;
}

// Mean over layers of ||W2_i - W1_i|| / ||W1_i||.
inline double weight_distance(const WeightCollection& w1, const WeightCollection& w2) {
  if (w1.size() != w2.size() || w1.empty()) throw InvalidInput("weight collections differ in layer count");
  double total = 0.0;
  for (std::size_t i = 0; i < w1.size(); ++i) {
    if (w1[i].size() != w2[i].size()) throw InvalidInput("layer " + std::to_string(i) + " shapes differ");
    double ref = 0.0, diff = 0.0;
    for (std::size_t k = 0; k < w1[i].size(); ++k) {
      ref += w1[i][k] * w1[i][k];
      const double d = w2[i][k] - w1[i][k];
      diff += d * d;
    }
    if (ref == 0.0) throw DegenerateReference("layer " + std::to_string(i) + " of the reference has zero norm");
    total += std::sqrt(diff) / std::sqrt(ref);
  }
  return total / static_cast<double>(w1.size());
}

}  // namespace pose
