#pragma once

// Minimal layer library with hand-written backward passes. Convolutions are
// lowered to one GEMM per sample (im2col) on Eigen.
//
// Every layer has two forward paths: forward() is const and cache-free, so
// read-only models can be shared between threads; forward_train() records
// what backward() needs and is owned by a single trainer.

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pose/error.hpp"
#include "pose/random.hpp"
#include "pose/tensor.hpp"

namespace pose::nn {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::like(value)) {}

  void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) const = 0;
  virtual Tensor<T> forward_train(const Tensor<T>& x, Rng& rng) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual std::vector<Param<T>*> params() { return {}; }
  virtual std::vector<const Param<T>*> params() const { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;
  virtual std::string kind() const = 0;
};

// Fan-in scaled uniform draw into a parameter: U(-gain/sqrt(fan_in), +gain/sqrt(fan_in)).
template <typename T>
void fill_fan_in_uniform(Tensor<T>& t, int fan_in, double gain, Rng& rng) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.vec()) v = static_cast<T>(uniform(rng, -bound, bound));
}

// ---------------------------------------------------------------------------

template <typename T>
class Conv2d final : public Layer<T> {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int padding)
      : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(padding),
        weight_("weight", Tensor<T>(out_ch, in_ch, kernel, kernel)),
        bias_("bias", Tensor<T>(out_ch, 1, 1, 1)) {
    if (in_ch < 1 || out_ch < 1 || kernel < 1 || stride < 1 || padding < 0)
      throw InvalidParameter("conv2d dimensions must be positive");
  }

  void init(Rng& rng, double gain) {
    const int fan_in = in_ * k_ * k_;
    fill_fan_in_uniform(weight_.value, fan_in, gain, rng);
    fill_fan_in_uniform(bias_.value, fan_in, gain, rng);
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const Param<T>& weight() const { return weight_; }
  const Param<T>& bias() const { return bias_; }

  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  Tensor<T> forward(const Tensor<T>& x) const override {
    check(x);
    return compute(x);
  }

  Tensor<T> forward_train(const Tensor<T>& x, Rng&) override {
    check(x);
    input_ = x;
    return compute(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const Tensor<T>& x = input_;
    const int ho = out_size(x.h()), wo = out_size(x.w());
    const Eigen::Index spatial = static_cast<Eigen::Index>(ho) * wo;
    const Eigen::Index rows = static_cast<Eigen::Index>(in_) * k_ * k_;
    Eigen::Map<const MatR<T>> wmat(weight_.value.data(), out_, rows);
    Eigen::Map<MatR<T>> wgrad(weight_.grad.data(), out_, rows);
    Tensor<T> dx = Tensor<T>::like(x);
    MatR<T> cols(rows, spatial), dcols(rows, spatial);
    for (int i = 0; i < x.n(); ++i) {
      Eigen::Map<const MatR<T>> g(grad_out.data() + static_cast<std::size_t>(i) * out_ * spatial, out_, spatial);
      im2col(x, i, cols);
      wgrad.noalias() += g * cols.transpose();
      for (int o = 0; o < out_; ++o) bias_.grad[o] += g.row(o).sum();
      dcols.noalias() = wmat.transpose() * g;
      col2im(dcols, x, i, dx);
    }
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::vector<const Param<T>*> params() const override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer<T>> clone() const override {
    auto c = std::make_unique<Conv2d>(*this);
    c->input_ = Tensor<T>();
    return c;
  }
  std::string kind() const override { return "conv2d"; }

 private:
  void check(const Tensor<T>& x) const {
    if (x.c() != in_)
      throw InvalidInput("conv2d expects " + std::to_string(in_) + " channels, got " + std::to_string(x.c()));
  }

  // Valid output columns [lo, hi) for kernel offset kx along an axis of size w.
  std::pair<int, int> valid_range(int kx, int w, int wo) const {
    int lo = 0;
    while (lo < wo && lo * stride_ - pad_ + kx < 0) ++lo;
    int hi = wo;
    while (hi > lo && (hi - 1) * stride_ - pad_ + kx >= w) --hi;
    return {lo, hi};
  }

  // Columns of sample i: (in*k*k, ho*wo).
  void im2col(const Tensor<T>& x, int i, MatR<T>& cols) const {
    const int h = x.h(), w = x.w(), ho = out_size(h), wo = out_size(w);
    cols.setZero();
    for (int c = 0; c < in_; ++c) {
      const T* src = x.data() + x.index(i, c, 0, 0);
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          T* dst = cols.row((c * k_ + ky) * k_ + kx).data();
          const auto [lo, hi] = valid_range(kx, w, wo);
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) continue;
            const T* srow = src + iy * w - pad_ + kx;
            T* drow = dst + oy * wo;
            if (stride_ == 1) {
              std::copy(srow + lo, srow + hi, drow + lo);
            } else {
              for (int ox = lo; ox < hi; ++ox) drow[ox] = srow[ox * stride_];
            }
          }
        }
    }
  }

  void col2im(const MatR<T>& dcols, const Tensor<T>& x, int i, Tensor<T>& dx) const {
    const int h = x.h(), w = x.w(), ho = out_size(h), wo = out_size(w);
    for (int c = 0; c < in_; ++c) {
      T* dst = dx.data() + dx.index(i, c, 0, 0);
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const T* src = dcols.row((c * k_ + ky) * k_ + kx).data();
          const auto [lo, hi] = valid_range(kx, w, wo);
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= h) continue;
            T* drow = dst + iy * w - pad_ + kx;
            const T* srow = src + oy * wo;
            for (int ox = lo; ox < hi; ++ox) drow[ox * stride_] += srow[ox];
          }
        }
    }
  }

  Tensor<T> compute(const Tensor<T>& x) const {
    const int ho = out_size(x.h()), wo = out_size(x.w());
    const Eigen::Index spatial = static_cast<Eigen::Index>(ho) * wo;
    const Eigen::Index rows = static_cast<Eigen::Index>(in_) * k_ * k_;
    Eigen::Map<const MatR<T>> wmat(weight_.value.data(), out_, rows);
    Tensor<T> y(x.n(), out_, ho, wo);
    MatR<T> cols(rows, spatial);
    for (int i = 0; i < x.n(); ++i) {
      im2col(x, i, cols);
      Eigen::Map<MatR<T>> yi(y.data() + static_cast<std::size_t>(i) * out_ * spatial, out_, spatial);
      yi.noalias() = wmat * cols;
      for (int o = 0; o < out_; ++o) yi.row(o).array() += bias_.value[o];
    }
    return y;
  }

  int in_, out_, k_, stride_, pad_;
  Param<T> weight_;
  Param<T> bias_;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------

template <typename T>
class Linear final : public Layer<T> {
 public:
  Linear(int in_features, int out_features)
      : in_(in_features), out_(out_features),
        weight_("weight", Tensor<T>(out_features, in_features, 1, 1)),
        bias_("bias", Tensor<T>(out_features, 1, 1, 1)) {}

  void init(Rng& rng, double gain) {
    fill_fan_in_uniform(weight_.value, in_, gain, rng);
    fill_fan_in_uniform(bias_.value, in_, gain, rng);
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  Tensor<T> forward(const Tensor<T>& x) const override {
    if (static_cast<int>(x.sample_size()) != in_) throw InvalidInput("linear input width mismatch");
    Eigen::Map<const MatR<T>> xm(x.data(), x.n(), in_);
    Eigen::Map<const MatR<T>> wm(weight_.value.data(), out_, in_);
    Tensor<T> y(x.n(), out_, 1, 1);
    Eigen::Map<MatR<T>> ym(y.data(), x.n(), out_);
    ym.noalias() = xm * wm.transpose();
    for (int i = 0; i < x.n(); ++i)
      for (int o = 0; o < out_; ++o) ym(i, o) += bias_.value[o];
    return y;
  }

  Tensor<T> forward_train(const Tensor<T>& x, Rng&) override {
    input_ = x;
    return forward(x);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const int n = input_.n();
    Eigen::Map<const MatR<T>> g(grad_out.data(), n, out_);
    Eigen::Map<const MatR<T>> xm(input_.data(), n, in_);
    Eigen::Map<MatR<T>> wg(weight_.grad.data(), out_, in_);
    wg.noalias() += g.transpose() * xm;
    for (int o = 0; o < out_; ++o) bias_.grad[o] += g.col(o).sum();
    Eigen::Map<const MatR<T>> wm(weight_.value.data(), out_, in_);
    Tensor<T> dx = Tensor<T>::like(input_);
    Eigen::Map<MatR<T>> dxm(dx.data(), n, in_);
    dxm.noalias() = g * wm;
    return dx;
  }

  std::vector<Param<T>*> params() override { return {&weight_, &bias_}; }
  std::vector<const Param<T>*> params() const override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer<T>> clone() const override {
    auto c = std::make_unique<Linear>(*this);
    c->input_ = Tensor<T>();
    return c;
  }
  std::string kind() const override { return "linear"; }

 private:
  int in_, out_;
  Param<T> weight_;
  Param<T> bias_;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------
// Pointwise activations

template <typename T>
class ReLU final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    Tensor<T> y = x;
    for (auto& v : y.vec()) v = v > T{0} ? v : T{0};
    return y;
  }
  Tensor<T> forward_train(const Tensor<T>& x, Rng&) override {
    input_ = x;
    return forward(x);
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (!(input_[i] > T{0})) dx[i] = T{0};
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(); }
  std::string kind() const override { return "relu"; }

 private:
  Tensor<T> input_;
};

template <typename T>
class Tanh final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    Tensor<T> y = x;
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> a(y.data(), static_cast<Eigen::Index>(y.size()));
    a = a.tanh();
    return y;
  }
  Tensor<T> forward_train(const Tensor<T>& x, Rng&) override {
    output_ = forward(x);
    return output_;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= T{1} - output_[i] * output_[i];
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Tanh>(); }
  std::string kind() const override { return "tanh"; }

 private:
  Tensor<T> output_;
};

// (N, C, H, W) -> (N, C, 1, 1)
template <typename T>
class GlobalAvgPool final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    Tensor<T> y(x.n(), x.c(), 1, 1);
    const std::size_t hw = static_cast<std::size_t>(x.h()) * x.w();
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c) {
        const T* src = x.data() + x.index(i, c, 0, 0);
        T acc{0};
        for (std::size_t s = 0; s < hw; ++s) acc += src[s];
        y.at(i, c, 0, 0) = acc / static_cast<T>(hw);
      }
    return y;
  }
  Tensor<T> forward_train(const Tensor<T>& x, Rng&) override {
    in_shape_ = x.shape();
    return forward(x);
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    const std::size_t hw = static_cast<std::size_t>(in_shape_[2]) * in_shape_[3];
    for (int i = 0; i < dx.n(); ++i)
      for (int c = 0; c < dx.c(); ++c) {
        const T v = g.at(i, c, 0, 0) / static_cast<T>(hw);
        std::fill_n(dx.data() + dx.index(i, c, 0, 0), hw, v);
      }
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<GlobalAvgPool>(); }
  std::string kind() const override { return "gap"; }

 private:
  std::array<int, 4> in_shape_{};
};

// 2x2 average pooling, stride 2 (even sizes only).
template <typename T>
class AvgPool2 final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    if (x.h() % 2 || x.w() % 2) throw InvalidInput("avgpool2 needs even spatial size");
    Tensor<T> y(x.n(), x.c(), x.h() / 2, x.w() / 2);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c)
        for (int yy = 0; yy < y.h(); ++yy)
          for (int xx = 0; xx < y.w(); ++xx)
            y.at(i, c, yy, xx) = (x.at(i, c, 2 * yy, 2 * xx) + x.at(i, c, 2 * yy, 2 * xx + 1) +
                                  x.at(i, c, 2 * yy + 1, 2 * xx) + x.at(i, c, 2 * yy + 1, 2 * xx + 1)) /
                                 T{4};
    return y;
  }
  Tensor<T> forward_train(const Tensor<T>& x, Rng&) override {
    in_shape_ = x.shape();
    return forward(x);
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (int i = 0; i < dx.n(); ++i)
      for (int c = 0; c < dx.c(); ++c)
        for (int yy = 0; yy < dx.h(); ++yy)
          for (int xx = 0; xx < dx.w(); ++xx) dx.at(i, c, yy, xx) = g.at(i, c, yy / 2, xx / 2) / T{4};
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<AvgPool2>(); }
  std::string kind() const override { return "avgpool2"; }

 private:
  std::array<int, 4> in_shape_{};
};

// Nearest-neighbour x2 upsampling.
template <typename T>
class Upsample2 final : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x) const override {
    Tensor<T> y(x.n(), x.c(), x.h() * 2, x.w() * 2);
    for (int i = 0; i < x.n(); ++i)
      for (int c = 0; c < x.c(); ++c)
        for (int yy = 0; yy < y.h(); ++yy)
          for (int xx = 0; xx < y.w(); ++xx) y.at(i, c, yy, xx) = x.at(i, c, yy / 2, xx / 2);
    return y;
  }
  Tensor<T> forward_train(const Tensor<T>& x, Rng&) override {
    in_shape_ = x.shape();
    return forward(x);
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (int i = 0; i < g.n(); ++i)
      for (int c = 0; c < g.c(); ++c)
        for (int yy = 0; yy < g.h(); ++yy)
          for (int xx = 0; xx < g.w(); ++xx) dx.at(i, c, yy / 2, xx / 2) += g.at(i, c, yy, xx);
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Upsample2>(); }
  std::string kind() const override { return "upsample2"; }

 private:
  std::array<int, 4> in_shape_{};
};

// Inverted dropout; identity in forward().
template <typename T>
class Dropout final : public Layer<T> {
 public:
  explicit Dropout(double p) : p_(p) {
    if (p < 0.0 || p >= 1.0) throw InvalidParameter("dropout probability must be in [0, 1)");
  }
  double p() const { return p_; }
  Tensor<T> forward(const Tensor<T>& x) const override { return x; }
  Tensor<T> forward_train(const Tensor<T>& x, Rng& rng) override {
    mask_ = Tensor<T>::like(x);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p_));
    Tensor<T> y = x;
    for (std::size_t i = 0; i < y.size(); ++i) {
      mask_[i] = uniform01(rng) < p_ ? T{0} : keep_scale;
      y[i] *= mask_[i];
    }
    return y;
  }
  Tensor<T> backward(const Tensor<T>& g) override {
    Tensor<T> dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask_[i];
    return dx;
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dropout>(p_); }
  std::string kind() const override { return "dropout"; }

 private:
  double p_;
  Tensor<T> mask_;
};

// ---------------------------------------------------------------------------

template <typename T>
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& o) {
    for (const auto& l : o.layers_) layers_.push_back(l->clone());
  }
  Sequential& operator=(const Sequential& o) {
    if (this != &o) {
      layers_.clear();
      for (const auto& l : o.layers_) layers_.push_back(l->clone());
    }
    return *this;
  }
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> h = x;
    for (const auto& l : layers_) h = l->forward(h);
    return h;
  }
  Tensor<T> forward_train(const Tensor<T>& x, Rng& rng) {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward_train(h, rng);
    return h;
  }
  Tensor<T> backward(const Tensor<T>& g) {
    Tensor<T> d = g;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) d = (*it)->backward(d);
    return d;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }
  std::vector<const Param<T>*> params() const {
    std::vector<const Param<T>*> out;
    for (const auto& l : layers_)
      for (const auto* p : std::as_const(*l).params()) out.push_back(p);
    return out;
  }
  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }

  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }
  const Layer<T>& layer(std::size_t i) const { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed parameter list; state is keyed by position, so the list
// must not change between steps.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Param<T>*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (auto* p : params_) {
      m_.push_back(Tensor<T>::like(p->value));
      v_.push_back(Tensor<T>::like(p->value));
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  long steps() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double step_size = cfg_.lr / bc1;
    const double sqrt_bc2 = std::sqrt(bc2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = *params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        const double mi = cfg_.beta1 * static_cast<double>(m[i]) + (1.0 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * static_cast<double>(v[i]) + (1.0 - cfg_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        p.value[i] -= static_cast<T>(step_size * mi / (std::sqrt(vi) / sqrt_bc2 + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

 private:
  std::vector<Param<T>*> params_;
  AdamConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

// Step learning-rate schedule: base * factor^(floor(iteration / every)).
inline double step_lr(double base, double factor, long every, long iteration) {
  if (every <= 0) return base;
  return base * std::pow(factor, static_cast<double>(iteration / every));
}

}  // namespace pose::nn
