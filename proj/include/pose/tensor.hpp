#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <new>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pose/error.hpp"

namespace pose {

// Fixed 64-byte alignment keeps vectorized kernels on the same code path in
// every process, so results do not depend on where the heap placed a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

// Dense NCHW tensor. Vectors and matrices use the trailing dimensions set to
// one, e.g. a batch of D-dim embeddings is (n, D, 1, 1).
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, AlignedAllocator<T>>;

  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T{0})
      : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  static Tensor like(const Tensor& other, T fill = T{0}) {
    return Tensor(other.n(), other.c(), other.h(), other.w(), fill);
  }

  int n() const noexcept { return shape_[0]; }
  int c() const noexcept { return shape_[1]; }
  int h() const noexcept { return shape_[2]; }
  int w() const noexcept { return shape_[3]; }
  const std::array<int, 4>& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t sample_size() const noexcept {
    return static_cast<std::size_t>(shape_[1]) * shape_[2] * shape_[3];
  }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  Storage& vec() noexcept { return data_; }
  const Storage& vec() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(int i, int ch, int y, int x) noexcept { return data_[index(i, ch, y, x)]; }
  const T& at(int i, int ch, int y, int x) const noexcept { return data_[index(i, ch, y, x)]; }

  std::size_t index(int i, int ch, int y, int x) const noexcept {
    return ((static_cast<std::size_t>(i) * shape_[1] + ch) * shape_[2] + y) * shape_[3] + x;
  }

  std::span<T> sample(int i) noexcept { return {data_.data() + i * sample_size(), sample_size()}; }
  std::span<const T> sample(int i) const noexcept {
    return {data_.data() + i * sample_size(), sample_size()};
  }

  Tensor slice(int first, int count) const {
    Tensor out(count, c(), h(), w());
    std::copy_n(data_.begin() + first * sample_size(), count * sample_size(), out.data_.begin());
    return out;
  }

  void reshape(int n, int c, int h, int w) {
    if (static_cast<std::size_t>(n) * c * h * w != data_.size())
      throw InvalidInput("reshape changes element count");
    shape_ = {n, c, h, w};
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const noexcept { return shape_ == o.shape_; }

  std::string shape_string() const {
    return "(" + std::to_string(shape_[0]) + "," + std::to_string(shape_[1]) + "," +
           std::to_string(shape_[2]) + "," + std::to_string(shape_[3]) + ")";
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(n(), c(), h(), w());
    std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  Storage data_;
};

// Stacks equally-shaped tensors along the batch dimension.
template <typename T>
Tensor<T> concat(std::initializer_list<const Tensor<T>*> parts) {
  int total = 0;
  const Tensor<T>* first = *parts.begin();
  for (const auto* p : parts) {
    if (p->c() != first->c() || p->h() != first->h() || p->w() != first->w())
      throw InvalidInput("concat shape mismatch");
    total += p->n();
  }
  Tensor<T> out(total, first->c(), first->h(), first->w());
  T* dst = out.data();
  for (const auto* p : parts) dst = std::copy(p->data(), p->data() + p->size(), dst);
  return out;
}

template <typename T>
Tensor<T> stack(const std::vector<const Tensor<T>*>& samples) {
  if (samples.empty()) return {};
  const auto& f = *samples.front();
  Tensor<T> out(static_cast<int>(samples.size()), f.c(), f.h(), f.w());
  T* dst = out.data();
  for (const auto* s : samples) {
    if (s->sample_size() != f.sample_size()) throw InvalidInput("stack shape mismatch");
    dst = std::copy(s->data(), s->data() + s->sample_size(), dst);
  }
  return out;
}

template <typename T>
double mean_squared_difference(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw InvalidInput("shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return a.size() ? acc / static_cast<double>(a.size()) : 0.0;
}

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  const double mse = mean_squared_difference(a, b);
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

}  // namespace pose
