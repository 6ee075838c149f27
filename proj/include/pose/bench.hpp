#pragma once

// Synthetic open-set attribution benchmark. A "source model" is a trace
// stamp: a fixed, seeded, bounded convolutional network whose scaled output
// is added to procedurally generated base images. Seen/unseen splits follow
// the seed / architecture / dataset relationships of real generator zoos.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pose/error.hpp"
#include "pose/evalkit.hpp"
#include "pose/image_io.hpp"
#include "pose/models.hpp"
#include "pose/nn.hpp"
#include "pose/random.hpp"
#include "pose/tensor.hpp"

namespace pose::bench {

inline const std::vector<std::string>& domain_tags() {
  static const std::vector<std::string> tags{"fields", "shapes", "mosaic", "waves", "cells"};
  return tags;
}

inline const std::vector<std::string>& architecture_tags() {
  static const std::vector<std::string> tags{"conv2_k3", "conv1_k3", "conv3_k3", "conv2_k5", "up_down"};
  return tags;
}

inline void check_domain(const std::string& d) {
  const auto& t = domain_tags();
  if (std::find(t.begin(), t.end(), d) == t.end()) throw InvalidParameter("unknown domain tag '" + d + "'");
}

inline void check_architecture(const std::string& a) {
  const auto& t = architecture_tags();
  if (std::find(t.begin(), t.end(), a) == t.end()) throw InvalidParameter("unknown architecture tag '" + a + "'");
}

// ---------------------------------------------------------------------------
// Image helpers

// Separable Gaussian blur with reflected borders; sigma 0 is the identity.
template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma) {
  if (sigma < 0.0) throw InvalidParameter("blur sigma must be non-negative");
  if (sigma == 0.0) return img;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += (k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= sum;
  const int h = img.h(), w = img.w();
  auto reflect = [](int i, int n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  Tensor<T> tmp = Tensor<T>::like(img), out = Tensor<T>::like(img);
  for (int s = 0; s < img.n(); ++s)
    for (int c = 0; c < img.c(); ++c) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img.at(s, c, y, reflect(x + i, w));
          tmp.at(s, c, y, x) = static_cast<T>(acc);
        }
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.at(s, c, reflect(y + i, h), x);
          out.at(s, c, y, x) = static_cast<T>(acc);
        }
    }
  return out;
}

// Bilinear resampling of the square window [x0, x0+size) x [y0, y0+size)
// onto an out x out grid (pixel-centre alignment).
template <typename T>
Tensor<T> resample_window(const Tensor<T>& img, double x0, double y0, double size, int out) {
  Tensor<T> res(img.n(), img.c(), out, out);
  const double scale = size / out;
  const int h = img.h(), w = img.w();
  for (int s = 0; s < img.n(); ++s)
    for (int c = 0; c < img.c(); ++c)
      for (int y = 0; y < out; ++y)
        for (int x = 0; x < out; ++x) {
          const double sy = std::clamp(y0 + (y + 0.5) * scale - 0.5, 0.0, h - 1.0);
          const double sx = std::clamp(x0 + (x + 0.5) * scale - 0.5, 0.0, w - 1.0);
          const int iy = std::min(static_cast<int>(sy), h - 1), ix = std::min(static_cast<int>(sx), w - 1);
          const int jy = std::min(iy + 1, h - 1), jx = std::min(ix + 1, w - 1);
          const double fy = sy - iy, fx = sx - ix;
          const double v = (1 - fy) * ((1 - fx) * img.at(s, c, iy, ix) + fx * img.at(s, c, iy, jx)) +
                           fy * ((1 - fx) * img.at(s, c, jy, ix) + fx * img.at(s, c, jy, jx));
          res.at(s, c, y, x) = static_cast<T>(v);
        }
  return res;
}

namespace detail {

inline void normalize_range(Tensor<float>& img, float lo, float hi) {
  auto [mn, mx] = std::minmax_element(img.vec().begin(), img.vec().end());
  const float a = *mn, b = *mx;
  const float span = b - a > 1e-12f ? b - a : 1.0f;
  for (auto& v : img.vec()) v = lo + (hi - lo) * (v - a) / span;
}

inline std::array<double, 3> random_color(Rng& rng) {
  return {uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95), uniform(rng, 0.05, 0.95)};
}

inline Tensor<float> gen_fields(int s, Rng& rng) {
  Tensor<float> noise(1, 3, s, s);
  for (auto& v : noise.vec()) v = static_cast<float>(normal(rng));
  Tensor<float> smooth = gaussian_blur(noise, uniform(rng, 1.5, 4.0));
  Tensor<float> img(1, 3, s, s);
  double mix[3][3];
  for (auto& row : mix)
    for (double& m : row) m = uniform(rng, -1.0, 1.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double v = 0.0;
        for (int k = 0; k < 3; ++k) v += mix[c][k] * smooth.at(0, k, y, x);
        img.at(0, c, y, x) = static_cast<float>(v);
      }
  normalize_range(img, 0.1f, 0.9f);
  return img;
}

inline Tensor<float> gen_shapes(int s, Rng& rng) {
  Tensor<float> img(1, 3, s, s);
  const auto c0 = random_color(rng), c1 = random_color(rng);
  const double ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double dx = std::cos(ang), dy = std::sin(ang);
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double t = 0.5 + 0.5 * ((x - s / 2.0) * dx + (y - s / 2.0) * dy) / (s / 1.4);
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = static_cast<float>(c0[c] * (1 - t) + c1[c] * t);
    }
  const int count = 3 + static_cast<int>(uniform_index(rng, 4));
  for (int k = 0; k < count; ++k) {
    const auto col = random_color(rng);
    const double cx = uniform(rng, 0, s), cy = uniform(rng, 0, s);
    const double rx = uniform(rng, s / 10.0, s / 3.0), ry = uniform(rng, s / 10.0, s / 3.0);
    const bool ellipse = uniform01(rng) < 0.5;
    const double shade = uniform(rng, -0.3, 0.3);
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        const double u = (x - cx) / rx, v = (y - cy) / ry;
        const bool inside = ellipse ? (u * u + v * v <= 1.0) : (std::abs(u) <= 1.0 && std::abs(v) <= 1.0);
        if (!inside) continue;
        const double g = 1.0 + shade * v;
        for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = static_cast<float>(std::clamp(col[c] * g, 0.0, 1.0));
      }
  }
  return gaussian_blur(img, 1.2);
}

inline Tensor<float> gen_mosaic(int s, Rng& rng) {
  Tensor<float> img(1, 3, s, s);
  const int tiles = 4;
  const double tile = static_cast<double>(s) / tiles;
  for (int ty = 0; ty < tiles; ++ty)
    for (int tx = 0; tx < tiles; ++tx) {
      const auto col = random_color(rng);
      const double freq = uniform(rng, 0.15, 0.45);
      const double ang = uniform(rng, 0.0, std::numbers::pi);
      const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      const double amp = uniform(rng, 0.08, 0.2);
      const int y0 = static_cast<int>(ty * tile), y1 = static_cast<int>((ty + 1) * tile);
      const int x0 = static_cast<int>(tx * tile), x1 = static_cast<int>((tx + 1) * tile);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const double t =
              amp * std::sin(2.0 * std::numbers::pi * freq * (x * std::cos(ang) + y * std::sin(ang)) + phase);
          for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = static_cast<float>(std::clamp(col[c] + t, 0.0, 1.0));
        }
    }
  return img;
}

inline Tensor<float> gen_waves(int s, Rng& rng) {
  Tensor<float> img(1, 3, s, s);
  struct Wave {
    double fx, fy, phase;
    std::array<double, 3> w;
  };
  std::vector<Wave> waves;
  for (int k = 0; k < 3; ++k) {
    const double f = uniform(rng, 0.02, 0.1), ang = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    waves.push_back({f * std::cos(ang), f * std::sin(ang), uniform(rng, 0, 2 * std::numbers::pi),
                     {uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)}});
  }
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = 0.0;
        for (const auto& wv : waves)
          v += wv.w[c] * std::sin(2.0 * std::numbers::pi * (wv.fx * x + wv.fy * y) + wv.phase);
        img.at(0, c, y, x) = static_cast<float>(v);
      }
  normalize_range(img, 0.1f, 0.9f);
  return img;
}

inline Tensor<float> gen_cells(int s, Rng& rng) {
  Tensor<float> img(1, 3, s, s);
  const int count = 8 + static_cast<int>(uniform_index(rng, 9));
  std::vector<std::array<double, 2>> sites;
  std::vector<std::array<double, 3>> colors;
  for (int k = 0; k < count; ++k) {
    sites.push_back({uniform(rng, 0, s), uniform(rng, 0, s)});
    colors.push_back(random_color(rng));
  }
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      double d1 = 1e18, d2 = 1e18;
      int best = 0;
      for (int k = 0; k < count; ++k) {
        const double d = std::hypot(x - sites[k][0], y - sites[k][1]);
        if (d < d1) {
          d2 = d1;
          d1 = d;
          best = k;
        } else if (d < d2) {
          d2 = d;
        }
      }
      const double edge = std::clamp((d2 - d1) / 1.5, 0.0, 1.0);
      const double shade = 0.55 + 0.45 * edge;
      for (int c = 0; c < 3; ++c) img.at(0, c, y, x) = static_cast<float>(colors[best][c] * shade);
    }
  return img;
}

}  // namespace detail

// One base image; randomness is a pure function of the seed.
inline Tensor<float> synth_base_image(const std::string& domain, int size, std::uint64_t seed) {
  check_domain(domain);
  Rng rng(seed);
  if (domain == "fields") return detail::gen_fields(size, rng);
  if (domain == "shapes") return detail::gen_shapes(size, rng);
  if (domain == "mosaic") return detail::gen_mosaic(size, rng);
  if (domain == "waves") return detail::gen_waves(size, rng);
  return detail::gen_cells(size, rng);
}

inline std::uint64_t image_seed(std::uint64_t global_seed, const std::string& class_name, std::uint64_t index) {
  return hash_seed(global_seed, hash_string(class_name), index);
}

// count images of a domain, quantised to 8 bits as they would be stored.
inline Tensor<float> synth_base_corpus(const std::string& domain, int count, std::uint64_t seed, int size) {
  check_domain(domain);
  if (count < 1) throw InvalidParameter("corpus count must be >= 1");
  Tensor<float> out(count, 3, size, size);
  for (int i = 0; i < count; ++i) {
    const Tensor<float> img = io::quantize8(synth_base_image(domain, size, hash_seed(seed, hash_string(domain), i)));
    std::copy(img.data(), img.data() + img.size(), out.data() + i * out.sample_size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trace stamps

struct TraceStamp {
  std::uint64_t seed = 0;
  std::string architecture = "conv2_k3";
  double amplitude = 0.02;
  std::string base_domain = "fields";
};

// The fixed network g behind a stamp, output bounded in [-1, 1]. Like the
// last block of a generator, the first hidden activation is modulated by a
// periodic pattern (upsampling-style artifacts) that depends only on the
// architecture tag; the seed draws the bias-free conv weights, so the trace is
// a content-dependent residual. The tag also selects depth, kernel size and
// whether the block runs at half resolution.
class StampNetwork {
 public:
  static constexpr int kHidden = 16;
  static constexpr double kInputGain = 8.0;
  static constexpr double kModulationDepth = 0.5;

  explicit StampNetwork(const TraceStamp& stamp) : arch_(aug_arch_from_tag(stamp.architecture)) {
    check_architecture(stamp.architecture);
    std::uint64_t amp_bits;
    const double amp = stamp.amplitude;
    std::memcpy(&amp_bits, &amp, sizeof amp_bits);
    Rng rng(hash_seed(stamp.seed, hash_string(stamp.architecture), amp_bits));
    const bool single = arch_.variant == AugVariant::Plain && arch_.layers == 1;
    const int first_out = single ? 3 : kHidden;
    convs_.push_back(make_conv(3, first_out, rng, true));
    if (!single) {
      for (int l = 1; l + 1 < arch_.layers; ++l) convs_.push_back(make_conv(kHidden, kHidden, rng, false));
      convs_.push_back(make_conv(kHidden, 3, rng, false));
    }
    static constexpr double freqs[3] = {0.0, 0.25, 0.5};
    Rng grid(hash_seed(hash_string(stamp.architecture)));
    for (int c = 0; c < first_out; ++c) {
      Wave w;
      do {
        w.fy = freqs[uniform_index(grid, 3)];
        w.fx = freqs[uniform_index(grid, 3)];
      } while (w.fy == 0.0 && w.fx == 0.0);
      w.phase = uniform(grid, 0.0, 2.0 * std::numbers::pi);
      waves_.push_back(w);
    }
  }

  Tensor<float> operator()(const Tensor<float>& x) const {
    const bool down_up = arch_.variant == AugVariant::DownUp;
    const bool single = convs_.size() == 1;
    Tensor<float> h = down_up ? nn::AvgPool2<float>().forward(x) : x;
    h = convs_[0].forward(h);
    if (!single) h = tanh(std::move(h));
    if (down_up) h = nn::Upsample2<float>().forward(h);
    modulate(h);
    for (std::size_t l = 1; l < convs_.size(); ++l) h = tanh(convs_[l].forward(h));
    return single ? tanh(std::move(h)) : h;
  }

 private:
  struct Wave {
    double fy = 0.0, fx = 0.0, phase = 0.0;
  };

  nn::Conv2d<float> make_conv(int in, int out, Rng& rng, bool high_pass) const {
    const int k = arch_.kernel;
    nn::Conv2d<float> c(in, out, k, 1, k / 2);
    const double sd = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    for (auto& v : c.weight().value.vec()) v = static_cast<float>(normal(rng, 0.0, sd));
    if (high_pass && k > 1) {
      // zero-mean kernels respond to local structure, not brightness
      auto& w = c.weight().value;
      for (int o = 0; o < out; ++o)
        for (int i = 0; i < in; ++i) {
          const std::size_t base = static_cast<std::size_t>(o * in + i) * k * k;
          double mean = 0.0;
          for (int t = 0; t < k * k; ++t) mean += w[base + t];
          mean /= k * k;
          for (int t = 0; t < k * k; ++t) w[base + t] = static_cast<float>((w[base + t] - mean) * kInputGain);
        }
    }
    return c;
  }

  static Tensor<float> tanh(Tensor<float> h) {
    for (auto& v : h.vec()) v = std::tanh(v);
    return h;
  }

  void modulate(Tensor<float>& h) const {
    for (int i = 0; i < h.n(); ++i)
      for (int c = 0; c < h.c(); ++c) {
        const Wave& w = waves_[c];
        for (int y = 0; y < h.h(); ++y)
          for (int x = 0; x < h.w(); ++x)
            h.at(i, c, y, x) *= static_cast<float>(
                1.0 + kModulationDepth * std::cos(2.0 * std::numbers::pi * (w.fy * y + w.fx * x) + w.phase));
      }
  }

  AugArch arch_;
  std::vector<nn::Conv2d<float>> convs_;
  std::vector<Wave> waves_;
};

// clip(x + amplitude * g(x))
inline Tensor<float> apply_trace(const TraceStamp& stamp, const Tensor<float>& x) {
  if (stamp.amplitude == 0.0) return x;
  const StampNetwork g(stamp);
  Tensor<float> out = g(x);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::clamp(x[i] + static_cast<float>(stamp.amplitude) * out[i], 0.0f, 1.0f);
  return out;
}

// ---------------------------------------------------------------------------
// Benchmark layout and manifest

struct StampSpec {
  std::string name;
  TraceStamp stamp;
  eval::UnseenType type = eval::UnseenType::None;  // None for seen stamps
};

struct BenchSpec {
  std::uint64_t global_seed = 7;
  int input_size = 32;
  int train_per_class = 200;
  int test_per_class = 100;
  double amplitude = 0.02;
  std::vector<std::string> real_domains{"fields", "shapes"};
  std::vector<std::string> unseen_real_domains{"cells"};
  std::vector<StampSpec> seen;
  std::vector<StampSpec> unseen;

  int num_known() const { return 1 + static_cast<int>(seen.size()); }
};

// K = 5 (real + 4 seen stamps), 4 unseen stamps of each type.
inline BenchSpec default_bench_spec() {
  using eval::UnseenType;
  BenchSpec s;
  auto st = [&](const std::string& name, std::uint64_t seed, const std::string& arch, const std::string& dom,
                UnseenType t) { return StampSpec{name, TraceStamp{seed, arch, s.amplitude, dom}, t}; };
  s.seen = {st("fake_a", 101, "conv2_k3", "fields", UnseenType::None),
            st("fake_b", 102, "conv1_k3", "fields", UnseenType::None),
            st("fake_c", 103, "conv2_k3", "shapes", UnseenType::None),
            st("fake_d", 104, "conv2_k5", "shapes", UnseenType::None)};
  s.unseen = {st("unseen_seed_a", 201, "conv2_k3", "fields", UnseenType::Seed),
              st("unseen_seed_b", 202, "conv1_k3", "fields", UnseenType::Seed),
              st("unseen_seed_c", 203, "conv2_k3", "shapes", UnseenType::Seed),
              st("unseen_seed_d", 204, "conv2_k5", "shapes", UnseenType::Seed),
              st("unseen_arch_a", 301, "conv3_k3", "fields", UnseenType::Architecture),
              st("unseen_arch_b", 302, "up_down", "fields", UnseenType::Architecture),
              st("unseen_arch_c", 303, "conv3_k3", "shapes", UnseenType::Architecture),
              st("unseen_arch_d", 304, "up_down", "shapes", UnseenType::Architecture),
              st("unseen_data_a", 101, "conv2_k3", "shapes", UnseenType::Dataset),
              st("unseen_data_b", 102, "conv1_k3", "shapes", UnseenType::Dataset),
              st("unseen_data_c", 103, "conv2_k3", "fields", UnseenType::Dataset),
              st("unseen_data_d", 104, "conv2_k5", "fields", UnseenType::Dataset)};
  return s;
}

inline void validate(const BenchSpec& s) {
  if (s.input_size < 4 || s.input_size % 2) throw InvalidSpec("input_size must be even and >= 4");
  if (s.train_per_class < 1 || s.test_per_class < 1) throw InvalidSpec("per-class counts must be positive");
  if (s.real_domains.empty()) throw InvalidSpec("need at least one real domain");
  if (s.seen.empty()) throw InvalidSpec("need at least one seen stamp");
  std::set<std::string> names{"real", "real_unseen"};
  auto check_stamp = [&](const StampSpec& st) {
    if (st.name.empty() || !names.insert(st.name).second) throw InvalidSpec("duplicate or empty class name '" + st.name + "'");
    try {
      check_domain(st.stamp.base_domain);
      check_architecture(st.stamp.architecture);
    } catch (const InvalidParameter& e) {
      throw InvalidSpec(st.name + ": " + e.what());
    }
    if (!(st.stamp.amplitude >= 0.0)) throw InvalidSpec(st.name + ": amplitude must be non-negative");
  };
  for (const auto& d : s.real_domains) check_domain(d);
  for (const auto& d : s.unseen_real_domains) check_domain(d);
  for (const auto& st : s.seen) {
    check_stamp(st);
    if (st.type != eval::UnseenType::None) throw InvalidSpec(st.name + ": seen stamps have no unseen type");
    if (std::find(s.real_domains.begin(), s.real_domains.end(), st.stamp.base_domain) == s.real_domains.end())
      throw InvalidSpec(st.name + ": seen stamps must use a real domain");
  }
  for (const auto& u : s.unseen) {
    check_stamp(u);
    const auto& us = u.stamp;
    bool ok = false;
    switch (u.type) {
      case eval::UnseenType::Seed:
        for (const auto& sv : s.seen) {
          if (sv.stamp.architecture == us.architecture && sv.stamp.base_domain == us.base_domain) {
            if (sv.stamp.seed == us.seed) throw InvalidSpec(u.name + ": duplicates seen stamp " + sv.name);
            ok = true;
          }
        }
        break;
      case eval::UnseenType::Architecture:
        for (const auto& sv : s.seen) {
          if (sv.stamp.base_domain != us.base_domain) continue;
          if (sv.stamp.architecture == us.architecture)
            throw InvalidSpec(u.name + ": shares architecture and domain with seen stamp " + sv.name);
          ok = true;
        }
        break;
      case eval::UnseenType::Dataset:
        for (const auto& sv : s.seen)
          if (sv.stamp.seed == us.seed && sv.stamp.architecture == us.architecture &&
              sv.stamp.base_domain != us.base_domain)
            ok = true;
        break;
      case eval::UnseenType::None:
        throw InvalidSpec(u.name + ": unseen stamps need an unseen type");
    }
    if (!ok) throw InvalidSpec(u.name + ": violates the sharing constraint for type " + eval::to_string(u.type));
  }
}

struct ManifestRecord {
  std::string image_path;  // relative to the manifest directory
  std::string class_name;
  int known_class_id = -1;
  std::string split;     // train | test
  std::string openness;  // seen | unseen
  eval::UnseenType unseen_type = eval::UnseenType::None;

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct BenchmarkManifest {
  std::vector<ManifestRecord> records;
  std::uint64_t global_seed = 0;
  int num_known = 0;
  int input_size = 0;
  std::vector<std::string> known_class_names;
  std::string checksum;
};

inline nlohmann::json to_json(const ManifestRecord& r) {
  nlohmann::ordered_json j;
  j["image_path"] = r.image_path;
  j["class_name"] = r.class_name;
  j["known_class_id"] = r.known_class_id;
  j["split"] = r.split;
  j["openness"] = r.openness;
  j["unseen_type"] = eval::to_string(r.unseen_type);
  return j;
}

inline ManifestRecord record_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys{"image_path", "class_name", "known_class_id", "split", "openness", "unseen_type"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!keys.count(it.key())) throw DatasetError("unexpected manifest field '" + it.key() + "'");
  ManifestRecord r;
  try {
    r.image_path = j.at("image_path").get<std::string>();
    r.class_name = j.at("class_name").get<std::string>();
    r.known_class_id = j.at("known_class_id").get<int>();
    r.split = j.at("split").get<std::string>();
    r.openness = j.at("openness").get<std::string>();
    r.unseen_type = eval::unseen_type_from_string(j.at("unseen_type").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw DatasetError(std::string("malformed manifest record: ") + e.what());
  }
  return r;
}

// Invariants every manifest must satisfy.
inline void check_manifest(const BenchmarkManifest& m) {
  if (m.known_class_names.empty() || m.known_class_names.front() != "real")
    throw DatasetError("class 0 must be the real class");
  for (const auto& r : m.records) {
    if (r.split != "train" && r.split != "test") throw DatasetError("bad split '" + r.split + "'");
    if (r.openness != "seen" && r.openness != "unseen") throw DatasetError("bad openness '" + r.openness + "'");
    if (r.openness == "unseen" && (r.unseen_type == eval::UnseenType::None || r.known_class_id != -1))
      throw DatasetError(r.image_path + ": unseen records need an unseen type and class id -1");
    if (r.openness == "seen" && (r.known_class_id < 0 || r.known_class_id >= m.num_known))
      throw DatasetError(r.image_path + ": seen records need a known class id");
    if (r.split == "train" && r.openness != "seen") throw DatasetError(r.image_path + ": unseen image in train split");
  }
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

// FNV-1a over manifest lines and every image's bytes in record order.
inline std::string manifest_checksum(const std::filesystem::path& manifest_path) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(p[i]);
      h *= 0x100000001b3ULL;
    }
  };
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open " + manifest_path.string());
  std::string line;
  const auto dir = manifest_path.parent_path();
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    feed(line.data(), line.size());
    const auto rec = record_from_json(nlohmann::json::parse(line));
    std::ifstream img(dir / rec.image_path, std::ios::binary);
    if (!img) throw IoError("missing image " + (dir / rec.image_path).string());
    std::string bytes((std::istreambuf_iterator<char>(img)), std::istreambuf_iterator<char>());
    feed(bytes.data(), bytes.size());
  }
  return hex64(h);
}

inline std::filesystem::path meta_path(const std::filesystem::path& manifest_path) {
  auto p = manifest_path;
  p.replace_extension(".meta.json");
  return p;
}

inline BenchmarkManifest load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw IoError("cannot open manifest " + manifest_path.string());
  BenchmarkManifest m;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    try {
      m.records.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DatasetError(std::string("manifest line is not JSON: ") + e.what());
    }
  }
  std::ifstream ms(meta_path(manifest_path));
  if (!ms) throw IoError("missing manifest metadata " + meta_path(manifest_path).string());
  const auto meta = nlohmann::json::parse(ms);
  m.global_seed = meta.at("global_seed").get<std::uint64_t>();
  m.num_known = meta.at("K").get<int>();
  m.input_size = meta.at("input_size").get<int>();
  m.known_class_names = meta.at("known_class_names").get<std::vector<std::string>>();
  m.checksum = meta.value("checksum", "");
  check_manifest(m);
  return m;
}

// Base + stamp for image `index` of a class.
inline Tensor<float> make_class_image(const std::string& class_name, const std::string& domain,
                                      const TraceStamp* stamp, std::uint64_t global_seed, int index, int size) {
  Tensor<float> base = io::quantize8(synth_base_image(domain, size, image_seed(global_seed, class_name, index)));
  if (!stamp) return base;
  return apply_trace(*stamp, base);
}

// Writes images/<class>/<split>_<index>.ppm and manifest.jsonl (+ metadata)
// under out_dir. Returns the manifest.
inline BenchmarkManifest build_benchmark(const BenchSpec& spec, const std::filesystem::path& out_dir) {
  validate(spec);
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());

  BenchmarkManifest m;
  m.global_seed = spec.global_seed;
  m.num_known = spec.num_known();
  m.input_size = spec.input_size;
  m.known_class_names.push_back("real");
  for (const auto& s : spec.seen) m.known_class_names.push_back(s.name);

  auto emit = [&](const std::string& cls, const std::string& domain, const TraceStamp* stamp, int index,
                  const std::string& split, int known_id, const std::string& openness, eval::UnseenType type) {
    const fs::path rel = fs::path("images") / cls / (split + "_" + std::to_string(index) + ".ppm");
    fs::create_directories(out_dir / rel.parent_path());
    io::write_ppm(out_dir / rel, make_class_image(cls, domain, stamp, spec.global_seed, index, spec.input_size));
    m.records.push_back({rel.generic_string(), cls, known_id, split, openness, type});
  };

  const int total = spec.train_per_class + spec.test_per_class;
  for (int i = 0; i < total; ++i) {
    const std::string split = i < spec.train_per_class ? "train" : "test";
    emit("real", spec.real_domains[i % spec.real_domains.size()], nullptr, i, split, 0, "seen", eval::UnseenType::None);
  }
  for (std::size_t k = 0; k < spec.seen.size(); ++k)
    for (int i = 0; i < total; ++i) {
      const std::string split = i < spec.train_per_class ? "train" : "test";
      emit(spec.seen[k].name, spec.seen[k].stamp.base_domain, &spec.seen[k].stamp, i, split, static_cast<int>(k) + 1,
           "seen", eval::UnseenType::None);
    }
  if (!spec.unseen_real_domains.empty())
    for (int i = 0; i < spec.test_per_class; ++i)
      emit("real_unseen", spec.unseen_real_domains[i % spec.unseen_real_domains.size()], nullptr, i, "test", 0, "seen",
           eval::UnseenType::None);
  for (const auto& u : spec.unseen)
    for (int i = 0; i < spec.test_per_class; ++i)
      emit(u.name, u.stamp.base_domain, &u.stamp, i, "test", -1, "unseen", u.type);

  check_manifest(m);
  const fs::path manifest_path = out_dir / "manifest.jsonl";
  {
    std::ofstream os(manifest_path);
    if (!os) throw IoError("cannot write " + manifest_path.string());
    for (const auto& r : m.records) os << to_json(r).dump() << '\n';
  }
  m.checksum = manifest_checksum(manifest_path);
  nlohmann::ordered_json meta;
  meta["global_seed"] = m.global_seed;
  meta["K"] = m.num_known;
  meta["input_size"] = m.input_size;
  meta["known_class_names"] = m.known_class_names;
  meta["checksum"] = m.checksum;
  std::ofstream(meta_path(manifest_path)) << meta.dump(2) << '\n';
  return m;
}

// Record groups for summaries: seen real, seen fake, unseen real, unseen fake.
inline std::map<std::string, std::map<std::string, std::size_t>> summarize(const BenchmarkManifest& m) {
  std::map<std::string, std::map<std::string, std::size_t>> out;
  for (const auto& r : m.records) {
    std::string group;
    if (r.openness == "unseen") group = "unseen_fake";
    else if (r.class_name == "real") group = "seen_real";
    else if (r.class_name == "real_unseen") group = "unseen_real";
    else group = "seen_fake";
    ++out[group][r.split];
    if (r.unseen_type != eval::UnseenType::None) ++out["unseen_" + eval::to_string(r.unseen_type)][r.split];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loading

struct LabeledImages {
  Tensor<float> images;
  std::vector<int> labels;  // known class or -1
  std::vector<eval::UnseenType> types;
  std::vector<std::string> class_names;
};

inline LabeledImages load_split(const BenchmarkManifest& m, const std::filesystem::path& manifest_dir,
                                const std::string& split) {
  std::vector<const ManifestRecord*> recs;
  for (const auto& r : m.records)
    if (r.split == split) recs.push_back(&r);
  LabeledImages out;
  if (recs.empty()) return out;
  out.images = Tensor<float>(static_cast<int>(recs.size()), 3, m.input_size, m.input_size);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const Tensor<float> img = io::read_ppm<float>(manifest_dir / recs[i]->image_path);
    if (img.h() != m.input_size || img.w() != m.input_size)
      throw DatasetError(recs[i]->image_path + " does not match the configured input size");
    std::copy(img.data(), img.data() + img.size(), out.images.data() + i * out.images.sample_size());
    out.labels.push_back(recs[i]->known_class_id);
    out.types.push_back(recs[i]->unseen_type);
    out.class_names.push_back(recs[i]->class_name);
  }
  return out;
}

// Every *.ppm under dir (sorted by name) as one batch.
inline Tensor<float> load_image_folder(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError(dir.string() + " is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .ppm images in " + dir.string());
  const Tensor<float> first = io::read_ppm<float>(files.front());
  Tensor<float> out(static_cast<int>(files.size()), 3, first.h(), first.w());
  for (std::size_t i = 0; i < files.size(); ++i) {
    const Tensor<float> img = i == 0 ? first : io::read_ppm<float>(files[i]);
    if (!img.same_shape(first)) throw InvalidInput("images in " + dir.string() + " differ in size");
    std::copy(img.data(), img.data() + img.size(), out.data() + i * out.sample_size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Perturbations. Strength 0 is the identity for every kind:
//   blur         gaussian sigma in pixels, [0, 5]
//   jpeg         100 - quality, [0, 99] (0 skips compression)
//   lighting     brightness gain delta, x * (1 + delta), [-0.9, 1]
//   noise        additive gaussian sigma, [0, 0.5]
//   crop_resize  1 - centre crop fraction, [0, 0.9], resized back

enum class PerturbKind { Blur, Jpeg, Lighting, Noise, CropResize };

inline PerturbKind perturb_kind_from_string(const std::string& s) {
  if (s == "blur") return PerturbKind::Blur;
  if (s == "jpeg") return PerturbKind::Jpeg;
  if (s == "lighting") return PerturbKind::Lighting;
  if (s == "noise") return PerturbKind::Noise;
  if (s == "crop_resize") return PerturbKind::CropResize;
  throw InvalidParameter("unknown perturbation kind '" + s + "'");
}

inline std::pair<double, double> strength_range(PerturbKind k) {
  switch (k) {
    case PerturbKind::Blur: return {0.0, 5.0};
    case PerturbKind::Jpeg: return {0.0, 99.0};
    case PerturbKind::Lighting: return {-0.9, 1.0};
    case PerturbKind::Noise: return {0.0, 0.5};
    case PerturbKind::CropResize: return {0.0, 0.9};
  }
  return {0.0, 0.0};
}

// Applies to every sample of the batch; output clipped to [0, 1].
inline Tensor<float> perturb(const Tensor<float>& x, PerturbKind kind, double strength, std::uint64_t seed = 0) {
  const auto [lo, hi] = strength_range(kind);
  if (!(strength >= lo && strength <= hi)) throw InvalidParameter("perturbation strength out of range");
  if (strength == 0.0) return x;
  Tensor<float> out;
  switch (kind) {
    case PerturbKind::Blur:
      out = gaussian_blur(x, strength);
      break;
    case PerturbKind::Jpeg: {
      out = Tensor<float>::like(x);
      const int quality = static_cast<int>(std::lround(100.0 - strength));
      for (int i = 0; i < x.n(); ++i) {
        const Tensor<float> r = io::jpeg_roundtrip(x.slice(i, 1), quality);
        std::copy(r.data(), r.data() + r.size(), out.data() + i * out.sample_size());
      }
      break;
    }
    case PerturbKind::Lighting:
      out = x;
      for (auto& v : out.vec()) v = static_cast<float>(v * (1.0 + strength));
      break;
    case PerturbKind::Noise: {
      out = x;
      Rng rng(seed);
      for (auto& v : out.vec()) v = static_cast<float>(v + normal(rng, 0.0, strength));
      break;
    }
    case PerturbKind::CropResize: {
      const double size = x.h() * (1.0 - strength);
      const double off = (x.h() - size) / 2.0;
      out = resample_window(x, off, off, size, x.h());
      break;
    }
  }
  return clamp01(std::move(out));
}

}  // namespace pose::bench
