#pragma once

// Frequency-domain analysis: centred 2D power spectra, radially binned
// (azimuthal) profiles of them, and the orthonormal DCT used as the task
// model's front end.

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <numbers>
#include <ostream>
#include <vector>

#include "pose/error.hpp"
#include "pose/tensor.hpp"

namespace pose::spectrum {

using Grid = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ComplexGrid = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;
inline constexpr double kDefaultDctEps = 1e-12;

struct SpectrumProfile {
  std::vector<double> values;
  bool normalized = false;

  std::size_t size() const noexcept { return values.size(); }
};

struct FrequencyFeatureMap {
  Tensor<double> coefficients;
  double scale = kDefaultDctEps;
};

namespace detail {

inline void require_square_finite(const Grid& g) {
  if (g.rows() != g.cols()) throw InvalidInput("grid must be square");
  if (g.rows() < 2) throw InvalidInput("grid side must be >= 2");
  if (!g.allFinite()) throw InvalidInput("grid has non-finite entries");
}

// Unnormalised forward 2D DFT of a complex grid.
inline ComplexGrid dft2(const ComplexGrid& in) {
  Eigen::FFT<double> fft;
  const Eigen::Index rows = in.rows(), cols = in.cols();
  ComplexGrid tmp(rows, cols);
  std::vector<std::complex<double>> src, dst;
  src.resize(static_cast<std::size_t>(cols));
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) src[c] = in(r, c);
    fft.fwd(dst, src);
    for (Eigen::Index c = 0; c < cols; ++c) tmp(r, c) = dst[c];
  }
  ComplexGrid out(rows, cols);
  src.resize(static_cast<std::size_t>(rows));
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) src[r] = tmp(r, c);
    fft.fwd(dst, src);
    for (Eigen::Index r = 0; r < rows; ++r) out(r, c) = dst[r];
  }
  return out;
}

// Index where frequency k lands after moving DC to the centre.
inline Eigen::Index shifted(Eigen::Index k, Eigen::Index n) { return (k + n / 2) % n; }

}  // namespace detail

// Rec.601 luminance of a 3-channel image (single sample); single-channel
// images are returned as is.
template <typename T>
Grid luminance(const Tensor<T>& image, int sample = 0) {
  const int h = image.h(), w = image.w();
  Grid g(h, w);
  if (image.c() == 1) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) g(y, x) = static_cast<double>(image.at(sample, 0, y, x));
    return g;
  }
  if (image.c() != 3) throw InvalidInput("luminance expects 1 or 3 channels");
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      g(y, x) = kLumaR * image.at(sample, 0, y, x) + kLumaG * image.at(sample, 1, y, x) +
                kLumaB * image.at(sample, 2, y, x);
  return g;
}

// |DFT|^2 with the zero frequency moved to (N/2, N/2).
inline Grid power_spectrum_2d(const Grid& image) {
  detail::require_square_finite(image);
  const Eigen::Index n = image.rows();
  const ComplexGrid spec = detail::dft2(image.cast<std::complex<double>>());
  Grid out(n, n);
  for (Eigen::Index u = 0; u < n; ++u)
    for (Eigen::Index v = 0; v < n; ++v)
      out(detail::shifted(u, n), detail::shifted(v, n)) = std::norm(spec(u, v));
  return out;
}

// Gradient of a scalar loss through power_spectrum_2d: given dL/dP (in the
// centred layout), returns dL/dimage = 2 Re(DFT(g . conj(X))).
inline Grid power_spectrum_2d_backward(const Grid& image, const Grid& grad_power) {
  detail::require_square_finite(image);
  const Eigen::Index n = image.rows();
  if (grad_power.rows() != n || grad_power.cols() != n) throw InvalidInput("gradient grid size mismatch");
  const ComplexGrid spec = detail::dft2(image.cast<std::complex<double>>());
  ComplexGrid weighted(n, n);
  for (Eigen::Index u = 0; u < n; ++u)
    for (Eigen::Index v = 0; v < n; ++v)
      weighted(u, v) = grad_power(detail::shifted(u, n), detail::shifted(v, n)) * std::conj(spec(u, v));
  const ComplexGrid back = detail::dft2(weighted);
  return 2.0 * back.real();
}

// Radius bin of every pixel for an N x N centred grid; -1 marks discarded
// corner pixels whose radius is >= floor(N/2).
inline std::vector<int> radius_bins(Eigen::Index n) {
  const Eigen::Index centre = n / 2;
  const int nbins = static_cast<int>(n / 2);
  std::vector<int> bins(static_cast<std::size_t>(n * n));
  for (Eigen::Index u = 0; u < n; ++u) {
    for (Eigen::Index v = 0; v < n; ++v) {
      const double du = static_cast<double>(u - centre), dv = static_cast<double>(v - centre);
      const int r = static_cast<int>(std::round(std::sqrt(du * du + dv * dv)));
      bins[static_cast<std::size_t>(u * n + v)] = r < nbins ? r : -1;
    }
  }
  return bins;
}

inline SpectrumProfile azimuthal_integration(const Grid& power, bool normalize) {
  if (power.rows() != power.cols() || power.rows() < 2) throw InvalidInput("power grid must be square, N >= 2");
  const Eigen::Index n = power.rows();
  const auto bins = radius_bins(n);
  const std::size_t nbins = static_cast<std::size_t>(n / 2);
  std::vector<double> sum(nbins, 0.0);
  std::vector<std::size_t> count(nbins, 0);
  for (Eigen::Index u = 0; u < n; ++u) {
    for (Eigen::Index v = 0; v < n; ++v) {
      const double p = power(u, v);
      if (!(p >= 0.0)) throw InvalidInput("power entries must be non-negative and finite");
      const int b = bins[static_cast<std::size_t>(u * n + v)];
      if (b < 0) continue;
      sum[b] += p;
      ++count[b];
    }
  }
  SpectrumProfile prof;
  prof.values.resize(nbins);
  for (std::size_t b = 0; b < nbins; ++b) prof.values[b] = sum[b] / static_cast<double>(count[b]);
  if (normalize) {
    if (prof.values[0] == 0.0) throw DegenerateSpectrum("DC bin is zero, cannot normalise");
    const double dc = prof.values[0];
    for (double& v : prof.values) v /= dc;
    prof.values[0] = 1.0;
    prof.normalized = true;
  }
  return prof;
}

// dL/dpower for an unnormalised profile, given dL/dprofile.
inline Grid azimuthal_integration_backward(Eigen::Index n, const std::vector<double>& grad_profile) {
  const auto bins = radius_bins(n);
  std::vector<std::size_t> count(static_cast<std::size_t>(n / 2), 0);
  for (int b : bins)
    if (b >= 0) ++count[b];
  Grid g = Grid::Zero(n, n);
  for (Eigen::Index i = 0; i < n * n; ++i) {
    const int b = bins[static_cast<std::size_t>(i)];
    if (b >= 0) g(i / n, i % n) = grad_profile[b] / static_cast<double>(count[b]);
  }
  return g;
}

// Profile of a (possibly multi-channel) image via its luminance.
template <typename T>
SpectrumProfile image_profile(const Tensor<T>& image, bool normalize, int sample = 0) {
  return azimuthal_integration(power_spectrum_2d(luminance(image, sample)), normalize);
}

// Mean profile over all samples in a batch.
template <typename T>
SpectrumProfile mean_profile(const Tensor<T>& batch, bool normalize) {
  SpectrumProfile acc;
  for (int i = 0; i < batch.n(); ++i) {
    auto p = image_profile(batch, false, i);
    if (acc.values.empty()) acc.values.assign(p.size(), 0.0);
    for (std::size_t b = 0; b < p.size(); ++b) acc.values[b] += p.values[b] / batch.n();
  }
  if (normalize) {
    if (acc.values.empty() || acc.values[0] == 0.0) throw DegenerateSpectrum("DC bin is zero, cannot normalise");
    const double dc = acc.values[0];
    for (double& v : acc.values) v /= dc;
    acc.values[0] = 1.0;
    acc.normalized = true;
  }
  return acc;
}

inline double profile_distance(const SpectrumProfile& a, const SpectrumProfile& b) {
  if (a.size() != b.size()) throw InvalidInput("profile length mismatch");
  if (a.normalized != b.normalized) throw InvalidInput("profile normalisation flags differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

inline void write_profile_csv(std::ostream& os, const SpectrumProfile& p) {
  os << "index,value\n";
  os.precision(17);
  for (std::size_t i = 0; i < p.size(); ++i) os << i << ',' << p.values[i] << '\n';
}

// ---------------------------------------------------------------------------
// DCT

// Orthonormal DCT-II basis, row k = frequency.
inline Grid dct_matrix(Eigen::Index n) {
  Grid m(n, n);
  const double a0 = std::sqrt(1.0 / static_cast<double>(n));
  const double ak = std::sqrt(2.0 / static_cast<double>(n));
  for (Eigen::Index k = 0; k < n; ++k)
    for (Eigen::Index i = 0; i < n; ++i)
      m(k, i) = (k == 0 ? a0 : ak) *
                std::cos(std::numbers::pi * (2.0 * static_cast<double>(i) + 1.0) * static_cast<double>(k) /
                         (2.0 * static_cast<double>(n)));
  return m;
}

inline Grid dct2(const Grid& x) {
  const Grid ch = dct_matrix(x.rows());
  const Grid cw = dct_matrix(x.cols());
  return ch * x * cw.transpose();
}

inline Grid idct2(const Grid& y) {
  const Grid ch = dct_matrix(y.rows());
  const Grid cw = dct_matrix(y.cols());
  return ch.transpose() * y * cw;
}

// Per-channel orthonormal DCT-II, no log step.
template <typename T>
Tensor<double> dct_channels(const Tensor<T>& image) {
  Tensor<double> out(image.n(), image.c(), image.h(), image.w());
  const Grid ch = dct_matrix(image.h());
  const Grid cw = dct_matrix(image.w());
  Grid g(image.h(), image.w());
  for (int i = 0; i < image.n(); ++i) {
    for (int c = 0; c < image.c(); ++c) {
      for (int y = 0; y < image.h(); ++y)
        for (int x = 0; x < image.w(); ++x) g(y, x) = static_cast<double>(image.at(i, c, y, x));
      const Grid r = ch * g * cw.transpose();
      for (int y = 0; y < image.h(); ++y)
        for (int x = 0; x < image.w(); ++x) out.at(i, c, y, x) = r(y, x);
    }
  }
  return out;
}

inline Tensor<double> idct_channels(const Tensor<double>& coeffs) {
  Tensor<double> out = Tensor<double>::like(coeffs);
  const Grid ch = dct_matrix(coeffs.h());
  const Grid cw = dct_matrix(coeffs.w());
  Grid g(coeffs.h(), coeffs.w());
  for (int i = 0; i < coeffs.n(); ++i) {
    for (int c = 0; c < coeffs.c(); ++c) {
      for (int y = 0; y < coeffs.h(); ++y)
        for (int x = 0; x < coeffs.w(); ++x) g(y, x) = coeffs.at(i, c, y, x);
      const Grid r = ch.transpose() * g * cw;
      for (int y = 0; y < coeffs.h(); ++y)
        for (int x = 0; x < coeffs.w(); ++x) out.at(i, c, y, x) = r(y, x);
    }
  }
  return out;
}

template <typename T>
FrequencyFeatureMap dct_feature_transform(const Tensor<T>& image, double eps = kDefaultDctEps) {
  if (!(eps > 0.0)) throw InvalidParameter("dct eps must be positive");
  FrequencyFeatureMap fm;
  fm.scale = eps;
  fm.coefficients = dct_channels(image);
  for (double& v : fm.coefficients.vec()) v = std::log(std::abs(v) + eps);
  return fm;
}

}  // namespace pose::spectrum
