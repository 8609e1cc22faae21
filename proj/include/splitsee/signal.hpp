#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitsee/rng.hpp"

namespace splitsee {

inline constexpr std::size_t kMinWindowLength = 16;

/// One fixed-length single-channel window.
struct SignalWindow {
  std::vector<double> values;
  double sampling_rate_hz = 1.0;
  std::uint32_t channel_id = 0;
  std::optional<int> label;

  std::size_t length() const { return values.size(); }
};

struct AugmentConfig {
  double alpha_min = 0.9;
  double alpha_max = 1.1;
  double noise_sigma_weak = 0.0;
  double noise_sigma_strong = 0.0;
  int cut_min = 4;
  int cut_max = 11;
  std::uint64_t rng_seed = 0;

  void validate_scales() const {
    if (!(alpha_min > 0.0) || !(alpha_max >= alpha_min) || !std::isfinite(alpha_max)) {
      throw std::invalid_argument("augment: alpha range must lie in (0, inf) with min <= max");
    }
    if (!(noise_sigma_weak >= 0.0) || !(noise_sigma_strong >= 0.0)) {
      throw std::invalid_argument("augment: noise scales must be nonnegative");
    }
  }

  void validate(std::size_t length) const {
    validate_scales();
    if (cut_min < 1 || cut_min > cut_max) {
      throw std::invalid_argument("augment: need 1 <= cut_min <= cut_max");
    }
    if (static_cast<std::size_t>(cut_max) + 1 > length) {
      throw std::invalid_argument("augment: window length " + std::to_string(length) +
                                  " cannot hold " + std::to_string(cut_max) + " distinct cut points");
    }
  }
};

/// Magnitudes of the first half of the DFT bins, DC included.
struct Spectrum {
  std::vector<double> magnitudes;
};

inline void require_finite(std::span<const double> x, const char* what) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) {
      throw std::invalid_argument(std::string(what) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

inline void validate(const SignalWindow& w, std::optional<int> num_classes = std::nullopt) {
  if (w.values.size() < kMinWindowLength) {
    throw std::invalid_argument("window length " + std::to_string(w.values.size()) + " is below the minimum of " +
                                std::to_string(kMinWindowLength));
  }
  if (!(w.sampling_rate_hz > 0.0)) {
    throw std::invalid_argument("sampling rate must be positive");
  }
  require_finite(w.values, "window");
  if (w.label && (*w.label < 0 || (num_classes && *w.label >= *num_classes))) {
    throw std::invalid_argument("window label " + std::to_string(*w.label) + " out of range");
  }
}

inline double mean_of(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) {
    s += v;
  }
  return x.empty() ? 0.0 : s / static_cast<double>(x.size());
}

/// Population standard deviation.
inline double stddev_of(std::span<const double> x) {
  const double m = mean_of(x);
  double s = 0.0;
  for (double v : x) {
    s += (v - m) * (v - m);
  }
  return x.empty() ? 0.0 : std::sqrt(s / static_cast<double>(x.size()));
}

/// alpha * (x + eps_w), alpha ~ U[alpha_min, alpha_max], eps_w ~ N(0, sigma_weak^2).
inline std::vector<double> weak_augment(std::span<const double> x, const AugmentConfig& cfg,
                                        std::uint64_t stream_id) {
  require_finite(x, "weak_augment");
  cfg.validate_scales();
  Philox rng(cfg.rng_seed, stream_id);
  const double alpha = rng.uniform(cfg.alpha_min, cfg.alpha_max);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = alpha * (x[i] + cfg.noise_sigma_weak * rng.normal());
  }
  return out;
}

inline std::vector<double> weak_augment(const SignalWindow& w, const AugmentConfig& cfg, std::uint64_t stream_id) {
  return weak_augment(std::span<const double>(w.values), cfg, stream_id);
}

/// Split `x` before each index in `cuts` (sorted, distinct, in 1..L-1) and
/// concatenate the segments in the order given by `order`.
inline std::vector<double> permute_segments(std::span<const double> x, std::span<const std::size_t> cuts,
                                            std::span<const std::size_t> order) {
  std::vector<std::size_t> bounds;
  bounds.reserve(cuts.size() + 2);
  bounds.push_back(0);
  for (std::size_t c : cuts) {
    if (c <= bounds.back() || c >= x.size()) {
      throw std::invalid_argument("permute_segments: cut points must be increasing and inside the window");
    }
    bounds.push_back(c);
  }
  bounds.push_back(x.size());
  const std::size_t segments = bounds.size() - 1;
  if (order.size() != segments) {
    throw std::invalid_argument("permute_segments: permutation size " + std::to_string(order.size()) +
                                " does not match " + std::to_string(segments) + " segments");
  }
  std::vector<bool> seen(segments, false);
  std::vector<double> out;
  out.reserve(x.size());
  for (std::size_t s : order) {
    if (s >= segments || seen[s]) {
      throw std::invalid_argument("permute_segments: order is not a permutation");
    }
    seen[s] = true;
    out.insert(out.end(), x.begin() + static_cast<std::ptrdiff_t>(bounds[s]),
               x.begin() + static_cast<std::ptrdiff_t>(bounds[s + 1]));
  }
  return out;
}

/// Segment permutation plus Gaussian noise. The number of cuts is uniform on
/// [cut_min, cut_max]; cut positions are drawn without replacement from 1..L-1.
inline std::vector<double> strong_augment(std::span<const double> x, const AugmentConfig& cfg,
                                          std::uint64_t stream_id) {
  require_finite(x, "strong_augment");
  if (x.size() <= static_cast<std::size_t>(cfg.cut_max)) {
    throw std::invalid_argument("strong_augment: window length " + std::to_string(x.size()) +
                                " must exceed cut_max " + std::to_string(cfg.cut_max));
  }
  cfg.validate(x.size());
  Philox rng(cfg.rng_seed, stream_id);
  const auto span_width = static_cast<std::uint64_t>(cfg.cut_max - cfg.cut_min + 1);
  const auto num_cuts = static_cast<std::size_t>(cfg.cut_min) + static_cast<std::size_t>(rng.uniform_int(span_width));

  // Partial Fisher-Yates over the interior indices.
  std::vector<std::size_t> interior(x.size() - 1);
  for (std::size_t i = 0; i < interior.size(); ++i) {
    interior[i] = i + 1;
  }
  for (std::size_t i = 0; i < num_cuts; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_int(interior.size() - i));
    std::swap(interior[i], interior[j]);
  }
  std::vector<std::size_t> cuts(interior.begin(), interior.begin() + static_cast<std::ptrdiff_t>(num_cuts));
  std::sort(cuts.begin(), cuts.end());
  const auto order = rng.permutation(num_cuts + 1);

  auto out = permute_segments(x, cuts, order);
  for (double& v : out) {
    v += cfg.noise_sigma_strong * rng.normal();
  }
  return out;
}

inline std::vector<double> strong_augment(const SignalWindow& w, const AugmentConfig& cfg, std::uint64_t stream_id) {
  return strong_augment(std::span<const double>(w.values), cfg, stream_id);
}

/// (x - mean) / std with the population std; a constant input maps to zeros.
inline std::vector<double> znormalize(std::span<const double> x) {
  require_finite(x, "znormalize");
  const double m = mean_of(x);
  const double s = stddev_of(x);
  std::vector<double> out(x.size(), 0.0);
  if (s < 1e-12) {
    return out;
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - m) / s;
  }
  return out;
}

namespace detail {

// Radix-2 decimation in time while the length is even; odd remainders fall
// back to a direct transform.
inline void dft_recursive(const std::complex<double>* in, std::size_t n, std::size_t stride,
                          std::complex<double>* out) {
  if (n == 1) {
    out[0] = in[0];
    return;
  }
  if (n % 2 != 0) {
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<double> acc = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const double angle = -2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
        acc += in[t * stride] * std::polar(1.0, angle);
      }
      out[k] = acc;
    }
    return;
  }
  const std::size_t half = n / 2;
  dft_recursive(in, half, stride * 2, out);
  dft_recursive(in + stride, half, stride * 2, out + half);
  for (std::size_t k = 0; k < half; ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    const std::complex<double> t = std::polar(1.0, angle) * out[k + half];
    const std::complex<double> e = out[k];
    out[k] = e + t;
    out[k + half] = e - t;
  }
}

}  // namespace detail

/// Unnormalized DFT, X[k] = sum_t x[t] exp(-2 pi i k t / L).
inline std::vector<std::complex<double>> fourier_transform(std::span<const double> x) {
  std::vector<std::complex<double>> in(x.begin(), x.end());
  std::vector<std::complex<double>> out(x.size());
  if (!x.empty()) {
    detail::dft_recursive(in.data(), in.size(), 1, out.data());
  }
  return out;
}

/// |DFT(x)[k]| for k = 0 .. L/2 - 1. The input is used verbatim.
inline Spectrum fft_magnitude(std::span<const double> x) {
  if (x.size() < kMinWindowLength) {
    throw std::invalid_argument("fft_magnitude: length " + std::to_string(x.size()) + " is below " +
                                std::to_string(kMinWindowLength));
  }
  if (x.size() % 2 != 0) {
    throw std::invalid_argument("fft_magnitude: odd length " + std::to_string(x.size()) + " is not supported");
  }
  require_finite(x, "fft_magnitude");
  const auto bins = fourier_transform(x);
  Spectrum s;
  s.magnitudes.resize(x.size() / 2);
  for (std::size_t k = 0; k < s.magnitudes.size(); ++k) {
    s.magnitudes[k] = std::abs(bins[k]);
  }
  return s;
}

/// The frequency-branch input: |FFT(znormalize(x))|.
inline Spectrum spectrum_of(std::span<const double> x) { return fft_magnitude(znormalize(x)); }

}  // namespace splitsee
