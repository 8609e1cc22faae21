#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitsee/io.hpp"
#include "splitsee/rng.hpp"

namespace splitsee {

inline constexpr std::uint32_t kWindowFileVersion = 1;
inline constexpr std::array<char, 4> kWindowMagic = {'S', 'P', 'W', 'D'};

/// N windows of uniform length L, stored row-major in binary32. Label -1 means unlabeled.
struct WindowSet {
  std::size_t length = 0;
  std::vector<float> values;
  std::vector<std::int32_t> labels;
  double sampling_rate_hz = 1.0;
  std::uint32_t channel_id = 0;

  std::size_t size() const { return labels.size(); }

  std::span<const float> row(std::size_t i) const { return {values.data() + i * length, length}; }

  std::vector<double> window(std::size_t i) const {
    const auto r = row(i);
    return std::vector<double>(r.begin(), r.end());
  }

  std::vector<std::vector<double>> windows(std::span<const std::size_t> indices) const {
    std::vector<std::vector<double>> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
      out.push_back(window(i));
    }
    return out;
  }

  std::vector<std::vector<double>> all_windows() const {
    std::vector<std::vector<double>> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) {
      out.push_back(window(i));
    }
    return out;
  }

  std::vector<int> labels_at(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
      out.push_back(labels[i]);
    }
    return out;
  }

  bool fully_labeled() const {
    return std::all_of(labels.begin(), labels.end(), [](std::int32_t l) { return l >= 0; });
  }

  /// 1 + the largest label, or 0 when nothing is labeled.
  int num_classes() const {
    std::int32_t m = -1;
    for (auto l : labels) {
      m = std::max(m, l);
    }
    return static_cast<int>(m) + 1;
  }

  void validate() const {
    if (size() == 0) {
      throw std::invalid_argument("window set is empty");
    }
    if (length == 0 || values.size() != size() * length) {
      throw std::invalid_argument("window set payload has " + std::to_string(values.size()) + " values, expected " +
                                  std::to_string(size()) + " x " + std::to_string(length));
    }
    if (!(sampling_rate_hz > 0.0) || !std::isfinite(sampling_rate_hz)) {
      throw std::invalid_argument("sampling rate must be positive");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < -1) {
        throw std::invalid_argument("window " + std::to_string(i) + " has invalid label " + std::to_string(labels[i]));
      }
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw std::invalid_argument("window " + std::to_string(i / length) + " has a non-finite value at offset " +
                                    std::to_string(i % length));
      }
    }
  }

  friend bool operator==(const WindowSet&, const WindowSet&) = default;
};

// Synthetic generator ------------------------------------------------------------

struct SynthSpec {
  int num_classes = 2;
  int windows_per_class = 100;
  int length = 256;
  double sampling_rate_hz = 128.0;
  std::vector<double> frequencies_hz;  // empty: defaults for 2 or 5 classes
  double burst_duration_fraction = 0.5;
  double burst_amplitude = 1.0;
  double noise_sigma = 0.5;
  std::uint64_t seed = 0;
  std::uint32_t channel_id = 0;

  std::vector<double> resolved_frequencies() const {
    if (!frequencies_hz.empty()) {
      return frequencies_hz;
    }
    if (num_classes == 2) {
      return {10.0, 25.0};
    }
    if (num_classes == 5) {
      return {4.0, 8.0, 12.0, 20.0, 30.0};
    }
    throw std::invalid_argument("no default burst frequencies for " + std::to_string(num_classes) +
                                " classes; pass them explicitly");
  }

  void validate() const {
    if (num_classes < 1) {
      throw std::invalid_argument("num_classes must be >= 1");
    }
    if (windows_per_class < 1) {
      throw std::invalid_argument("windows_per_class must be >= 1");
    }
    if (length < 2) {
      throw std::invalid_argument("window length must be >= 2");
    }
    if (!(sampling_rate_hz > 0.0)) {
      throw std::invalid_argument("sampling rate must be positive");
    }
    const auto freqs = resolved_frequencies();
    if (static_cast<int>(freqs.size()) != num_classes) {
      throw std::invalid_argument("expected " + std::to_string(num_classes) + " burst frequencies, got " +
                                  std::to_string(freqs.size()));
    }
    for (double f : freqs) {
      if (!(f > 0.0) || !(f < sampling_rate_hz / 2.0)) {
        throw std::invalid_argument("burst frequency " + std::to_string(f) + " Hz violates Nyquist for rate " +
                                    std::to_string(sampling_rate_hz) + " Hz");
      }
    }
    if (!(burst_duration_fraction > 0.0 && burst_duration_fraction <= 1.0)) {
      throw std::invalid_argument("burst_duration_fraction must be in (0, 1]");
    }
    if (!(noise_sigma >= 0.0) || !std::isfinite(noise_sigma) || !std::isfinite(burst_amplitude)) {
      throw std::invalid_argument("noise_sigma must be finite and nonnegative");
    }
  }
};

/// Window i belongs to class i mod C: Gaussian background noise plus a
/// sinusoidal burst at the class frequency with random phase and offset.
inline WindowSet generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  const auto freqs = spec.resolved_frequencies();
  const auto n = static_cast<std::size_t>(spec.num_classes) * static_cast<std::size_t>(spec.windows_per_class);
  const auto len = static_cast<std::size_t>(spec.length);
  const auto burst =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(spec.burst_duration_fraction * spec.length)));
  WindowSet ws;
  ws.length = len;
  ws.sampling_rate_hz = spec.sampling_rate_hz;
  ws.channel_id = spec.channel_id;
  ws.values.resize(n * len);
  ws.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Philox rng(spec.seed, i);
    const int c = static_cast<int>(i % static_cast<std::size_t>(spec.num_classes));
    ws.labels[i] = c;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const auto offset = static_cast<std::size_t>(rng.uniform_int(len - burst + 1));
    const double w = 2.0 * std::numbers::pi * freqs[static_cast<std::size_t>(c)] / spec.sampling_rate_hz;
    float* row = ws.values.data() + i * len;
    for (std::size_t t = 0; t < len; ++t) {
      double v = spec.noise_sigma > 0.0 ? spec.noise_sigma * rng.normal() : 0.0;
      if (t >= offset && t < offset + burst) {
        v += spec.burst_amplitude * std::sin(w * static_cast<double>(t) + phase);
      }
      row[t] = static_cast<float>(v);
    }
  }
  return ws;
}

// Persistence ------------------------------------------------------------------

inline std::vector<std::uint8_t> serialize(const WindowSet& ws) {
  ws.validate();
  ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kWindowMagic.data()), 4));
  w.put<std::uint32_t>(kWindowFileVersion);
  w.put<std::uint64_t>(ws.size());
  w.put<std::uint64_t>(ws.length);
  w.put<double>(ws.sampling_rate_hz);
  w.put<std::uint32_t>(ws.channel_id);
  for (float v : ws.values) {
    w.put<float>(v);
  }
  for (std::int32_t l : ws.labels) {
    w.put<std::int32_t>(l);
  }
  w.put_crc();
  return w.take();
}

inline WindowSet deserialize_windows(std::span<const std::uint8_t> bytes) {
  ByteReader r = open_checked(bytes, kWindowMagic);
  const auto version = r.get<std::uint32_t>("format version");
  if (version != kWindowFileVersion) {
    throw FormatError("unsupported window file version " + std::to_string(version), 4);
  }
  const auto n = r.get<std::uint64_t>("window count");
  const auto len = r.get<std::uint64_t>("window length");
  WindowSet ws;
  ws.sampling_rate_hz = r.get<double>("sampling rate");
  ws.channel_id = r.get<std::uint32_t>("channel id");
  const std::size_t payload_at = r.position();
  if (n == 0 || len == 0) {
    throw FormatError("empty window set", payload_at);
  }
  // N*L floats plus N labels, checked without overflow.
  if (n > r.remaining() / sizeof(std::int32_t) || len > (r.remaining() / n - sizeof(std::int32_t)) / sizeof(float) ||
      n * len * sizeof(float) + n * sizeof(std::int32_t) != r.remaining()) {
    throw FormatError("payload size disagrees with N=" + std::to_string(n) + ", L=" + std::to_string(len),
                      payload_at);
  }
  ws.length = static_cast<std::size_t>(len);
  ws.values.resize(static_cast<std::size_t>(n * len));
  for (auto& v : ws.values) {
    v = r.get<float>("window payload");
  }
  ws.labels.resize(static_cast<std::size_t>(n));
  for (auto& l : ws.labels) {
    l = r.get<std::int32_t>("labels");
  }
  try {
    ws.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what(), payload_at);
  }
  return ws;
}

inline void save_windows(const WindowSet& ws, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(ws));
}

inline WindowSet load_windows(const std::filesystem::path& path) { return deserialize_windows(read_file_bytes(path)); }

// Splits -----------------------------------------------------------------------

struct SplitSpec {
  double test_fraction = 0.20;
  double val_fraction_of_train = 0.20;
  std::uint64_t split_seed = 0;
};

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

namespace detail {

/// Splits `total` across groups proportionally to `sizes` by largest remainder;
/// ties go to the earlier group.
inline std::vector<std::size_t> apportion(const std::vector<std::size_t>& sizes, std::size_t total) {
  std::size_t sum = 0;
  for (auto s : sizes) {
    sum += s;
  }
  std::vector<std::size_t> out(sizes.size(), 0);
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t given = 0;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    const double exact = static_cast<double>(sizes[g]) * static_cast<double>(total) / static_cast<double>(sum);
    out[g] = std::min(sizes[g], static_cast<std::size_t>(std::floor(exact)));
    given += out[g];
    rema.emplace_back(exact - static_cast<double>(out[g]), g);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; given < total && k < rema.size(); ++k) {
    const std::size_t g = rema[k].second;
    if (out[g] < sizes[g]) {
      ++out[g];
      ++given;
    }
  }
  return out;
}

}  // namespace detail

/// Test takes floor(test_fraction * N), validation floor(val_fraction * rest),
/// training the remainder. Labeled sets are stratified per label (unlabeled
/// windows form their own stratum). Index lists are sorted.
inline Splits make_splits(const WindowSet& ws, const SplitSpec& spec) {
  const std::size_t n = ws.size();
  if (n < 5) {
    throw std::invalid_argument("splitting needs N >= 5, got " + std::to_string(n));
  }
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) ||
      !(spec.val_fraction_of_train > 0.0 && spec.val_fraction_of_train < 1.0)) {
    throw std::invalid_argument("split fractions must lie in (0, 1)");
  }
  std::map<std::int32_t, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < n; ++i) {
    strata[ws.labels[i]].push_back(i);
  }
  const bool labeled = !(strata.size() == 1 && strata.begin()->first == -1);
  if (labeled) {
    for (const auto& [label, members] : strata) {
      if (label >= 0 && members.size() < 3) {
        throw std::invalid_argument("class " + std::to_string(label) + " has only " + std::to_string(members.size()) +
                                    " windows; stratified splitting needs at least 3");
      }
    }
  }
  std::vector<std::vector<std::size_t>> groups;
  for (auto& [label, members] : strata) {
    Philox rng(spec.split_seed, static_cast<std::uint64_t>(static_cast<std::int64_t>(label) + 1));
    rng.shuffle(std::span<std::size_t>(members));
    groups.push_back(members);
  }
  std::vector<std::size_t> sizes;
  for (const auto& g : groups) {
    sizes.push_back(g.size());
  }
  const auto n_test = static_cast<std::size_t>(std::floor(spec.test_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::floor(spec.val_fraction_of_train * static_cast<double>(n - n_test)));
  const auto test_counts = detail::apportion(sizes, n_test);
  std::vector<std::size_t> rest;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    rest.push_back(sizes[g] - test_counts[g]);
  }
  const auto val_counts = detail::apportion(rest, n_val);
  Splits s;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& m = groups[g];
    std::size_t k = 0;
    for (; k < test_counts[g]; ++k) {
      s.test.push_back(m[k]);
    }
    for (std::size_t v = 0; v < val_counts[g]; ++v, ++k) {
      s.val.push_back(m[k]);
    }
    for (; k < m.size(); ++k) {
      s.train.push_back(m[k]);
    }
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

}  // namespace splitsee
