#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <numbers>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "splitsee/datahub.hpp"
#include "splitsee/signal.hpp"

using namespace splitsee;

namespace {

std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "splitsee_test_datahub";
  std::filesystem::create_directories(dir);
  return dir / name;
}

std::string load_error(std::span<const std::uint8_t> bytes) {
  try {
    deserialize_windows(bytes);
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Synthetic, NoiseFreeFullBurstIsPureSinusoid) {
  SynthSpec s;
  s.windows_per_class = 3;
  s.noise_sigma = 0.0;
  s.burst_duration_fraction = 1.0;
  const WindowSet ws = generate_synthetic(s);
  ASSERT_EQ(ws.size(), 6u);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const double f = s.resolved_frequencies()[static_cast<std::size_t>(ws.labels[i])];
    const double w = 2.0 * std::numbers::pi * f / s.sampling_rate_hz;
    const auto x = ws.window(i);
    // Recover the phase from the first sample and its successor, then compare every sample.
    const double phase = std::atan2(x[0] * std::sin(w), x[1] - x[0] * std::cos(w));
    for (std::size_t t = 0; t < x.size(); ++t) {
      ASSERT_NEAR(x[t], std::sin(w * static_cast<double>(t) + phase), 1e-6) << "window " << i << " t " << t;
    }
  }
}

TEST(Synthetic, DeterministicPerSeed) {
  SynthSpec s;
  s.windows_per_class = 10;
  s.seed = 5;
  EXPECT_EQ(generate_synthetic(s), generate_synthetic(s));
  SynthSpec other = s;
  other.seed = 6;
  EXPECT_NE(generate_synthetic(s).values, generate_synthetic(other).values);
}

TEST(Synthetic, ClassZeroPeaksAtBinTwenty) {
  SynthSpec s;
  s.windows_per_class = 4;
  s.noise_sigma = 0.0;
  s.burst_duration_fraction = 1.0;
  const WindowSet ws = generate_synthetic(s);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const auto x = ws.window(i);
    const auto ref = oracle::dft(x);
    const Spectrum mag = fft_magnitude(x);
    ASSERT_EQ(mag.magnitudes.size(), 128u);
    const auto peak = static_cast<std::size_t>(
        std::max_element(mag.magnitudes.begin(), mag.magnitudes.end()) - mag.magnitudes.begin());
    std::size_t ref_peak = 0;
    for (std::size_t k = 1; k < 128; ++k) {
      if (std::abs(ref[k]) > std::abs(ref[ref_peak])) {
        ref_peak = k;
      }
    }
    const std::size_t expected = ws.labels[i] == 0 ? 20 : 50;  // f * L / rate
    EXPECT_EQ(peak, expected);
    EXPECT_EQ(ref_peak, expected);
  }
}

TEST(Synthetic, ClassRecoverableFromSpectralPeakWithFiveClasses) {
  SynthSpec s;
  s.num_classes = 5;
  s.windows_per_class = 3;
  s.noise_sigma = 0.0;
  s.burst_duration_fraction = 1.0;
  const WindowSet ws = generate_synthetic(s);
  const auto freqs = s.resolved_frequencies();
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const Spectrum mag = fft_magnitude(ws.window(i));
    const auto peak = std::max_element(mag.magnitudes.begin(), mag.magnitudes.end()) - mag.magnitudes.begin();
    EXPECT_EQ(static_cast<double>(peak), freqs[static_cast<std::size_t>(ws.labels[i])] * 256.0 / 128.0);
  }
}

TEST(Synthetic, BurstConfinedToItsSpan) {
  SynthSpec s;
  s.windows_per_class = 5;
  s.noise_sigma = 0.0;
  s.burst_duration_fraction = 0.25;
  const WindowSet ws = generate_synthetic(s);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const auto r = ws.row(i);
    const auto first = std::find_if(r.begin(), r.end(), [](float v) { return v != 0.0f; }) - r.begin();
    const auto last = r.rend() - std::find_if(r.rbegin(), r.rend(), [](float v) { return v != 0.0f; });
    EXPECT_LE(last - first, 64);
  }
}

TEST(Synthetic, SpecValidation) {
  SynthSpec s;
  s.frequencies_hz = {10.0, 64.0};
  EXPECT_THROW(generate_synthetic(s), std::invalid_argument);
  s.frequencies_hz = {10.0, 63.9};
  EXPECT_NO_THROW(generate_synthetic(s));
  s.frequencies_hz = {10.0};
  EXPECT_THROW(generate_synthetic(s), std::invalid_argument);
  SynthSpec three;
  three.num_classes = 3;
  EXPECT_THROW(generate_synthetic(three), std::invalid_argument);
  SynthSpec frac;
  frac.burst_duration_fraction = 0.0;
  EXPECT_THROW(generate_synthetic(frac), std::invalid_argument);
}

TEST(WindowFile, RoundTripBitExact) {
  WindowSet ws = fixtures::two_class_set(7, 64, 3);
  ws.channel_id = 11;
  ws.sampling_rate_hz = 173.61;
  ws.labels[2] = -1;
  ws.values[5] = -0.0f;
  ws.values[6] = std::numeric_limits<float>::denorm_min();
  const auto path = scratch("rt.spwd");
  save_windows(ws, path);
  const WindowSet back = load_windows(path);
  EXPECT_EQ(back.length, ws.length);
  EXPECT_EQ(back.labels, ws.labels);
  EXPECT_EQ(back.channel_id, 11u);
  EXPECT_EQ(back.sampling_rate_hz, 173.61);
  ASSERT_EQ(back.values.size(), ws.values.size());
  EXPECT_EQ(std::memcmp(back.values.data(), ws.values.data(), ws.values.size() * sizeof(float)), 0);
  EXPECT_EQ(serialize(back), read_file_bytes(path));
}

TEST(WindowFile, HeaderLayout) {
  const WindowSet ws = fixtures::two_class_set(2, 16, 4);
  const auto b = serialize(ws);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "SPWD");
  std::uint64_t n;
  std::uint64_t len;
  std::memcpy(&n, b.data() + 8, 8);
  std::memcpy(&len, b.data() + 16, 8);
  EXPECT_EQ(n, 4u);
  EXPECT_EQ(len, 16u);
  EXPECT_EQ(b.size(), 4u + 4 + 8 + 8 + 8 + 4 + 4 * 16 * 4 + 4 * 4 + 4);
}

TEST(WindowFile, CorruptByteRejectedByChecksum) {
  const auto good = serialize(fixtures::two_class_set(3, 32, 5));
  for (std::size_t at : {std::size_t{40}, std::size_t{100}, good.size() - 10}) {
    auto bad = good;
    bad[at] ^= 0x10;
    EXPECT_NE(load_error(bad).find("checksum mismatch"), std::string::npos) << at;
  }
}

TEST(WindowFile, EmptyFileBadMagic) {
  const auto path = scratch("empty.spwd");
  std::ofstream(path, std::ios::binary).close();
  try {
    load_windows(path);
    FAIL() << "empty file accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
    EXPECT_EQ(e.offset(), 0u);
  }
  const std::vector<std::uint8_t> other = {'S', 'P', 'S', 'E', 1, 0, 0, 0, 0, 0, 0, 0};
  EXPECT_NE(load_error(other).find("bad magic"), std::string::npos);
}

TEST(WindowFile, TruncationRejected) {
  const auto good = serialize(fixtures::two_class_set(3, 32, 6));
  for (std::size_t keep : {std::size_t{3}, std::size_t{7}, std::size_t{30}, good.size() - 1}) {
    const std::span<const std::uint8_t> cut(good.data(), keep);
    EXPECT_THROW(deserialize_windows(cut), FormatError) << keep;
  }
}

TEST(WindowFile, LengthFieldDisagreeingWithPayloadRejected) {
  auto bytes = serialize(fixtures::two_class_set(3, 32, 7));
  const std::uint64_t len = 31;
  std::memcpy(bytes.data() + 16, &len, 8);
  const std::uint32_t crc = crc32_of(std::span<const std::uint8_t>(bytes).first(bytes.size() - 4));
  std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
  EXPECT_NE(load_error(bytes).find("payload size disagrees"), std::string::npos);
}

TEST(WindowFile, InvalidSetsNotWritten) {
  WindowSet ws = fixtures::two_class_set(2, 16, 8);
  ws.values[3] = std::nanf("");
  EXPECT_THROW(serialize(ws), std::invalid_argument);
  WindowSet empty;
  EXPECT_THROW(serialize(empty), std::invalid_argument);
}

TEST(Splits, BalancedHundred) {
  const WindowSet ws = fixtures::two_class_set(50, 16, 9);
  const Splits s = make_splits(ws, SplitSpec{});
  EXPECT_EQ(s.test.size(), 20u);
  EXPECT_EQ(s.val.size(), 16u);
  EXPECT_EQ(s.train.size(), 64u);
  const auto test_labels = ws.labels_at(s.test);
  EXPECT_EQ(std::count(test_labels.begin(), test_labels.end(), 0), 10);
}

TEST(Splits, PartitionAndDeterminism) {
  for (int per_class : {3, 7, 50, 123}) {
    for (int classes : {2, 5}) {
      SynthSpec spec;
      spec.num_classes = classes;
      spec.windows_per_class = per_class;
      spec.length = 16;
      spec.sampling_rate_hz = 128;
      const WindowSet ws = generate_synthetic(spec);
      SplitSpec sp;
      sp.split_seed = static_cast<std::uint64_t>(per_class);
      const Splits s = make_splits(ws, sp);
      std::vector<std::size_t> all;
      for (const auto* part : {&s.train, &s.val, &s.test}) {
        all.insert(all.end(), part->begin(), part->end());
      }
      std::sort(all.begin(), all.end());
      std::vector<std::size_t> expect(ws.size());
      std::iota(expect.begin(), expect.end(), 0);
      EXPECT_EQ(all, expect);
      const std::size_t n = ws.size();
      EXPECT_EQ(s.test.size(), n / 5);
      EXPECT_EQ(s.val.size(), static_cast<std::size_t>(std::floor(0.2 * static_cast<double>(n - n / 5))));
      const Splits again = make_splits(ws, sp);
      EXPECT_EQ(again.train, s.train);
      EXPECT_EQ(again.val, s.val);
      EXPECT_EQ(again.test, s.test);
    }
  }
}

TEST(Splits, SeedChangesAssignment) {
  const WindowSet ws = fixtures::two_class_set(50, 16, 10);
  SplitSpec a;
  SplitSpec b;
  b.split_seed = 1;
  EXPECT_NE(make_splits(ws, a).test, make_splits(ws, b).test);
}

TEST(Splits, UnlabeledSetsSplitWithoutStrata) {
  WindowSet ws = fixtures::two_class_set(10, 16, 11);
  std::fill(ws.labels.begin(), ws.labels.end(), -1);
  const Splits s = make_splits(ws, SplitSpec{});
  EXPECT_EQ(s.test.size() + s.val.size() + s.train.size(), 20u);
}

TEST(Splits, Rejections) {
  WindowSet ws = fixtures::two_class_set(10, 16, 12);
  ws.labels[0] = 2;
  ws.labels[2] = 2;
  EXPECT_THROW(make_splits(ws, SplitSpec{}), std::invalid_argument);
  ws.labels[4] = 2;
  EXPECT_NO_THROW(make_splits(ws, SplitSpec{}));
  EXPECT_THROW(make_splits(fixtures::two_class_set(2, 16, 13), SplitSpec{}), std::invalid_argument);
  SplitSpec bad;
  bad.test_fraction = 1.0;
  EXPECT_THROW(make_splits(ws, bad), std::invalid_argument);
}
