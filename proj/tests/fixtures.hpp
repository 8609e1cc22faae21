#pragma once

#include <cstdint>
#include <vector>

#include "splitsee/config.hpp"
#include "splitsee/datahub.hpp"
#include "splitsee/rng.hpp"

namespace fixtures {

/// L=32, D=4, D_ct=8, J=4: the configuration used by the gradient checks.
inline splitsee::ModelConfig tiny_model() {
  splitsee::ModelConfig m;
  m.window_len = 32;
  m.tcn.channels_per_layer = {4, 4};
  m.tcn.kernel_size = 3;
  m.tcn.dilations = {1, 2};
  m.tcn.output_dim = 4;
  m.temporal_transformer = {4, 1, 1, 4, 8, 2};
  m.frequency_transformer = m.temporal_transformer;
  m.freq_conv = {3, 1, 4};
  m.horizons = {2, 3};
  m.num_clusters = 4;
  m.cluster_dim = 4;
  return m;
}

/// A narrow L=256 model that still exercises every component.
inline splitsee::ModelConfig small_model() {
  splitsee::ModelConfig m;
  m.tcn.channels_per_layer = {8, 8};
  m.tcn.kernel_size = 4;
  m.tcn.dilations = {1, 2};
  m.tcn.output_dim = 8;
  m.temporal_transformer = {8, 1, 2, 8, 8, 2};
  m.frequency_transformer = m.temporal_transformer;
  m.freq_conv = {7, 2, 8};
  m.num_clusters = 8;
  m.cluster_dim = 8;
  return m;
}

inline std::vector<double> random_vector(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  splitsee::Philox rng(seed, 77);
  std::vector<double> v(n);
  for (auto& x : v) {
    x = scale * rng.normal();
  }
  return v;
}

inline std::vector<std::vector<double>> random_windows(std::size_t n, std::size_t len, std::uint64_t seed) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(random_vector(len, seed * 1000 + i));
  }
  return out;
}

inline splitsee::WindowSet two_class_set(int per_class, int length, std::uint64_t seed, double noise = 0.3) {
  splitsee::SynthSpec s;
  s.windows_per_class = per_class;
  s.length = length;
  s.noise_sigma = noise;
  s.seed = seed;
  return splitsee::generate_synthetic(s);
}

}  // namespace fixtures
