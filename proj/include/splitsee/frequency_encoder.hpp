#pragma once

#include <span>
#include <string>
#include <utility>

#include "splitsee/autograd.hpp"
#include "splitsee/config.hpp"
#include "splitsee/layers.hpp"
#include "splitsee/signal.hpp"
#include "splitsee/temporal_encoder.hpp"

namespace splitsee {

/// Strided 1-D convolution over the magnitude spectrum, `<prefix>.weight`
/// (kernel x D) and `<prefix>.bias` (1 x D).
template <class S>
class FreqConv {
 public:
  static void init(ParamStore<S>& store, const FreqConvConfig& cfg, Philox& rng, const std::string& prefix = "fconv") {
    store.add(prefix + ".weight", fan_in_uniform<S>(cfg.kernel_size, cfg.output_dim, cfg.kernel_size, rng));
    store.add(prefix + ".bias", fan_in_uniform<S>(1, cfg.output_dim, cfg.kernel_size, rng));
  }

  FreqConv(const ParamStore<S>& store, const FreqConvConfig& cfg, const std::string& prefix = "fconv")
      : cfg_(cfg),
        weight_(store.id(prefix + ".weight", cfg.kernel_size, cfg.output_dim)),
        bias_(store.id(prefix + ".bias", 1, cfg.output_dim)) {}

  /// spectrum: B_f x 1. Returns B x D.
  Var<S> forward(Tape<S>& t, Var<S> spectrum) const {
    if (spectrum.cols() != 1) {
      throw std::invalid_argument("freq conv: expected a single spectrum column");
    }
    return add_row(strided_conv(spectrum, t.param(weight_), cfg_.kernel_size, cfg_.stride), t.param(bias_));
  }

  const FreqConvConfig& config() const { return cfg_; }

 private:
  FreqConvConfig cfg_;
  std::size_t weight_;
  std::size_t bias_;
};

template <class S>
FeatureSequence<S> freq_conv_forward(const Spectrum& s, const ParamStore<S>& params, const FreqConvConfig& cfg,
                                     int expected_spectrum_len) {
  if (static_cast<int>(s.magnitudes.size()) != expected_spectrum_len) {
    throw std::invalid_argument("freq conv: spectrum length " + std::to_string(s.magnitudes.size()) +
                                " does not match configured " + std::to_string(expected_spectrum_len));
  }
  FreqConv<S> conv(params, cfg);
  Tape<S> tape(&params);
  Matrix<S> col(static_cast<Index>(s.magnitudes.size()), 1);
  for (std::size_t i = 0; i < s.magnitudes.size(); ++i) {
    col(static_cast<Index>(i), 0) = static_cast<S>(s.magnitudes[i]);
  }
  return conv.forward(tape, tape.constant(std::move(col))).value();
}

/// Z^h: row i of the result is row B-1-i of Z^l.
template <class S>
FeatureSequence<S> reverse_features(const FeatureSequence<S>& low) {
  return low.colwise().reverse();
}

/// Shared frequency transformer applied to the first F rows of both band orderings.
template <class S>
std::pair<Var<S>, Var<S>> freq_summarize(Tape<S>& t, Var<S> low, Var<S> high, int tokens,
                                         const TransformerSummarizer<S>& transformer) {
  if (tokens < 1 || tokens > low.rows() || low.rows() != high.rows()) {
    throw std::invalid_argument("freq_summarize: token count " + std::to_string(tokens) + " outside 1.." +
                                std::to_string(low.rows()));
  }
  Var<S> ct_low = transformer.forward(t, slice_rows(low, 0, tokens));
  Var<S> ct_high = transformer.forward(t, slice_rows(high, 0, tokens));
  return {ct_low, ct_high};
}

/// Plain-matrix form; F is checked against the configured [f_min, f_max] range.
template <class S>
std::pair<ContextToken<S>, ContextToken<S>> freq_summarize(const FeatureSequence<S>& low,
                                                           const FeatureSequence<S>& high, int tokens,
                                                           const ParamStore<S>& params, const ModelConfig& cfg) {
  if (tokens < cfg.min_freq_tokens() || tokens > cfg.max_freq_tokens()) {
    throw std::invalid_argument("freq_summarize: F=" + std::to_string(tokens) + " outside [" +
                                std::to_string(cfg.min_freq_tokens()) + ", " + std::to_string(cfg.max_freq_tokens()) +
                                "]");
  }
  TransformerSummarizer<S> tr(params, "ftrans", cfg.frequency_transformer, cfg.freq_conv.output_dim, cfg.freq_len());
  Tape<S> tape(&params);
  auto [l, h] = freq_summarize(tape, tape.constant(low), tape.constant(high), tokens, tr);
  return {l.value(), h.value()};
}

}  // namespace splitsee
