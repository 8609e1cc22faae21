#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splitsee/autograd.hpp"
#include "splitsee/config.hpp"
#include "splitsee/layers.hpp"

namespace splitsee {

/// L x D matrix of per-timestep local features.
template <class S>
using FeatureSequence = Matrix<S>;

/// 1 x D_ct class-token summary.
template <class S>
using ContextToken = Matrix<S>;

/// Temporal convolutional network.
///
/// Layer 0 is a linear causal convolution from the single input channel.
/// Every later layer is a residual block, out = x + gelu(conv(x) + b), with a
/// 1x1 projection on the skip path when the width changes. Output row t only
/// depends on inputs t - (receptive_field - 1) .. t.
template <class S>
class Tcn {
 public:
  static void init(ParamStore<S>& store, const TcnConfig& cfg, Philox& rng, const std::string& prefix = "tcn") {
    Index cin = 1;
    for (std::size_t i = 0; i < cfg.channels_per_layer.size(); ++i) {
      const Index cout = cfg.channels_per_layer[i];
      const std::string p = prefix + ".layer" + std::to_string(i);
      store.add(p + ".weight", fan_in_uniform<S>(cfg.kernel_size * cin, cout, cfg.kernel_size * cin, rng));
      store.add(p + ".bias", fan_in_uniform<S>(1, cout, cfg.kernel_size * cin, rng));
      if (i > 0 && cin != cout) {
        store.add(p + ".skip", fan_in_uniform<S>(cin, cout, cin, rng));
      }
      cin = cout;
    }
  }

  Tcn(const ParamStore<S>& store, const TcnConfig& cfg, const std::string& prefix = "tcn") : cfg_(cfg) {
    if (cfg.channels_per_layer.empty() || cfg.channels_per_layer.size() != cfg.dilations.size()) {
      throw std::invalid_argument("tcn: need one dilation per layer and at least one layer");
    }
    Index cin = 1;
    for (std::size_t i = 0; i < cfg.channels_per_layer.size(); ++i) {
      const Index cout = cfg.channels_per_layer[i];
      const std::string p = prefix + ".layer" + std::to_string(i);
      Layer layer;
      layer.weight = store.id(p + ".weight", cfg.kernel_size * cin, cout);
      layer.bias = store.id(p + ".bias", 1, cout);
      if (i > 0 && cin != cout) {
        layer.skip = store.id(p + ".skip", cin, cout);
      }
      layer.dilation = cfg.dilations[i];
      layers_.push_back(layer);
      cin = cout;
    }
  }

  /// x: L x 1. Returns L x output_dim.
  Var<S> forward(Tape<S>& t, Var<S> x) const {
    if (x.cols() != 1) {
      throw std::invalid_argument("tcn: expected a single input channel");
    }
    Var<S> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      Var<S> c = add_row(causal_conv(h, t.param(l.weight), cfg_.kernel_size, l.dilation), t.param(l.bias));
      if (i == 0) {
        h = c;
        continue;
      }
      Var<S> skip = l.skip ? matmul(h, t.param(*l.skip)) : h;
      h = add(skip, gelu(c));
    }
    return h;
  }

  const TcnConfig& config() const { return cfg_; }

 private:
  struct Layer {
    std::size_t weight = 0;
    std::size_t bias = 0;
    std::optional<std::size_t> skip;
    int dilation = 1;
  };

  TcnConfig cfg_;
  std::vector<Layer> layers_;
};

template <class S>
Matrix<S> column_of(std::span<const S> x) {
  Matrix<S> m(static_cast<Index>(x.size()), 1);
  for (std::size_t i = 0; i < x.size(); ++i) {
    m(static_cast<Index>(i), 0) = x[i];
  }
  return m;
}

template <class S>
FeatureSequence<S> tcn_forward(std::span<const S> x, const ParamStore<S>& params, const TcnConfig& cfg) {
  Tcn<S> tcn(params, cfg);
  Tape<S> tape(&params);
  return tcn.forward(tape, tape.constant(column_of(x))).value();
}

/// Mean-pools the first T*floor(L'/T) rows into T tokens; trailing rows are dropped.
template <class S>
Matrix<S> patchify(const FeatureSequence<S>& z, Index patches) {
  if (patches > z.rows()) {
    throw std::invalid_argument("patchify: " + std::to_string(patches) + " patches requested from " +
                                std::to_string(z.rows()) + " rows");
  }
  Tape<S> tape;
  return mean_pool_rows(tape.constant(z), patches).value();
}

template <class S>
ContextToken<S> transformer_summarize(const Matrix<S>& tokens, const ParamStore<S>& params,
                                      const TransformerConfig& cfg, const std::string& prefix, Index max_tokens) {
  TransformerSummarizer<S> tr(params, prefix, cfg, tokens.cols(), max_tokens);
  Tape<S> tape(&params);
  return tr.forward(tape, tape.constant(tokens)).value();
}

template <class S>
Matrix<S> project_horizon(const ContextToken<S>& ct, int k, const HorizonHeads<S>& heads,
                          const ParamStore<S>& params) {
  Tape<S> tape(&params);
  return heads.project(tape, tape.constant(ct), k).value();
}

}  // namespace splitsee
