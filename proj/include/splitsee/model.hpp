#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "splitsee/autograd.hpp"
#include "splitsee/config.hpp"
#include "splitsee/frequency_encoder.hpp"
#include "splitsee/layers.hpp"
#include "splitsee/objectives.hpp"
#include "splitsee/signal.hpp"
#include "splitsee/temporal_encoder.hpp"

namespace splitsee {

/// Parameters on the input-to-class-token path.
inline bool is_encoder_param(const std::string& name) {
  for (const char* prefix : {"tcn.", "ttrans.", "fconv.", "ftrans."}) {
    if (name.rfind(prefix, 0) == 0) {
      return true;
    }
  }
  return false;
}

/// Rescales each row of `m` to unit length.
template <class S>
void normalize_rows_in_place(Matrix<S>& m) {
  for (Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).template cast<double>().norm();
    if (n > 0.0) {
      for (Index c = 0; c < m.cols(); ++c) {
        m(r, c) = static_cast<S>(static_cast<double>(m(r, c)) / n);
      }
    }
  }
}

/// Fresh parameters for the full pretraining network.
template <class S>
ParamStore<S> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore<S> store;
  Philox rng(seed, 0x5eed'0000'0000'0001ULL);
  Tcn<S>::init(store, cfg.tcn, rng);
  TransformerSummarizer<S>::init(store, "ttrans", cfg.temporal_transformer, cfg.tcn.output_dim,
                                 cfg.temporal_transformer.patch_count, rng);
  FreqConv<S>::init(store, cfg.freq_conv, rng);
  TransformerSummarizer<S>::init(store, "ftrans", cfg.frequency_transformer, cfg.freq_conv.output_dim, cfg.freq_len(),
                                 rng);
  HorizonHeads<S>::init(store, "theads", cfg.horizons, cfg.context_dim(), cfg.tcn.output_dim, rng);
  HorizonHeads<S>::init(store, "fheads", cfg.horizons, cfg.context_dim(), cfg.freq_conv.output_dim, rng);
  Linear<S>::init(store, "cluster.proj", 2 * cfg.context_dim(), cfg.cluster_dim, rng);
  Matrix<S> centroids(cfg.num_clusters, cfg.cluster_dim);
  for (Index i = 0; i < centroids.size(); ++i) {
    centroids.data()[i] = static_cast<S>(rng.normal());
  }
  normalize_rows_in_place(centroids);
  store.add("cluster.centroids", std::move(centroids));
  return store;
}

/// Input-to-class-token network: both domain encoders and their transformers.
template <class S>
class Encoder {
 public:
  Encoder(const ParamStore<S>& params, const ModelConfig& cfg)
      : cfg_(cfg),
        tcn_(params, cfg.tcn),
        ttrans_(params, "ttrans", cfg.temporal_transformer, cfg.tcn.output_dim, cfg.temporal_transformer.patch_count),
        fconv_(params, cfg.freq_conv),
        ftrans_(params, "ftrans", cfg.frequency_transformer, cfg.freq_conv.output_dim, cfg.freq_len()) {}

  struct Temporal {
    Var<S> features;  // L x D
    Var<S> context;   // 1 x D_ct
  };

  struct Frequency {
    Var<S> low;       // B x D
    Var<S> high;      // B x D, rows reversed
    Var<S> ct_low;    // 1 x D_ct
    Var<S> ct_high;   // 1 x D_ct
  };

  /// x: L x 1.
  Temporal temporal(Tape<S>& t, Var<S> x) const {
    if (x.rows() != cfg_.window_len) {
      throw std::invalid_argument("window length mismatch: expected " + std::to_string(cfg_.window_len) + ", got " +
                                  std::to_string(x.rows()));
    }
    Var<S> z = tcn_.forward(t, x);
    Var<S> tokens = mean_pool_rows(z, cfg_.temporal_transformer.patch_count);
    return Temporal{z, ttrans_.forward(t, tokens)};
  }

  /// spectrum: B_f x 1; `tokens` is the truncation F.
  Frequency frequency(Tape<S>& t, Var<S> spectrum, int tokens) const {
    if (spectrum.rows() != cfg_.spectrum_len()) {
      throw std::invalid_argument("spectrum length mismatch: expected " + std::to_string(cfg_.spectrum_len()) +
                                  ", got " + std::to_string(spectrum.rows()));
    }
    Var<S> low = fconv_.forward(t, spectrum);
    Var<S> high = reverse_rows(low);
    auto [ct_low, ct_high] = freq_summarize(t, low, high, tokens, ftrans_);
    return Frequency{low, high, ct_low, ct_high};
  }

  /// Clean inference pass: Concat(ct_t, ct_f) as a 1 x 2*D_ct node.
  Var<S> embed(Tape<S>& t, std::span<const double> window) const {
    if (static_cast<int>(window.size()) != cfg_.window_len) {
      throw std::invalid_argument("window length mismatch: expected " + std::to_string(cfg_.window_len) + ", got " +
                                  std::to_string(window.size()));
    }
    Var<S> x = t.constant(as_column(window));
    Var<S> spec = t.constant(as_column(spectrum_of(window).magnitudes));
    Var<S> ct_t = temporal(t, x).context;
    Var<S> ct_f = frequency(t, spec, cfg_.inference_freq_tokens()).ct_low;
    return concat_cols({ct_t, ct_f});
  }

  std::vector<S> embed(std::span<const double> window, const ParamStore<S>& params) const {
    Tape<S> t(&params);
    const Matrix<S>& v = embed(t, window).value();
    return std::vector<S>(v.data(), v.data() + v.size());
  }

  const ModelConfig& config() const { return cfg_; }
  const Tcn<S>& tcn() const { return tcn_; }
  const TransformerSummarizer<S>& temporal_transformer() const { return ttrans_; }
  const FreqConv<S>& freq_conv() const { return fconv_; }
  const TransformerSummarizer<S>& frequency_transformer() const { return ftrans_; }

  static Matrix<S> as_column(std::span<const double> v) {
    Matrix<S> m(static_cast<Index>(v.size()), 1);
    for (std::size_t i = 0; i < v.size(); ++i) {
      m(static_cast<Index>(i), 0) = static_cast<S>(v[i]);
    }
    return m;
  }

 private:
  ModelConfig cfg_;
  Tcn<S> tcn_;
  TransformerSummarizer<S> ttrans_;
  FreqConv<S> fconv_;
  TransformerSummarizer<S> ftrans_;
};

/// Pretraining-only parameters: horizon heads, clustering projection and centroids.
template <class S>
class PretrainHeads {
 public:
  PretrainHeads(const ParamStore<S>& params, const ModelConfig& cfg)
      : temporal_((require_heads(params), params), "theads", cfg.horizons, cfg.context_dim(), cfg.tcn.output_dim),
        frequency_(params, "fheads", cfg.horizons, cfg.context_dim(), cfg.freq_conv.output_dim),
        projection_(Linear<S>::bind(params, "cluster.proj", 2 * cfg.context_dim(), cfg.cluster_dim)),
        centroids_(params.id("cluster.centroids", cfg.num_clusters, cfg.cluster_dim)) {}

  static void require_heads(const ParamStore<S>& params) {
    if (!params.contains("cluster.centroids")) {
      throw std::invalid_argument("pretraining heads are absent (encoder-only parameter set)");
    }
  }

  const HorizonHeads<S>& temporal() const { return temporal_; }
  const HorizonHeads<S>& frequency() const { return frequency_; }
  const Linear<S>& projection() const { return projection_; }
  std::size_t centroids() const { return centroids_; }

 private:
  HorizonHeads<S> temporal_;
  HorizonHeads<S> frequency_;
  Linear<S> projection_;
  std::size_t centroids_;
};

/// Prepared network inputs for one window in a pretraining batch.
struct PretrainSample {
  std::vector<double> weak;
  std::vector<double> strong;
  std::vector<double> spectrum;
};

/// Per-batch random choices shared by every item: horizon K and frequency truncation F.
struct BatchDraw {
  int horizon = 2;
  int freq_tokens = 2;
};

enum LossTerm : std::size_t { kTcWeak = 0, kTcStrong = 1, kFcLow = 2, kFcHigh = 3, kCluster = 4 };

template <class S>
struct BatchResult {
  PretrainLossBreakdown breakdown;
  std::vector<Matrix<S>> grads;  // per parameter id; empty matrices had no gradient
  CodeMatrix codes_first;
  CodeMatrix codes_second;
};

/// Runs `fn(i)` for i in [0, n) over up to `threads` workers. Each index is
/// handled by exactly one worker, so results written per index are independent
/// of the worker count.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      fn(i);
    }
    return;
  }
  std::vector<std::jthread> workers;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) {
          fn(i);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  workers.clear();
  for (auto& e : errors) {
    if (e) {
      std::rethrow_exception(e);
    }
  }
}

/// Forward and (optionally) backward of the five pretraining losses on one batch.
///
/// Each item's encoder pass runs on its own tape; the losses couple the batch
/// on a second tape whose inputs are the stacked per-item outputs. Gradients
/// flow back into each item tape and are reduced in item order. `loss_weights`
/// seeds the backward pass, so a one-hot weight isolates a single term.
template <class S>
BatchResult<S> pretrain_batch(const ParamStore<S>& params, const ModelConfig& cfg,
                              std::span<const PretrainSample> batch, const BatchDraw& draw, bool with_grads,
                              unsigned threads = 1, const std::array<double, 5>& loss_weights = {1, 1, 1, 1, 1},
                              const std::optional<std::pair<CodeMatrix, CodeMatrix>>& fixed_codes = {}) {
  if (batch.empty()) {
    throw std::invalid_argument("pretrain batch is empty");
  }
  Encoder<S> encoder(params, cfg);
  PretrainHeads<S> heads(params, cfg);
  const int patches = cfg.temporal_transformer.patch_count;
  if (std::find(cfg.horizons.begin(), cfg.horizons.end(), draw.horizon) == cfg.horizons.end()) {
    throw std::invalid_argument("horizon K=" + std::to_string(draw.horizon) + " is not configured");
  }
  if (draw.freq_tokens < 1 || draw.freq_tokens + draw.horizon > cfg.freq_len()) {
    throw std::invalid_argument("frequency token count F=" + std::to_string(draw.freq_tokens) +
                                " violates F + K <= B");
  }
  const Index t_row = target_row(patches, draw.horizon);
  const Index f_row = target_row(draw.freq_tokens, draw.horizon);

  constexpr std::size_t kOutputs = 8;  // ct_w, ct_s, ct_l, ct_h, z_w, z_s, z_l, z_h
  struct Item {
    std::unique_ptr<Tape<S>> tape;
    std::array<Var<S>, kOutputs> out;
  };
  const std::size_t b = batch.size();
  std::vector<Item> items(b);

  parallel_for(b, threads, [&](std::size_t i) {
    auto& it = items[i];
    it.tape = std::make_unique<Tape<S>>(&params);
    Tape<S>& t = *it.tape;
    const auto& s = batch[i];
    auto weak = encoder.temporal(t, t.constant(Encoder<S>::as_column(s.weak)));
    auto strong = encoder.temporal(t, t.constant(Encoder<S>::as_column(s.strong)));
    auto freq = encoder.frequency(t, t.constant(Encoder<S>::as_column(s.spectrum)), draw.freq_tokens);
    it.out = {weak.context,
              strong.context,
              freq.ct_low,
              freq.ct_high,
              slice_rows(weak.features, t_row, 1),
              slice_rows(strong.features, t_row, 1),
              slice_rows(freq.low, f_row, 1),
              slice_rows(freq.high, f_row, 1)};
  });

  Tape<S> bt(&params);
  std::array<Var<S>, kOutputs> stacked;
  for (std::size_t k = 0; k < kOutputs; ++k) {
    const Index cols = items[0].out[k].cols();
    Matrix<S> m(static_cast<Index>(b), cols);
    for (std::size_t i = 0; i < b; ++i) {
      m.row(static_cast<Index>(i)) = items[i].out[k].value().row(0);
    }
    stacked[k] = bt.input(std::move(m));
  }
  const S nce_tau = static_cast<S>(cfg.nce_tau);
  auto [l_tc_s, l_tc_w] = temporal_contrast(bt, stacked[0], stacked[1], stacked[4], stacked[5], draw.horizon,
                                            heads.temporal(), nce_tau);
  auto [l_fc_l, l_fc_h] = frequency_contrast(bt, stacked[2], stacked[3], stacked[6], stacked[7], draw.horizon,
                                             heads.frequency(), nce_tau);
  Var<S> z_time = normalize_rows(heads.projection()(bt, concat_cols({stacked[0], stacked[1]})));
  Var<S> z_freq = normalize_rows(heads.projection()(bt, concat_cols({stacked[2], stacked[3]})));
  auto swapped = swapped_prediction(z_time, z_freq, bt.param(heads.centroids()), cfg.cluster_tau,
                                    cfg.sinkhorn_epsilon, cfg.sinkhorn_iters, fixed_codes);

  const std::array<Var<S>, 5> terms = {l_tc_w, l_tc_s, l_fc_l, l_fc_h, swapped.loss};
  auto scalar = [](Var<S> v) { return static_cast<double>(v.value()(0, 0)); };
  BatchResult<S> result;
  auto& br = result.breakdown;
  br = PretrainLossBreakdown{scalar(l_tc_w), scalar(l_tc_s), scalar(l_fc_l), scalar(l_fc_h), scalar(swapped.loss), 0.0};
  br.total = (br.l_tc_w + br.l_tc_s) + (br.l_fc_h + br.l_fc_l) + br.l_dc;
  result.codes_first = std::move(swapped.codes_first);
  result.codes_second = std::move(swapped.codes_second);
  if (!with_grads || !std::isfinite(br.total)) {
    return result;
  }

  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (loss_weights[k] != 0.0) {
      bt.seed(terms[k], Matrix<S>::Constant(1, 1, static_cast<S>(loss_weights[k])));
    }
  }
  bt.run_backward();

  parallel_for(b, threads, [&](std::size_t i) {
    auto& it = items[i];
    for (std::size_t k = 0; k < kOutputs; ++k) {
      it.tape->seed(it.out[k], bt.grad(stacked[k]).row(static_cast<Index>(i)));
    }
    it.tape->run_backward();
  });

  result.grads.resize(params.size());
  auto accumulate = [&result](const std::vector<Matrix<S>>& g) {
    for (std::size_t p = 0; p < g.size(); ++p) {
      if (g[p].size() == 0) {
        continue;
      }
      if (result.grads[p].size() == 0) {
        result.grads[p] = g[p];
      } else {
        result.grads[p] += g[p];
      }
    }
  };
  accumulate(bt.param_grads());
  for (auto& it : items) {
    accumulate(it.tape->param_grads());
  }
  return result;
}

}  // namespace splitsee
