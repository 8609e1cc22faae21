#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "splitsee/autograd.hpp"
#include "splitsee/config.hpp"
#include "splitsee/rng.hpp"

namespace splitsee {

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
template <class S>
Matrix<S> fan_in_uniform(Index rows, Index cols, Index fan_in, Philox& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix<S> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  }
  return m;
}

template <class S>
Matrix<S> constant_matrix(Index rows, Index cols, double v) {
  return Matrix<S>::Constant(rows, cols, static_cast<S>(v));
}

/// Affine map x W + b stored as `<prefix>.weight` (in x out) and `<prefix>.bias` (1 x out).
template <class S>
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;

  static void init(ParamStore<S>& store, const std::string& prefix, Index in, Index out, Philox& rng) {
    store.add(prefix + ".weight", fan_in_uniform<S>(in, out, in, rng));
    store.add(prefix + ".bias", fan_in_uniform<S>(1, out, in, rng));
  }

  static Linear bind(const ParamStore<S>& store, const std::string& prefix, Index in, Index out) {
    return Linear{store.id(prefix + ".weight", in, out), store.id(prefix + ".bias", 1, out)};
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const { return affine(x, t.param(weight), t.param(bias)); }
};

template <class S>
struct LayerNormParams {
  std::size_t gamma = 0;
  std::size_t beta = 0;

  static void init(ParamStore<S>& store, const std::string& prefix, Index dim) {
    store.add(prefix + ".gamma", constant_matrix<S>(1, dim, 1.0));
    store.add(prefix + ".beta", constant_matrix<S>(1, dim, 0.0));
  }

  static LayerNormParams bind(const ParamStore<S>& store, const std::string& prefix, Index dim) {
    return LayerNormParams{store.id(prefix + ".gamma", 1, dim), store.id(prefix + ".beta", 1, dim)};
  }

  Var<S> operator()(Tape<S>& t, Var<S> x) const { return layer_norm(x, t.param(gamma), t.param(beta)); }
};

/// Class-token transformer encoder: input projection, learned class token
/// prepended, learned positional embeddings on the content tokens, pre-norm
/// attention and feed-forward blocks, and the class-token output projected
/// to the context dimension.
template <class S>
class TransformerSummarizer {
 public:
  static void init(ParamStore<S>& store, const std::string& prefix, const TransformerConfig& cfg, Index input_dim,
                   Index max_tokens, Philox& rng) {
    cfg.validate();
    const Index d = cfg.token_dim;
    Linear<S>::init(store, prefix + ".in", input_dim, d, rng);
    store.add(prefix + ".cls", fan_in_uniform<S>(1, d, d, rng));
    store.add(prefix + ".pos", fan_in_uniform<S>(max_tokens, d, d, rng));
    for (int b = 0; b < cfg.num_layers; ++b) {
      const std::string p = prefix + ".block" + std::to_string(b);
      LayerNormParams<S>::init(store, p + ".ln1", d);
      Linear<S>::init(store, p + ".q", d, d, rng);
      Linear<S>::init(store, p + ".k", d, d, rng);
      Linear<S>::init(store, p + ".v", d, d, rng);
      Linear<S>::init(store, p + ".o", d, d, rng);
      LayerNormParams<S>::init(store, p + ".ln2", d);
      Linear<S>::init(store, p + ".ff1", d, d * cfg.ff_multiplier, rng);
      Linear<S>::init(store, p + ".ff2", d * cfg.ff_multiplier, d, rng);
    }
    Linear<S>::init(store, prefix + ".out", d, cfg.context_dim, rng);
  }

  TransformerSummarizer(const ParamStore<S>& store, const std::string& prefix, const TransformerConfig& cfg,
                        Index input_dim, Index max_tokens)
      : cfg_(cfg), input_dim_(input_dim), max_tokens_(max_tokens) {
    cfg.validate();
    const Index d = cfg.token_dim;
    in_ = Linear<S>::bind(store, prefix + ".in", input_dim, d);
    cls_ = store.id(prefix + ".cls", 1, d);
    pos_ = store.id(prefix + ".pos", max_tokens, d);
    for (int b = 0; b < cfg.num_layers; ++b) {
      const std::string p = prefix + ".block" + std::to_string(b);
      blocks_.push_back(Block{LayerNormParams<S>::bind(store, p + ".ln1", d), Linear<S>::bind(store, p + ".q", d, d),
                              Linear<S>::bind(store, p + ".k", d, d), Linear<S>::bind(store, p + ".v", d, d),
                              Linear<S>::bind(store, p + ".o", d, d), LayerNormParams<S>::bind(store, p + ".ln2", d),
                              Linear<S>::bind(store, p + ".ff1", d, d * cfg.ff_multiplier),
                              Linear<S>::bind(store, p + ".ff2", d * cfg.ff_multiplier, d)});
    }
    out_ = Linear<S>::bind(store, prefix + ".out", d, cfg.context_dim);
  }

  const TransformerConfig& config() const { return cfg_; }
  Index input_dim() const { return input_dim_; }
  Index max_tokens() const { return max_tokens_; }

  /// tokens: n x input_dim with 1 <= n <= max_tokens. Returns 1 x context_dim.
  Var<S> forward(Tape<S>& t, Var<S> tokens) const {
    if (tokens.cols() != input_dim_) {
      throw std::invalid_argument("transformer: token dimension " + std::to_string(tokens.cols()) +
                                  " does not match " + std::to_string(input_dim_));
    }
    if (tokens.rows() < 1 || tokens.rows() > max_tokens_) {
      throw std::invalid_argument("transformer: " + std::to_string(tokens.rows()) + " tokens, expected 1.." +
                                  std::to_string(max_tokens_));
    }
    const Index n = tokens.rows();
    Var<S> content = add(in_(t, tokens), slice_rows(t.param(pos_), 0, n));
    Var<S> x = concat_rows({t.param(cls_), content});
    const Index heads = cfg_.num_heads;
    const Index hd = cfg_.token_dim / heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
    for (const auto& b : blocks_) {
      Var<S> h = b.ln1(t, x);
      Var<S> q = b.q(t, h);
      Var<S> k = b.k(t, h);
      Var<S> v = b.v(t, h);
      std::vector<Var<S>> outs;
      outs.reserve(static_cast<std::size_t>(heads));
      for (Index hh = 0; hh < heads; ++hh) {
        Var<S> qh = slice_cols(q, hh * hd, hd);
        Var<S> kh = slice_cols(k, hh * hd, hd);
        Var<S> vh = slice_cols(v, hh * hd, hd);
        Var<S> att = softmax_rows(scale(matmul_transposed(qh, kh), inv_sqrt));
        outs.push_back(matmul(att, vh));
      }
      Var<S> merged = heads == 1 ? outs[0] : concat_cols(outs);
      x = add(x, b.o(t, merged));
      Var<S> f = b.ff2(t, gelu(b.ff1(t, b.ln2(t, x))));
      x = add(x, f);
    }
    return out_(t, slice_rows(x, 0, 1));
  }

 private:
  struct Block {
    LayerNormParams<S> ln1;
    Linear<S> q, k, v, o;
    LayerNormParams<S> ln2;
    Linear<S> ff1, ff2;
  };

  TransformerConfig cfg_;
  Index input_dim_;
  Index max_tokens_;
  Linear<S> in_;
  std::size_t cls_ = 0;
  std::size_t pos_ = 0;
  std::vector<Block> blocks_;
  Linear<S> out_;
};

/// One affine map per prediction horizon K, `<prefix>.K<k>.weight/bias`.
template <class S>
class HorizonHeads {
 public:
  static void init(ParamStore<S>& store, const std::string& prefix, const std::vector<int>& horizons, Index in,
                   Index out, Philox& rng) {
    for (int k : horizons) {
      Linear<S>::init(store, prefix + ".K" + std::to_string(k), in, out, rng);
    }
  }

  HorizonHeads(const ParamStore<S>& store, const std::string& prefix, const std::vector<int>& horizons, Index in,
               Index out)
      : in_(in), out_(out) {
    for (int k : horizons) {
      heads_.emplace(k, Linear<S>::bind(store, prefix + ".K" + std::to_string(k), in, out));
    }
  }

  const Linear<S>& head(int k) const {
    const auto it = heads_.find(k);
    if (it == heads_.end()) {
      throw std::invalid_argument("horizon K=" + std::to_string(k) + " is not configured");
    }
    return it->second;
  }

  /// W^K(ct) for a batch of context rows.
  Var<S> project(Tape<S>& t, Var<S> ct, int k) const { return head(k)(t, ct); }

  Index in_dim() const { return in_; }
  Index out_dim() const { return out_; }

 private:
  Index in_;
  Index out_;
  std::map<int, Linear<S>> heads_;
};

}  // namespace splitsee
