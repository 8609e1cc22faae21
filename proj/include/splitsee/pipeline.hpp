#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitsee/autograd.hpp"
#include "splitsee/config.hpp"
#include "splitsee/io.hpp"
#include "splitsee/model.hpp"
#include "splitsee/optim.hpp"
#include "splitsee/rng.hpp"
#include "splitsee/signal.hpp"

namespace splitsee {

inline constexpr std::uint32_t kArtifactVersion = 1;
inline constexpr std::array<char, 4> kArtifactMagic = {'S', 'P', 'S', 'E'};

// RNG streams under the global seed.
inline constexpr std::uint64_t kStreamWeak = 0;
inline constexpr std::uint64_t kStreamStrong = 1;
inline constexpr std::uint64_t kStreamBatchDraw = 2;
inline constexpr std::uint64_t kStreamShuffle = 3;
inline constexpr std::uint64_t kStreamHeadInit = 4;
inline constexpr std::uint64_t kStreamFinetuneShuffle = 5;

struct TrainConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  int batch_size = 64;
  int epochs = 50;
  std::uint64_t seed = 0;
  double noise_fraction = 0.05;  // augmentation noise std relative to the window std
  unsigned threads = 1;

  void validate() const {
    model.validate();
    if (batch_size < 2) {
      throw std::invalid_argument("batch_size must be >= 2 (InfoNCE needs in-batch negatives), got " +
                                  std::to_string(batch_size));
    }
    if (epochs < 0) {
      throw std::invalid_argument("epochs must be nonnegative");
    }
    if (!std::isfinite(optimizer.learning_rate) || optimizer.learning_rate < 0.0) {
      throw std::invalid_argument("learning_rate must be finite and nonnegative");
    }
    if (!(noise_fraction >= 0.0) || !std::isfinite(noise_fraction)) {
      throw std::invalid_argument("noise_fraction must be finite and nonnegative");
    }
  }
};

inline void write_optimizer_config(const OptimizerConfig& o, KeyValues& kv) {
  kv["optimizer.kind"] = to_string(o.kind);
  kv["optimizer.lr"] = format_double(o.learning_rate);
  kv["optimizer.momentum"] = format_double(o.momentum);
  kv["optimizer.beta1"] = format_double(o.beta1);
  kv["optimizer.beta2"] = format_double(o.beta2);
  kv["optimizer.eps"] = format_double(o.eps);
}

inline OptimizerConfig read_optimizer_config(const KeyValues& kv) {
  auto get = [&kv](const std::string& k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) {
      throw std::invalid_argument("config snapshot lacks key " + k);
    }
    return it->second;
  };
  OptimizerConfig o;
  o.kind = parse_optimizer(get("optimizer.kind"));
  o.learning_rate = std::stod(get("optimizer.lr"));
  o.momentum = std::stod(get("optimizer.momentum"));
  o.beta1 = std::stod(get("optimizer.beta1"));
  o.beta2 = std::stod(get("optimizer.beta2"));
  o.eps = std::stod(get("optimizer.eps"));
  return o;
}

// Artifacts --------------------------------------------------------------------

struct Checkpoint {
  ModelConfig model;
  OptimizerConfig optimizer;
  std::uint64_t epoch = 0;
  std::uint64_t steps = 0;
  std::uint64_t seed = 0;
  ParamStore<float> params;
  ParamStore<float> optimizer_state;
};

/// Input-to-class-token parameters only.
struct EncoderHalf {
  ModelConfig model;
  ParamStore<float> params;
};

struct LinearHead {
  Matrix<float> weight;  // in x C
  Matrix<float> bias;    // 1 x C

  int num_classes() const { return static_cast<int>(weight.cols()); }
  int input_dim() const { return static_cast<int>(weight.rows()); }
};

struct Classifier {
  EncoderHalf encoder;
  LinearHead head;
};

/// Generic artifact layout: magic, version, parameter table, optimizer table,
/// length-prefixed key=value metadata, CRC32 of everything before it.
struct RawArtifact {
  KeyValues meta;
  ParamStore<float> params;
  ParamStore<float> state;
};

inline std::vector<std::uint8_t> encode_artifact(const RawArtifact& a) {
  ByteWriter w;
  w.put_bytes(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kArtifactMagic.data()), 4));
  w.put<std::uint32_t>(kArtifactVersion);
  write_tensor_table(w, a.params);
  write_tensor_table(w, a.state);
  w.put_string(format_key_values(a.meta));
  w.put_crc();
  return w.take();
}

inline RawArtifact decode_artifact(std::span<const std::uint8_t> bytes) {
  ByteReader r = open_checked(bytes, kArtifactMagic);
  const auto version = r.get<std::uint32_t>("format version");
  if (version != kArtifactVersion) {
    throw FormatError("unsupported format version " + std::to_string(version) + " (expected " +
                          std::to_string(kArtifactVersion) + ")",
                      4);
  }
  RawArtifact a;
  a.params = read_tensor_table(r);
  a.state = read_tensor_table(r);
  const std::size_t meta_at = r.position();
  try {
    a.meta = parse_key_values(r.get_string("metadata"));
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("bad metadata: ") + e.what(), meta_at);
  }
  if (r.remaining() != 0) {
    throw FormatError("trailing bytes after metadata", r.position());
  }
  return a;
}

inline const std::string& meta_get(const KeyValues& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) {
    throw std::invalid_argument("artifact metadata lacks key " + key);
  }
  return it->second;
}

/// Every tensor in `expected` must be present in `actual` with the same shape,
/// and `actual` may hold nothing else.
inline void require_same_layout(const ParamStore<float>& expected, const ParamStore<float>& actual,
                                const std::string& what) {
  if (expected.size() != actual.size()) {
    throw std::invalid_argument(what + ": expected " + std::to_string(expected.size()) + " tensors, found " +
                                std::to_string(actual.size()));
  }
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& e = expected.value(i);
    actual.id(expected.name(i), e.rows(), e.cols());
  }
}

inline ParamStore<float> encoder_subset(const ParamStore<float>& params) {
  ParamStore<float> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (is_encoder_param(params.name(i))) {
      out.add(params.name(i), params.value(i));
    }
  }
  return out;
}

inline std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  RawArtifact a{{}, c.params, c.optimizer_state};
  a.meta["kind"] = "checkpoint";
  a.meta["epoch"] = std::to_string(c.epoch);
  a.meta["steps"] = std::to_string(c.steps);
  a.meta["seed"] = std::to_string(c.seed);
  write_model_config(c.model, a.meta);
  write_optimizer_config(c.optimizer, a.meta);
  return encode_artifact(a);
}

inline std::vector<std::uint8_t> serialize(const EncoderHalf& e) {
  RawArtifact a{{}, e.params, {}};
  a.meta["kind"] = "encoder";
  write_model_config(e.model, a.meta);
  return encode_artifact(a);
}

inline std::vector<std::uint8_t> serialize(const Classifier& c) {
  RawArtifact a{{}, c.encoder.params, {}};
  a.params.add("head.weight", c.head.weight);
  a.params.add("head.bias", c.head.bias);
  a.meta["kind"] = "classifier";
  a.meta["num_classes"] = std::to_string(c.head.num_classes());
  write_model_config(c.encoder.model, a.meta);
  return encode_artifact(a);
}

inline void require_kind(const RawArtifact& a, const std::string& kind) {
  const auto& k = meta_get(a.meta, "kind");
  if (k != kind) {
    throw std::invalid_argument("artifact holds a " + k + ", expected a " + kind);
  }
}

inline Checkpoint checkpoint_from(RawArtifact a) {
  require_kind(a, "checkpoint");
  Checkpoint c;
  c.model = read_model_config(a.meta);
  c.optimizer = read_optimizer_config(a.meta);
  c.epoch = std::stoull(meta_get(a.meta, "epoch"));
  c.steps = std::stoull(meta_get(a.meta, "steps"));
  c.seed = std::stoull(meta_get(a.meta, "seed"));
  require_same_layout(init_model_params<float>(c.model, 0), a.params, "checkpoint parameters");
  c.params = std::move(a.params);
  Optimizer<float> probe(c.optimizer, c.params);
  require_same_layout(probe.export_state(c.params), a.state, "checkpoint optimizer state");
  c.optimizer_state = std::move(a.state);
  return c;
}

inline EncoderHalf encoder_from(RawArtifact a) {
  require_kind(a, "encoder");
  EncoderHalf e;
  e.model = read_model_config(a.meta);
  require_same_layout(encoder_subset(init_model_params<float>(e.model, 0)), a.params, "encoder parameters");
  e.params = std::move(a.params);
  return e;
}

inline Classifier classifier_from(RawArtifact a) {
  require_kind(a, "classifier");
  Classifier c;
  c.encoder.model = read_model_config(a.meta);
  const int classes = std::stoi(meta_get(a.meta, "num_classes"));
  ParamStore<float> expected = encoder_subset(init_model_params<float>(c.encoder.model, 0));
  expected.add("head.weight", Matrix<float>::Zero(c.encoder.model.embedding_dim(), classes));
  expected.add("head.bias", Matrix<float>::Zero(1, classes));
  require_same_layout(expected, a.params, "classifier parameters");
  c.head.weight = a.params.value("head.weight");
  c.head.bias = a.params.value("head.bias");
  c.encoder.params = encoder_subset(a.params);
  return c;
}

inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  return checkpoint_from(decode_artifact(bytes));
}
inline EncoderHalf deserialize_encoder(std::span<const std::uint8_t> bytes) {
  return encoder_from(decode_artifact(bytes));
}
inline Classifier deserialize_classifier(std::span<const std::uint8_t> bytes) {
  return classifier_from(decode_artifact(bytes));
}

template <class T>
void save_artifact(const T& artifact, const std::filesystem::path& path) {
  write_file_atomic(path, serialize(artifact));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}
inline Classifier load_classifier(const std::filesystem::path& path) {
  return deserialize_classifier(read_file_bytes(path));
}

/// Drops every pretraining-only tensor (horizon heads, clustering projection,
/// centroids) and the optimizer state.
inline EncoderHalf split_checkpoint(const Checkpoint& c) {
  require_same_layout(init_model_params<float>(c.model, 0), c.params, "checkpoint parameters");
  return EncoderHalf{c.model, encoder_subset(c.params)};
}

/// Encoder from any artifact kind: checkpoints are split, classifiers lose their head.
inline EncoderHalf load_encoder(const std::filesystem::path& path) {
  RawArtifact a = decode_artifact(read_file_bytes(path));
  const auto& kind = meta_get(a.meta, "kind");
  if (kind == "checkpoint") {
    return split_checkpoint(checkpoint_from(std::move(a)));
  }
  if (kind == "classifier") {
    return classifier_from(std::move(a)).encoder;
  }
  return encoder_from(std::move(a));
}

// Pretraining ------------------------------------------------------------------

struct EpochLoss {
  int epoch = 0;  // 1-based
  PretrainLossBreakdown mean;
};

inline std::string describe(const PretrainLossBreakdown& b) {
  std::ostringstream os;
  os << "l_tc_w=" << b.l_tc_w << " l_tc_s=" << b.l_tc_s << " l_fc_l=" << b.l_fc_l << " l_fc_h=" << b.l_fc_h
     << " l_dc=" << b.l_dc << " total=" << b.total;
  return os.str();
}

inline bool all_finite(const PretrainLossBreakdown& b) {
  return std::isfinite(b.l_tc_w) && std::isfinite(b.l_tc_s) && std::isfinite(b.l_fc_l) && std::isfinite(b.l_fc_h) &&
         std::isfinite(b.l_dc) && std::isfinite(b.total);
}

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, std::size_t batch, const PretrainLossBreakdown& b)
      : std::runtime_error("pretraining diverged at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch) + ": " + describe(b)),
        epoch_(epoch),
        batch_(batch),
        breakdown_(b) {}

  int epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }
  const PretrainLossBreakdown& breakdown() const { return breakdown_; }

 private:
  int epoch_;
  std::size_t batch_;
  PretrainLossBreakdown breakdown_;
};

inline std::string loss_curve_csv(const std::vector<EpochLoss>& curve) {
  std::string out = "epoch,l_tc_w,l_tc_s,l_fc_l,l_fc_h,l_dc,total\n";
  for (const auto& e : curve) {
    const auto& b = e.mean;
    out += std::to_string(e.epoch) + "," + format_double(b.l_tc_w) + "," + format_double(b.l_tc_s) + "," +
           format_double(b.l_fc_l) + "," + format_double(b.l_fc_h) + "," + format_double(b.l_dc) + "," +
           format_double(b.total) + "\n";
  }
  return out;
}

/// Weak view, strong view and clean spectrum for window `index` at `epoch`.
inline PretrainSample prepare_sample(std::span<const double> x, std::uint64_t index, int epoch,
                                     const TrainConfig& cfg) {
  AugmentConfig aug;
  aug.rng_seed = window_seed(cfg.seed, index, static_cast<std::uint64_t>(epoch));
  const double sigma = cfg.noise_fraction * stddev_of(x);
  aug.noise_sigma_weak = sigma;
  aug.noise_sigma_strong = sigma;
  PretrainSample s;
  s.weak = weak_augment(x, aug, kStreamWeak);
  s.strong = strong_augment(x, aug, kStreamStrong);
  s.spectrum = spectrum_of(x).magnitudes;
  return s;
}

inline BatchDraw draw_batch(const ModelConfig& model, std::uint64_t seed, int epoch, std::size_t batch) {
  Philox rng(window_seed(seed, batch, static_cast<std::uint64_t>(epoch)), kStreamBatchDraw);
  BatchDraw d;
  d.horizon = model.horizons[rng.uniform_int(model.horizons.size())];
  const int lo = model.min_freq_tokens();
  const int hi = model.max_freq_tokens();
  d.freq_tokens = lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
  return d;
}

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLoss> curve;
};

/// Self-supervised pretraining of every module under the combined objective.
/// Batches of fewer than two windows (a final remainder of one) are skipped.
inline PretrainResult pretrain(std::span<const std::vector<double>> windows, const TrainConfig& cfg,
                               const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  cfg.validate();
  if (windows.size() < 2) {
    throw std::invalid_argument("pretrain needs at least 2 windows, got " + std::to_string(windows.size()));
  }
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (static_cast<int>(windows[i].size()) != cfg.model.window_len) {
      throw std::invalid_argument("window " + std::to_string(i) + " has length " + std::to_string(windows[i].size()) +
                                  ", expected " + std::to_string(cfg.model.window_len));
    }
    require_finite(windows[i], "pretrain window");
  }

  PretrainResult result;
  Checkpoint& ck = result.checkpoint;
  ck.model = cfg.model;
  ck.optimizer = cfg.optimizer;
  ck.seed = cfg.seed;
  ck.params = init_model_params<float>(cfg.model, cfg.seed);
  Optimizer<float> opt(cfg.optimizer, ck.params);
  const std::size_t centroid_id = ck.params.id("cluster.centroids");
  const auto b = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Philox shuffle_rng(cfg.seed ^ (static_cast<std::uint64_t>(epoch) << 32), kStreamShuffle);
    const auto order = shuffle_rng.permutation(windows.size());
    PretrainLossBreakdown sum;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 1 < order.size(); start += b) {
      const std::size_t n = std::min(b, order.size() - start);
      if (n < 2) {
        break;
      }
      std::vector<PretrainSample> samples(n);
      parallel_for(n, cfg.threads, [&](std::size_t i) {
        const std::size_t idx = order[start + i];
        samples[i] = prepare_sample(windows[idx], idx, epoch, cfg);
      });
      const BatchDraw draw = draw_batch(cfg.model, cfg.seed, epoch, batches);
      auto r = pretrain_batch<float>(ck.params, cfg.model, samples, draw, true, cfg.threads);
      if (!all_finite(r.breakdown)) {
        throw DivergenceError(epoch + 1, batches, r.breakdown);
      }
      const Matrix<float> before = ck.params.value(centroid_id);
      opt.step(ck.params, r.grads);
      Matrix<float>& c = ck.params.value(centroid_id);
      for (Index row = 0; row < c.rows(); ++row) {
        if (c.row(row) != before.row(row)) {
          Matrix<float> one = c.row(row);
          normalize_rows_in_place(one);
          c.row(row) = one;
        }
      }
      sum.l_tc_w += r.breakdown.l_tc_w;
      sum.l_tc_s += r.breakdown.l_tc_s;
      sum.l_fc_l += r.breakdown.l_fc_l;
      sum.l_fc_h += r.breakdown.l_fc_h;
      sum.l_dc += r.breakdown.l_dc;
      sum.total += r.breakdown.total;
      ++batches;
    }
    const double inv = batches ? 1.0 / static_cast<double>(batches) : 0.0;
    EpochLoss e{epoch + 1,
                {sum.l_tc_w * inv, sum.l_tc_s * inv, sum.l_fc_l * inv, sum.l_fc_h * inv, sum.l_dc * inv,
                 sum.total * inv}};
    result.curve.push_back(e);
    ck.epoch = static_cast<std::uint64_t>(epoch + 1);
    if (on_epoch) {
      on_epoch(e);
    }
  }
  ck.steps = opt.steps();
  ck.optimizer_state = opt.export_state(ck.params);
  return result;
}

// Inference --------------------------------------------------------------------

inline std::vector<float> embed(const EncoderHalf& enc, std::span<const double> window) {
  Encoder<float> e(enc.params, enc.model);
  return e.embed(window, enc.params);
}

/// Class-token concatenation computed from the full pretraining parameter set.
inline std::vector<float> embed_full(const Checkpoint& c, std::span<const double> window) {
  Encoder<float> e(c.params, c.model);
  return e.embed(window, c.params);
}

/// N x 2*D_ct embedding matrix.
inline Matrix<float> embed_all(const EncoderHalf& enc, std::span<const std::vector<double>> windows,
                               unsigned threads = 1) {
  Encoder<float> e(enc.params, enc.model);
  Matrix<float> out(static_cast<Index>(windows.size()), enc.model.embedding_dim());
  parallel_for(windows.size(), threads, [&](std::size_t i) {
    const auto v = e.embed(windows[i], enc.params);
    out.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXf>(v.data(), static_cast<Index>(v.size()));
  });
  return out;
}

// Fine-tuning ------------------------------------------------------------------

enum class FinetuneMode { probe, full };

inline FinetuneMode parse_finetune_mode(const std::string& s) {
  if (s == "probe") {
    return FinetuneMode::probe;
  }
  if (s == "full") {
    return FinetuneMode::full;
  }
  throw std::invalid_argument("unknown fine-tuning mode '" + s + "' (expected probe or full)");
}

struct FinetuneConfig {
  int epochs = 1;
  int batch_size = 16;
  OptimizerConfig optimizer{OptimizerKind::adam, 1e-2};
  FinetuneMode mode = FinetuneMode::probe;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

inline LinearHead init_linear_head(int input_dim, int num_classes, std::uint64_t seed) {
  Philox rng(seed, kStreamHeadInit);
  LinearHead h;
  h.weight = fan_in_uniform<float>(input_dim, num_classes, input_dim, rng);
  h.bias = fan_in_uniform<float>(1, num_classes, input_dim, rng);
  return h;
}

inline void check_labels(std::span<const int> labels, int num_classes, std::size_t expected) {
  if (labels.size() != expected) {
    throw std::invalid_argument("got " + std::to_string(labels.size()) + " labels for " + std::to_string(expected) +
                                " windows");
  }
  if (num_classes < 2) {
    throw std::invalid_argument("fine-tuning needs num_classes >= 2");
  }
  std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw std::invalid_argument("window " + std::to_string(i) + " has label " + std::to_string(labels[i]) +
                                  "; fine-tuning needs labels in [0, " + std::to_string(num_classes) + ")");
    }
    seen[static_cast<std::size_t>(labels[i])] = true;
  }
  if (std::count(seen.begin(), seen.end(), true) < 2) {
    throw std::invalid_argument("training set contains a single class");
  }
}

inline Matrix<float> one_hot_rows(std::span<const int> labels, std::span<const std::size_t> rows, int num_classes) {
  Matrix<float> t = Matrix<float>::Zero(static_cast<Index>(rows.size()), num_classes);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    t(static_cast<Index>(i), labels[rows[i]]) = 1.0f;
  }
  return t;
}

/// Per-column shift and scale taking the training features to zero mean and
/// unit variance. Constant columns keep scale 1.
struct FeatureScaling {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd inv_std;

  static FeatureScaling fit(const Matrix<float>& x) {
    const Matrix<double> xd = x.cast<double>();
    FeatureScaling s;
    s.mean = xd.colwise().mean();
    s.inv_std.resize(x.cols());
    for (Index c = 0; c < x.cols(); ++c) {
      const double var = (xd.col(c).array() - s.mean(c)).square().mean();
      s.inv_std(c) = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
    }
    return s;
  }

  Matrix<float> apply(const Matrix<float>& x) const {
    Matrix<double> xd = x.cast<double>();
    xd.rowwise() -= mean;
    xd.array().rowwise() *= inv_std.array();
    return xd.cast<float>();
  }

  /// Head on scaled features -> equivalent head on raw features.
  LinearHead fold(const LinearHead& h) const {
    const Matrix<double> w = h.weight.cast<double>();
    Matrix<double> w_raw = inv_std.transpose().asDiagonal() * w;
    Matrix<double> b_raw = h.bias.cast<double>() - mean * w_raw;
    return LinearHead{w_raw.cast<float>(), b_raw.cast<float>()};
  }
};

/// Cross-entropy training of a linear head on fixed features (N x in). The
/// head is trained on standardized features and returned folded back into a
/// single affine map on the raw features; with zero epochs it is the
/// deterministic initialization, unfolded.
inline LinearHead fit_linear_head(const Matrix<float>& raw_features, std::span<const int> labels, int num_classes,
                                  const FinetuneConfig& cfg) {
  check_labels(labels, num_classes, static_cast<std::size_t>(raw_features.rows()));
  if (cfg.batch_size < 1) {
    throw std::invalid_argument("batch_size must be >= 1");
  }
  LinearHead head = init_linear_head(static_cast<int>(raw_features.cols()), num_classes, cfg.seed);
  if (cfg.epochs == 0) {
    return head;
  }
  const FeatureScaling scaling = FeatureScaling::fit(raw_features);
  const Matrix<float> features = scaling.apply(raw_features);
  ParamStore<float> store;
  const auto w = store.add("head.weight", head.weight);
  const auto bias = store.add("head.bias", head.bias);
  Optimizer<float> opt(cfg.optimizer, store);
  const auto n = static_cast<std::size_t>(features.rows());
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Philox rng(cfg.seed ^ (static_cast<std::uint64_t>(epoch) << 32), kStreamFinetuneShuffle);
    const auto order = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::span<const std::size_t> rows(order.data() + start, std::min(bs, n - start));
      Matrix<float> x(static_cast<Index>(rows.size()), features.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        x.row(static_cast<Index>(i)) = features.row(static_cast<Index>(rows[i]));
      }
      Tape<float> t(&store);
      Var<float> logits = affine(t.constant(std::move(x)), t.param(w), t.param(bias));
      t.backward(soft_cross_entropy(logits, one_hot_rows(labels, rows, num_classes)));
      opt.step(store, t.param_grads());
    }
  }
  head.weight = store.value(w);
  head.bias = store.value(bias);
  return scaling.fold(head);
}

struct FinetuneResult {
  LinearHead head;
  EncoderHalf encoder;
};

/// Trains the linear classifier on embed() outputs. Probe mode keeps the
/// encoder frozen; full mode updates it jointly with the head.
inline FinetuneResult finetune(const EncoderHalf& enc, std::span<const std::vector<double>> windows,
                               std::span<const int> labels, int num_classes, const FinetuneConfig& cfg) {
  check_labels(labels, num_classes, windows.size());
  if (cfg.mode == FinetuneMode::probe) {
    const Matrix<float> features = embed_all(enc, windows, cfg.threads);
    return FinetuneResult{fit_linear_head(features, labels, num_classes, cfg), enc};
  }

  if (cfg.batch_size < 1) {
    throw std::invalid_argument("batch_size must be >= 1");
  }
  LinearHead head = init_linear_head(enc.model.embedding_dim(), num_classes, cfg.seed);
  ParamStore<float> store = enc.params;
  const auto w = store.add("head.weight", head.weight);
  const auto bias = store.add("head.bias", head.bias);
  Optimizer<float> opt(cfg.optimizer, store);
  Encoder<float> encoder(store, enc.model);
  const auto n = windows.size();
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Philox rng(cfg.seed ^ (static_cast<std::uint64_t>(epoch) << 32), kStreamFinetuneShuffle);
    const auto order = rng.permutation(n);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t m = std::min(bs, n - start);
      std::vector<std::vector<Matrix<float>>> grads(m);
      parallel_for(m, cfg.threads, [&](std::size_t i) {
        const std::size_t idx = order[start + i];
        Tape<float> t(&store);
        Var<float> logits = affine(encoder.embed(t, windows[idx]), t.param(w), t.param(bias));
        const std::size_t row[] = {idx};
        Var<float> loss = soft_cross_entropy(logits, one_hot_rows(labels, row, num_classes));
        t.seed(loss, Matrix<float>::Constant(1, 1, 1.0f / static_cast<float>(m)));
        t.run_backward();
        grads[i] = t.param_grads();
      });
      std::vector<Matrix<float>> total(store.size());
      for (const auto& g : grads) {
        for (std::size_t p = 0; p < g.size(); ++p) {
          if (g[p].size() == 0) {
            continue;
          }
          if (total[p].size() == 0) {
            total[p] = g[p];
          } else {
            total[p] += g[p];
          }
        }
      }
      opt.step(store, total);
    }
  }
  FinetuneResult r;
  r.head.weight = store.value(w);
  r.head.bias = store.value(bias);
  r.encoder.model = enc.model;
  for (std::size_t i = 0; i < enc.params.size(); ++i) {
    r.encoder.params.add(enc.params.name(i), store.value(i));
  }
  return r;
}

// Prediction -------------------------------------------------------------------

struct Predictions {
  std::vector<int> classes;
  Matrix<double> scores;  // N x C logits
};

/// Index of the largest entry; ties go to the lower index.
inline int argmax_lower(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  int best = 0;
  for (Index j = 1; j < row.size(); ++j) {
    if (row(j) > row(best)) {
      best = static_cast<int>(j);
    }
  }
  return best;
}

inline Predictions predict_features(const LinearHead& head, const Matrix<float>& features) {
  if (features.cols() != head.input_dim()) {
    throw std::invalid_argument("feature width " + std::to_string(features.cols()) + " does not match head input " +
                                std::to_string(head.input_dim()));
  }
  if (head.bias.rows() != 1 || head.bias.cols() != head.weight.cols()) {
    throw std::invalid_argument("head bias shape disagrees with its weight");
  }
  // Row at a time in a fixed summation order, so a window scores the same in any batch.
  const Matrix<double> w = head.weight.cast<double>();
  Predictions p;
  p.scores.resize(features.rows(), head.weight.cols());
  for (Index i = 0; i < features.rows(); ++i) {
    for (Index c = 0; c < w.cols(); ++c) {
      double acc = head.bias(0, c);
      for (Index j = 0; j < w.rows(); ++j) {
        acc += static_cast<double>(features(i, j)) * w(j, c);
      }
      p.scores(i, c) = acc;
    }
  }
  p.classes.resize(static_cast<std::size_t>(features.rows()));
  for (Index i = 0; i < features.rows(); ++i) {
    p.classes[static_cast<std::size_t>(i)] = argmax_lower(p.scores.row(i));
  }
  return p;
}

inline Predictions predict(const EncoderHalf& enc, const LinearHead& head, std::span<const std::vector<double>> windows,
                           unsigned threads = 1) {
  return predict_features(head, embed_all(enc, windows, threads));
}

}  // namespace splitsee
