#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "splitsee/config.hpp"
#include "splitsee/datahub.hpp"
#include "splitsee/pipeline.hpp"

namespace splitsee {

struct MetricReport {
  int num_classes = 0;
  double accuracy = 0.0;
  double sensitivity = 0.0;  // binary: recall of class 1; otherwise macro recall
  double specificity = 0.0;  // binary: recall of class 0; otherwise macro one-vs-rest specificity
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::vector<std::vector<std::uint64_t>> confusion;  // [true][predicted]

  std::string to_text() const {
    KeyValues kv;
    kv["num_classes"] = std::to_string(num_classes);
    kv["accuracy"] = format_double(accuracy);
    kv["sensitivity"] = format_double(sensitivity);
    kv["specificity"] = format_double(specificity);
    kv["macro_f1"] = format_double(macro_f1);
    for (std::size_t c = 0; c < per_class_f1.size(); ++c) {
      kv["f1." + std::to_string(c)] = format_double(per_class_f1[c]);
      std::string row;
      for (std::size_t p = 0; p < confusion[c].size(); ++p) {
        row += (p ? "," : "") + std::to_string(confusion[c][p]);
      }
      kv["confusion." + std::to_string(c)] = row;
    }
    return format_key_values(kv);
  }
};

inline double safe_ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

inline MetricReport compute_metrics(std::span<const int> preds, std::span<const int> labels, int num_classes) {
  if (preds.size() != labels.size()) {
    throw std::invalid_argument("got " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(labels.size()) + " labels");
  }
  if (preds.empty()) {
    throw std::invalid_argument("metrics need at least one prediction");
  }
  if (num_classes < 2) {
    throw std::invalid_argument("metrics need num_classes >= 2");
  }
  MetricReport m;
  m.num_classes = num_classes;
  const auto k = static_cast<std::size_t>(num_classes);
  m.confusion.assign(k, std::vector<std::uint64_t>(k, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (int v : {labels[i], preds[i]}) {
      if (v < 0 || v >= num_classes) {
        throw std::invalid_argument("class index " + std::to_string(v) + " at position " + std::to_string(i) +
                                    " is outside [0, " + std::to_string(num_classes) + ")");
      }
    }
    ++m.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
  }
  const auto n = static_cast<double>(preds.size());
  double correct = 0.0;
  std::vector<double> recall(k);
  std::vector<double> spec(k);
  m.per_class_f1.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    double tp = static_cast<double>(m.confusion[c][c]);
    double support = 0.0;
    double predicted = 0.0;
    for (std::size_t o = 0; o < k; ++o) {
      support += static_cast<double>(m.confusion[c][o]);
      predicted += static_cast<double>(m.confusion[o][c]);
    }
    correct += tp;
    const double fp = predicted - tp;
    const double fn = support - tp;
    const double tn = n - tp - fp - fn;
    recall[c] = safe_ratio(tp, support);
    spec[c] = safe_ratio(tn, tn + fp);
    m.per_class_f1[c] = safe_ratio(2.0 * tp, 2.0 * tp + fp + fn);
  }
  m.accuracy = correct / n;
  double f1_sum = 0.0;
  for (double f : m.per_class_f1) {
    f1_sum += f;
  }
  m.macro_f1 = f1_sum / static_cast<double>(k);
  if (num_classes == 2) {
    m.sensitivity = recall[1];
    m.specificity = recall[0];
  } else {
    double r = 0.0;
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      r += recall[c];
      s += spec[c];
    }
    m.sensitivity = r / static_cast<double>(k);
    m.specificity = s / static_cast<double>(k);
  }
  return m;
}

struct ChannelStats {
  std::vector<double> per_channel_accuracy;
  double mean = 0.0;
  double variance = 0.0;         // population variance of the raw accuracies
  double variance_scaled = 0.0;  // variance x 1e4 (accuracy in percentage points)
  double spread = 0.0;           // max - min

  std::string to_text() const {
    KeyValues kv;
    for (std::size_t c = 0; c < per_channel_accuracy.size(); ++c) {
      kv["accuracy." + std::to_string(c)] = format_double(per_channel_accuracy[c]);
    }
    kv["mean"] = format_double(mean);
    kv["variance"] = format_double(variance);
    kv["variance_x1e4"] = format_double(variance_scaled);
    kv["spread"] = format_double(spread);
    return format_key_values(kv);
  }
};

inline ChannelStats channel_stats(std::span<const double> accuracies) {
  if (accuracies.size() < 2) {
    throw std::invalid_argument("channel statistics need at least 2 channels, got " +
                                std::to_string(accuracies.size()));
  }
  ChannelStats s;
  s.per_channel_accuracy.assign(accuracies.begin(), accuracies.end());
  const auto n = static_cast<double>(accuracies.size());
  double sum = 0.0;
  for (double a : accuracies) {
    if (!std::isfinite(a)) {
      throw std::invalid_argument("channel accuracy is not finite");
    }
    sum += a;
  }
  s.mean = sum / n;
  double sq = 0.0;
  for (double a : accuracies) {
    sq += (a - s.mean) * (a - s.mean);
  }
  s.variance = sq / n;
  s.variance_scaled = s.variance * 1e4;
  const auto [lo, hi] = std::minmax_element(accuracies.begin(), accuracies.end());
  s.spread = *hi - *lo;
  s.mean = std::clamp(s.mean, *lo, *hi);
  return s;
}

/// Header "label,dim_0,...", then one row per window: label (-1 if unlabeled)
/// and the embedding at 17 significant digits.
inline std::string embeddings_csv(const Matrix<float>& emb, std::span<const std::int32_t> labels) {
  if (static_cast<std::size_t>(emb.rows()) != labels.size()) {
    throw std::invalid_argument("embedding rows and labels disagree");
  }
  std::ostringstream os;
  os.precision(17);
  os << "label";
  for (Index d = 0; d < emb.cols(); ++d) {
    os << ",dim_" << d;
  }
  os << '\n';
  for (Index i = 0; i < emb.rows(); ++i) {
    os << labels[static_cast<std::size_t>(i)];
    for (Index d = 0; d < emb.cols(); ++d) {
      os << ',' << static_cast<double>(emb(i, d));
    }
    os << '\n';
  }
  return os.str();
}

inline void export_embeddings(const EncoderHalf& enc, const WindowSet& ws, const std::filesystem::path& path,
                              unsigned threads = 1) {
  const Matrix<float> emb = embed_all(enc, ws.all_windows(), threads);
  try {
    write_text_atomic(path, embeddings_csv(emb, ws.labels));
  } catch (const std::exception& e) {
    throw std::runtime_error("cannot write embeddings to " + path.string() + ": " + e.what());
  }
}

}  // namespace splitsee
