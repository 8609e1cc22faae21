#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace splitsee {

struct TcnConfig {
  std::vector<int> channels_per_layer{32, 32, 32};
  int kernel_size = 8;
  std::vector<int> dilations{1, 2, 4};
  int output_dim = 32;

  int receptive_field() const {
    int rf = 1;
    for (int d : dilations) {
      rf += (kernel_size - 1) * d;
    }
    return rf;
  }

  void validate(int window_len) const {
    if (channels_per_layer.empty() || channels_per_layer.size() != dilations.size()) {
      throw std::invalid_argument("tcn: need one dilation per layer and at least one layer");
    }
    if (kernel_size < 1) {
      throw std::invalid_argument("tcn: kernel_size must be positive");
    }
    for (std::size_t i = 0; i < dilations.size(); ++i) {
      if (dilations[i] < 1 || channels_per_layer[i] < 1) {
        throw std::invalid_argument("tcn: channels and dilations must be positive");
      }
    }
    if (channels_per_layer.back() != output_dim) {
      throw std::invalid_argument("tcn: last layer width " + std::to_string(channels_per_layer.back()) +
                                  " must equal output_dim " + std::to_string(output_dim));
    }
    if (receptive_field() > window_len) {
      throw std::invalid_argument("tcn: receptive field " + std::to_string(receptive_field()) +
                                  " exceeds window length " + std::to_string(window_len));
    }
  }
};

struct TransformerConfig {
  int token_dim = 32;
  int num_layers = 1;
  int num_heads = 4;
  int patch_count = 16;
  int context_dim = 32;
  int ff_multiplier = 2;

  void validate() const {
    if (token_dim < 1 || num_layers < 0 || num_heads < 1 || context_dim < 1 || ff_multiplier < 1) {
      throw std::invalid_argument("transformer: dimensions must be positive");
    }
    if (token_dim % num_heads != 0) {
      throw std::invalid_argument("transformer: token_dim " + std::to_string(token_dim) +
                                  " is not divisible by num_heads " + std::to_string(num_heads));
    }
  }
};

struct FreqConvConfig {
  int kernel_size = 7;
  int stride = 2;
  int output_dim = 32;

  /// B = floor((B_f - kernel)/stride) + 1.
  int downsampled_len(int spectrum_len) const {
    if (spectrum_len < kernel_size) {
      return 0;
    }
    return (spectrum_len - kernel_size) / stride + 1;
  }
};

/// Every shape and hyperparameter of the network and its pretraining heads.
struct ModelConfig {
  int window_len = 256;
  TcnConfig tcn;
  TransformerConfig temporal_transformer;
  FreqConvConfig freq_conv;
  TransformerConfig frequency_transformer;
  std::vector<int> horizons{2, 4, 8};
  int num_clusters = 16;
  int cluster_dim = 32;
  double nce_tau = 0.2;
  double cluster_tau = 0.1;
  double sinkhorn_epsilon = 0.05;
  int sinkhorn_iters = 3;

  int spectrum_len() const { return window_len / 2; }
  int freq_len() const { return freq_conv.downsampled_len(spectrum_len()); }
  int max_horizon() const { return *std::max_element(horizons.begin(), horizons.end()); }
  int context_dim() const { return temporal_transformer.context_dim; }
  int embedding_dim() const { return temporal_transformer.context_dim + frequency_transformer.context_dim; }

  /// Inclusive range of frequency token counts F drawn during pretraining.
  int min_freq_tokens() const { return std::max(2, (freq_len() + 1) / 2); }
  int max_freq_tokens() const { return freq_len() - max_horizon(); }
  /// F used on the inference path.
  int inference_freq_tokens() const { return max_freq_tokens(); }

  void validate() const {
    if (window_len < 16 || window_len % 2 != 0) {
      throw std::invalid_argument("model: window_len must be even and at least 16");
    }
    tcn.validate(window_len);
    temporal_transformer.validate();
    frequency_transformer.validate();
    if (temporal_transformer.patch_count < 1 || temporal_transformer.patch_count >= window_len) {
      throw std::invalid_argument("model: patch_count must lie in [1, window_len)");
    }
    if (temporal_transformer.context_dim != frequency_transformer.context_dim) {
      throw std::invalid_argument("model: temporal and frequency context dims must agree");
    }
    if (freq_conv.kernel_size < 1 || freq_conv.stride < 1 || freq_conv.output_dim < 1) {
      throw std::invalid_argument("model: frequency conv dimensions must be positive");
    }
    if (freq_len() < 4) {
      throw std::invalid_argument("model: downsampled frequency length " + std::to_string(freq_len()) +
                                  " is below 4");
    }
    if (horizons.empty()) {
      throw std::invalid_argument("model: horizon set is empty");
    }
    for (int k : horizons) {
      if (k <= 1 || temporal_transformer.patch_count + k > window_len) {
        throw std::invalid_argument("model: horizon " + std::to_string(k) + " violates 1 < K <= L - T");
      }
    }
    if (min_freq_tokens() > max_freq_tokens()) {
      throw std::invalid_argument("model: frequency length " + std::to_string(freq_len()) +
                                  " leaves no room for token counts with horizon " + std::to_string(max_horizon()));
    }
    if (num_clusters < 2) {
      throw std::invalid_argument("model: need at least 2 clusters");
    }
    if (cluster_dim < 1 || !(nce_tau > 0) || !(cluster_tau > 0) || !(sinkhorn_epsilon > 0) || sinkhorn_iters < 1) {
      throw std::invalid_argument("model: temperatures, epsilon and iteration counts must be positive");
    }
  }
};

// key=value text ------------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += (i ? "," : "") + std::to_string(v[i]);
  }
  return s;
}

inline std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) {
      out.push_back(std::stoi(item));
    }
  }
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline KeyValues parse_key_values(const std::string& text) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("line " + std::to_string(lineno) + ": expected key=value");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k + "=" + v + "\n";
  }
  return out;
}

inline void write_model_config(const ModelConfig& c, KeyValues& kv) {
  kv["model.window_len"] = std::to_string(c.window_len);
  kv["model.tcn.channels"] = join_ints(c.tcn.channels_per_layer);
  kv["model.tcn.kernel"] = std::to_string(c.tcn.kernel_size);
  kv["model.tcn.dilations"] = join_ints(c.tcn.dilations);
  kv["model.tcn.output_dim"] = std::to_string(c.tcn.output_dim);
  auto put_transformer = [&kv](const std::string& p, const TransformerConfig& t) {
    kv[p + ".token_dim"] = std::to_string(t.token_dim);
    kv[p + ".layers"] = std::to_string(t.num_layers);
    kv[p + ".heads"] = std::to_string(t.num_heads);
    kv[p + ".patches"] = std::to_string(t.patch_count);
    kv[p + ".context_dim"] = std::to_string(t.context_dim);
    kv[p + ".ff_multiplier"] = std::to_string(t.ff_multiplier);
  };
  put_transformer("model.ttrans", c.temporal_transformer);
  put_transformer("model.ftrans", c.frequency_transformer);
  kv["model.fconv.kernel"] = std::to_string(c.freq_conv.kernel_size);
  kv["model.fconv.stride"] = std::to_string(c.freq_conv.stride);
  kv["model.fconv.output_dim"] = std::to_string(c.freq_conv.output_dim);
  kv["model.horizons"] = join_ints(c.horizons);
  kv["model.clusters"] = std::to_string(c.num_clusters);
  kv["model.cluster_dim"] = std::to_string(c.cluster_dim);
  kv["model.nce_tau"] = format_double(c.nce_tau);
  kv["model.cluster_tau"] = format_double(c.cluster_tau);
  kv["model.sinkhorn_epsilon"] = format_double(c.sinkhorn_epsilon);
  kv["model.sinkhorn_iters"] = std::to_string(c.sinkhorn_iters);
}

inline ModelConfig read_model_config(const KeyValues& kv) {
  auto get = [&kv](const std::string& k) -> const std::string& {
    const auto it = kv.find(k);
    if (it == kv.end()) {
      throw std::invalid_argument("config snapshot lacks key " + k);
    }
    return it->second;
  };
  ModelConfig c;
  c.window_len = std::stoi(get("model.window_len"));
  c.tcn.channels_per_layer = split_ints(get("model.tcn.channels"));
  c.tcn.kernel_size = std::stoi(get("model.tcn.kernel"));
  c.tcn.dilations = split_ints(get("model.tcn.dilations"));
  c.tcn.output_dim = std::stoi(get("model.tcn.output_dim"));
  auto get_transformer = [&](const std::string& p) {
    TransformerConfig t;
    t.token_dim = std::stoi(get(p + ".token_dim"));
    t.num_layers = std::stoi(get(p + ".layers"));
    t.num_heads = std::stoi(get(p + ".heads"));
    t.patch_count = std::stoi(get(p + ".patches"));
    t.context_dim = std::stoi(get(p + ".context_dim"));
    t.ff_multiplier = std::stoi(get(p + ".ff_multiplier"));
    return t;
  };
  c.temporal_transformer = get_transformer("model.ttrans");
  c.frequency_transformer = get_transformer("model.ftrans");
  c.freq_conv.kernel_size = std::stoi(get("model.fconv.kernel"));
  c.freq_conv.stride = std::stoi(get("model.fconv.stride"));
  c.freq_conv.output_dim = std::stoi(get("model.fconv.output_dim"));
  c.horizons = split_ints(get("model.horizons"));
  c.num_clusters = std::stoi(get("model.clusters"));
  c.cluster_dim = std::stoi(get("model.cluster_dim"));
  c.nce_tau = std::stod(get("model.nce_tau"));
  c.cluster_tau = std::stod(get("model.cluster_tau"));
  c.sinkhorn_epsilon = std::stod(get("model.sinkhorn_epsilon"));
  c.sinkhorn_iters = std::stoi(get("model.sinkhorn_iters"));
  c.validate();
  return c;
}

}  // namespace splitsee
