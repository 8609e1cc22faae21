#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "splitsee/datahub.hpp"
#include "splitsee/evalkit.hpp"
#include "splitsee/pipeline.hpp"

namespace fs = std::filesystem;
using namespace splitsee;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Globals {
  std::uint64_t seed = 0;
  std::string out;
  unsigned threads = 1;
};

/// Which windows of a data file a command sees.
struct SubsetOptions {
  std::string subset = "all";
  std::uint64_t split_seed = 0;

  void add(CLI::App* cmd) {
    cmd->add_option("--subset", subset, "Windows to use: all, train, val, test or trainval")
        ->check(CLI::IsMember({"all", "train", "val", "test", "trainval"}))
        ->capture_default_str();
    cmd->add_option("--split-seed", split_seed, "Seed of the stratified 64/16/20 split")->capture_default_str();
  }

  std::vector<std::size_t> indices(const WindowSet& ws) const {
    if (subset == "all") {
      std::vector<std::size_t> all(ws.size());
      for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
      }
      return all;
    }
    const Splits s = make_splits(ws, SplitSpec{0.2, 0.2, split_seed});
    if (subset == "train") {
      return s.train;
    }
    if (subset == "val") {
      return s.val;
    }
    if (subset == "test") {
      return s.test;
    }
    std::vector<std::size_t> tv = s.train;
    tv.insert(tv.end(), s.val.begin(), s.val.end());
    std::sort(tv.begin(), tv.end());
    return tv;
  }

  void record(KeyValues& kv) const {
    kv["config.subset"] = subset;
    kv["config.split_seed"] = std::to_string(split_seed);
  }
};

void add_list(CLI::App* cmd, const std::string& name, std::vector<int>& target, const std::string& help) {
  cmd->add_option(name, target, help)
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll)
      ->capture_default_str();
}

void add_model_options(CLI::App* cmd, ModelConfig& m) {
  add_list(cmd, "--tcn-channels", m.tcn.channels_per_layer, "TCN channels per layer (last = feature dim)");
  cmd->add_option("--tcn-kernel", m.tcn.kernel_size, "TCN kernel size")->capture_default_str();
  add_list(cmd, "--tcn-dilations", m.tcn.dilations, "TCN dilation per layer");
  cmd->add_option("--fconv-kernel", m.freq_conv.kernel_size, "Spectrum conv kernel size")->capture_default_str();
  cmd->add_option("--fconv-stride", m.freq_conv.stride, "Spectrum conv stride")->capture_default_str();
  cmd->add_option("--fconv-dim", m.freq_conv.output_dim, "Spectrum conv feature dim")->capture_default_str();
  cmd->add_option("--token-dim", m.temporal_transformer.token_dim, "Transformer width")->capture_default_str();
  cmd->add_option("--layers", m.temporal_transformer.num_layers, "Transformer blocks")->capture_default_str();
  cmd->add_option("--heads", m.temporal_transformer.num_heads, "Attention heads")->capture_default_str();
  cmd->add_option("--patches", m.temporal_transformer.patch_count, "Temporal patch count T")->capture_default_str();
  cmd->add_option("--context-dim", m.temporal_transformer.context_dim, "Class-token output dim")
      ->capture_default_str();
  add_list(cmd, "--horizons", m.horizons, "Prediction horizons K");
  cmd->add_option("--clusters", m.num_clusters, "Number of centroids J")->capture_default_str();
  cmd->add_option("--cluster-dim", m.cluster_dim, "Centroid dimension")->capture_default_str();
  cmd->add_option("--nce-tau", m.nce_tau, "InfoNCE temperature")->capture_default_str();
  cmd->add_option("--cluster-tau", m.cluster_tau, "Clustering temperature")->capture_default_str();
  cmd->add_option("--sinkhorn-eps", m.sinkhorn_epsilon, "Sinkhorn entropy weight")->capture_default_str();
  cmd->add_option("--sinkhorn-iters", m.sinkhorn_iters, "Sinkhorn iterations")->capture_default_str();
}

void add_optimizer_options(CLI::App* cmd, OptimizerConfig& o, std::string& kind) {
  cmd->add_option("--optimizer", kind, "sgd, momentum or adam")
      ->check(CLI::IsMember({"sgd", "momentum", "adam"}))
      ->capture_default_str();
  cmd->add_option("--lr", o.learning_rate, "Learning rate")->capture_default_str();
  cmd->add_option("--momentum", o.momentum, "Momentum coefficient")->capture_default_str();
}

/// Derived fields: the TCN feature dim is its last layer width, and the
/// frequency transformer mirrors the temporal one except for its patch count.
void resolve_model(ModelConfig& m) {
  if (!m.tcn.channels_per_layer.empty()) {
    m.tcn.output_dim = m.tcn.channels_per_layer.back();
  }
  const int patches = m.frequency_transformer.patch_count;
  m.frequency_transformer = m.temporal_transformer;
  m.frequency_transformer.patch_count = patches;
}

fs::path require_out(const Globals& g, const char* command) {
  if (g.out.empty()) {
    throw CLI::RequiredError(std::string("--out (required by ") + command + ")");
  }
  return g.out;
}

class Manifest {
 public:
  Manifest(std::string command, const Globals& g) : start_(std::chrono::steady_clock::now()) {
    kv_["command"] = std::move(command);
    kv_["code_version"] = kVersion;
    kv_["seed"] = std::to_string(g.seed);
    kv_["threads"] = std::to_string(g.threads);
  }

  KeyValues& values() { return kv_; }

  void input(const std::string& key, const fs::path& p) { kv_["input." + key] = p.string(); }
  void output(const std::string& key, const fs::path& p) { kv_["output." + key] = p.string(); }

  /// Written next to the primary artifact as <artifact>.manifest.
  void write_next_to(const fs::path& artifact) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    kv_["wall_clock_seconds"] = format_double(secs);
    fs::path p = artifact;
    p += ".manifest";
    write_text_atomic(p, format_key_values(kv_));
  }

 private:
  KeyValues kv_;
  std::chrono::steady_clock::time_point start_;
};

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) {
    fs::create_directories(p.parent_path());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised split temporal/frequency encoder for single-channel signals"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_config("--config", "", "key=value file; keys are option names, subcommand options as <cmd>.<name>");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.fallthrough();
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", kVersion);

  Globals g;
  app.add_option("--seed", g.seed, "Global seed")->capture_default_str();
  app.add_option("--out", g.out, "Output path");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::Range(1u, 1024u))->capture_default_str();

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic labeled window file");
  SynthSpec ss;
  std::vector<double> freqs;
  synth->add_option("--classes", ss.num_classes, "Number of classes")->capture_default_str();
  synth->add_option("--per-class", ss.windows_per_class, "Windows per class")->capture_default_str();
  synth->add_option("--len", ss.length, "Window length L")->capture_default_str();
  synth->add_option("--rate", ss.sampling_rate_hz, "Sampling rate in Hz")->capture_default_str();
  synth->add_option("--freqs", freqs, "Burst frequency per class in Hz (default 10,25 or 4,8,12,20,30)")
      ->delimiter(',')
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  synth->add_option("--burst-fraction", ss.burst_duration_fraction, "Burst length as a fraction of L")
      ->capture_default_str();
  synth->add_option("--amplitude", ss.burst_amplitude, "Burst amplitude")->capture_default_str();
  synth->add_option("--noise", ss.noise_sigma, "Background noise std")->capture_default_str();
  synth->add_option("--channel", ss.channel_id, "Channel id stored in the file")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining; writes checkpoint, loss curve, manifest");
  TrainConfig tc;
  std::string pre_opt = "adam";
  std::string pre_data;
  SubsetOptions pre_subset;
  pre->add_option("--data", pre_data, "Window file")->required();
  pre->add_option("--epochs", tc.epochs, "Epochs")->capture_default_str();
  pre->add_option("--batch", tc.batch_size, "Batch size (>= 2)")->capture_default_str();
  pre->add_option("--noise-fraction", tc.noise_fraction, "Augmentation noise std relative to window std")
      ->capture_default_str();
  add_optimizer_options(pre, tc.optimizer, pre_opt);
  add_model_options(pre, tc.model);
  pre_subset.add(pre);

  // finetune
  auto* fin = app.add_subcommand("finetune", "Train the linear classifier on a split encoder");
  FinetuneConfig fc;
  std::string fin_opt = "adam";
  std::string fin_mode = "probe";
  std::string fin_model;
  std::string fin_data;
  SubsetOptions fin_subset;
  fin->add_option("--model", fin_model, "Checkpoint or encoder file")->required();
  fin->add_option("--data", fin_data, "Labeled window file")->required();
  fin->add_option("--epochs", fc.epochs, "Epochs")->capture_default_str();
  fin->add_option("--batch", fc.batch_size, "Batch size")->capture_default_str();
  fin->add_option("--mode", fin_mode, "probe (frozen encoder) or full")
      ->check(CLI::IsMember({"probe", "full"}))
      ->capture_default_str();
  add_optimizer_options(fin, fc.optimizer, fin_opt);
  fin_subset.add(fin);

  // eval
  auto* ev = app.add_subcommand("eval", "Score a classifier; writes a key=value metric report");
  std::string ev_model;
  std::string ev_data;
  SubsetOptions ev_subset;
  ev->add_option("--model", ev_model, "Classifier file")->required();
  ev->add_option("--data", ev_data, "Labeled window file")->required();
  ev_subset.add(ev);

  // export-embeddings
  auto* ex = app.add_subcommand("export-embeddings", "Write label + embedding rows as CSV");
  std::string ex_model;
  std::string ex_data;
  SubsetOptions ex_subset;
  ex->add_option("--model", ex_model, "Checkpoint, encoder or classifier file")->required();
  ex->add_option("--data", ex_data, "Window file")->required();
  ex_subset.add(ex);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (synth->parsed()) {
      const fs::path out = require_out(g, "synth");
      ss.seed = g.seed;
      ss.frequencies_hz = freqs;
      const WindowSet ws = generate_synthetic(ss);
      Manifest m("synth", g);
      auto& kv = m.values();
      kv["config.classes"] = std::to_string(ss.num_classes);
      kv["config.per_class"] = std::to_string(ss.windows_per_class);
      kv["config.len"] = std::to_string(ss.length);
      kv["config.rate"] = format_double(ss.sampling_rate_hz);
      std::string fs_str;
      for (double f : ss.resolved_frequencies()) {
        fs_str += (fs_str.empty() ? "" : ",") + format_double(f);
      }
      kv["config.freqs"] = fs_str;
      kv["config.burst_fraction"] = format_double(ss.burst_duration_fraction);
      kv["config.amplitude"] = format_double(ss.burst_amplitude);
      kv["config.noise"] = format_double(ss.noise_sigma);
      kv["config.channel"] = std::to_string(ss.channel_id);
      kv["windows"] = std::to_string(ws.size());
      ensure_parent(out);
      save_windows(ws, out);
      m.output("windows", out);
      m.write_next_to(out);
      std::cout << "wrote " << ws.size() << " windows to " << out.string() << "\n";
      return 0;
    }

    if (pre->parsed()) {
      const fs::path out = require_out(g, "pretrain");
      const WindowSet ws = load_windows(pre_data);
      const auto idx = pre_subset.indices(ws);
      tc.seed = g.seed;
      tc.threads = g.threads;
      tc.optimizer.kind = parse_optimizer(pre_opt);
      tc.model.window_len = static_cast<int>(ws.length);
      resolve_model(tc.model);
      fs::path curve_path = out;
      curve_path += ".loss.csv";
      Manifest m("pretrain", g);
      auto& kv = m.values();
      write_model_config(tc.model, kv);
      write_optimizer_config(tc.optimizer, kv);
      kv["config.epochs"] = std::to_string(tc.epochs);
      kv["config.batch"] = std::to_string(tc.batch_size);
      kv["config.noise_fraction"] = format_double(tc.noise_fraction);
      pre_subset.record(kv);
      m.input("data", pre_data);

      PretrainResult r;
      try {
        r = pretrain(ws.windows(idx), tc, [](const EpochLoss& e) {
          std::cout << "epoch " << e.epoch << " " << describe(e.mean) << "\n" << std::flush;
        });
      } catch (const DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
      }
      ensure_parent(out);
      save_artifact(r.checkpoint, out);
      write_text_atomic(curve_path, loss_curve_csv(r.curve));
      m.output("checkpoint", out);
      m.output("loss_curve", curve_path);
      m.write_next_to(out);
      std::cout << "wrote " << out.string() << " and " << curve_path.string() << "\n";
      return 0;
    }

    if (fin->parsed()) {
      const fs::path out = require_out(g, "finetune");
      const EncoderHalf enc = load_encoder(fin_model);
      const WindowSet ws = load_windows(fin_data);
      const auto idx = fin_subset.indices(ws);
      const auto labels = ws.labels_at(idx);
      for (int l : labels) {
        if (l < 0) {
          throw std::invalid_argument("finetune needs labeled windows; " + fin_data + " contains unlabeled ones");
        }
      }
      const int classes = ws.num_classes();
      fc.seed = g.seed;
      fc.threads = g.threads;
      fc.mode = parse_finetune_mode(fin_mode);
      fc.optimizer.kind = parse_optimizer(fin_opt);
      const FinetuneResult r = finetune(enc, ws.windows(idx), labels, classes, fc);
      Manifest m("finetune", g);
      auto& kv = m.values();
      write_optimizer_config(fc.optimizer, kv);
      kv["config.epochs"] = std::to_string(fc.epochs);
      kv["config.batch"] = std::to_string(fc.batch_size);
      kv["config.mode"] = fin_mode;
      kv["num_classes"] = std::to_string(classes);
      fin_subset.record(kv);
      m.input("model", fin_model);
      m.input("data", fin_data);
      ensure_parent(out);
      save_artifact(Classifier{r.encoder, r.head}, out);
      m.output("classifier", out);
      m.write_next_to(out);
      std::cout << "wrote " << out.string() << "\n";
      return 0;
    }

    if (ev->parsed()) {
      const fs::path out = require_out(g, "eval");
      const Classifier clf = load_classifier(ev_model);
      const WindowSet ws = load_windows(ev_data);
      if (ws.num_classes() != clf.head.num_classes()) {
        throw std::invalid_argument("classifier has " + std::to_string(clf.head.num_classes()) +
                                    " classes but the data has " + std::to_string(ws.num_classes()));
      }
      const auto idx = ev_subset.indices(ws);
      const auto labels = ws.labels_at(idx);
      const Predictions p = predict(clf.encoder, clf.head, ws.windows(idx), g.threads);
      const MetricReport report = compute_metrics(p.classes, labels, clf.head.num_classes());
      Manifest m("eval", g);
      ev_subset.record(m.values());
      m.input("model", ev_model);
      m.input("data", ev_data);
      ensure_parent(out);
      write_text_atomic(out, report.to_text());
      m.output("report", out);
      m.write_next_to(out);
      std::cout << report.to_text();
      return 0;
    }

    if (ex->parsed()) {
      const fs::path out = require_out(g, "export-embeddings");
      const EncoderHalf enc = load_encoder(ex_model);
      const WindowSet ws = load_windows(ex_data);
      const auto idx = ex_subset.indices(ws);
      std::vector<std::int32_t> labels;
      for (std::size_t i : idx) {
        labels.push_back(ws.labels[i]);
      }
      const Matrix<float> emb = embed_all(enc, ws.windows(idx), g.threads);
      Manifest m("export-embeddings", g);
      ex_subset.record(m.values());
      m.input("model", ex_model);
      m.input("data", ex_data);
      ensure_parent(out);
      try {
        write_text_atomic(out, embeddings_csv(emb, labels));
      } catch (const std::exception& e) {
        throw std::runtime_error("cannot write embeddings to " + out.string() + ": " + e.what());
      }
      m.output("embeddings", out);
      m.write_next_to(out);
      std::cout << "wrote " << idx.size() << " embeddings to " << out.string() << "\n";
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.get_subcommands().front()->help();
    return e.get_exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
