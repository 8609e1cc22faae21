#include <gtest/gtest.h>

#include <cstring>

#include "fixtures.hpp"
#include "splitsee/frequency_encoder.hpp"
#include "splitsee/io.hpp"
#include "splitsee/pipeline.hpp"
#include "splitsee/temporal_encoder.hpp"

using namespace splitsee;

namespace {

TrainConfig tiny_train(int epochs, std::uint64_t seed = 3) {
  TrainConfig cfg;
  cfg.model = fixtures::tiny_model();
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.seed = seed;
  return cfg;
}

const PretrainResult& trained() {
  static const PretrainResult r = [] {
    const auto ws = fixtures::random_windows(64, 32, 4);
    return pretrain(ws, tiny_train(2));
  }();
  return r;
}

}  // namespace

TEST(Pretrain, BitIdenticalAcrossRuns) {
  const auto ws = fixtures::random_windows(64, 32, 4);
  const auto again = pretrain(ws, tiny_train(2));
  EXPECT_EQ(serialize(again.checkpoint), serialize(trained().checkpoint));
  EXPECT_EQ(loss_curve_csv(again.curve), loss_curve_csv(trained().curve));
  TrainConfig threaded = tiny_train(2);
  threaded.threads = 3;
  EXPECT_EQ(serialize(pretrain(ws, threaded).checkpoint), serialize(trained().checkpoint));
}

TEST(Pretrain, CurveAndCounters) {
  const auto& r = trained();
  ASSERT_EQ(r.curve.size(), 2u);
  EXPECT_EQ(r.curve[0].epoch, 1);
  EXPECT_EQ(r.checkpoint.epoch, 2u);
  EXPECT_EQ(r.checkpoint.steps, 8u);  // 64 / 16 batches per epoch
  for (const auto& e : r.curve) {
    EXPECT_TRUE(all_finite(e.mean));
  }
  const std::string csv = loss_curve_csv(r.curve);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_EQ(csv.rfind("epoch,l_tc_w,l_tc_s,l_fc_l,l_fc_h,l_dc,total\n", 0), 0u);
}

TEST(Pretrain, CentroidsStayUnitNorm) {
  const Matrix<float>& c = trained().checkpoint.params.value("cluster.centroids");
  for (Index r = 0; r < c.rows(); ++r) {
    EXPECT_NEAR(c.row(r).norm(), 1.0f, 1e-5f);
  }
}

TEST(Pretrain, ZeroLearningRateKeepsInitialParameters) {
  TrainConfig cfg = tiny_train(2);
  cfg.optimizer.learning_rate = 0.0;
  const auto r = pretrain(fixtures::random_windows(32, 32, 5), cfg);
  EXPECT_TRUE(r.checkpoint.params == init_model_params<float>(cfg.model, cfg.seed));
}

TEST(Pretrain, InputValidation) {
  const auto cfg = tiny_train(1);
  EXPECT_THROW(pretrain(fixtures::random_windows(1, 32, 1), cfg), std::invalid_argument);
  EXPECT_THROW(pretrain(fixtures::random_windows(4, 31, 1), cfg), std::invalid_argument);
  TrainConfig small = cfg;
  small.batch_size = 1;
  EXPECT_THROW(pretrain(fixtures::random_windows(4, 32, 1), small), std::invalid_argument);
}

TEST(Split, EmbedEqualsFullModelExactly) {
  const Checkpoint& ck = trained().checkpoint;
  const EncoderHalf enc = split_checkpoint(ck);
  for (const auto& w : fixtures::random_windows(100, 32, 6)) {
    const auto a = embed(enc, w);
    ASSERT_EQ(a.size(), static_cast<std::size_t>(ck.model.embedding_dim()));
    ASSERT_EQ(a, embed_full(ck, w));
  }
}

TEST(Split, DropsPretrainingHeads) {
  const Checkpoint& ck = trained().checkpoint;
  const EncoderHalf enc = split_checkpoint(ck);
  EXPECT_LT(enc.params.size(), ck.params.size());
  for (std::size_t i = 0; i < enc.params.size(); ++i) {
    EXPECT_TRUE(is_encoder_param(enc.params.name(i))) << enc.params.name(i);
  }
  EXPECT_THROW(enc.params.id("cluster.centroids"), std::invalid_argument);
  EXPECT_LT(serialize(enc).size(), serialize(ck).size());

  std::vector<PretrainSample> batch;
  TrainConfig cfg = tiny_train(1);
  for (const auto& w : fixtures::random_windows(2, 32, 7)) {
    batch.push_back(prepare_sample(w, 0, 0, cfg));
  }
  EXPECT_THROW(pretrain_batch<float>(enc.params, enc.model, batch, BatchDraw{2, 7}, false), std::invalid_argument);
}

TEST(Embed, DeterministicAndLengthChecked) {
  const EncoderHalf enc = split_checkpoint(trained().checkpoint);
  const auto w = fixtures::random_vector(32, 8);
  EXPECT_EQ(embed(enc, w), embed(enc, w));
  try {
    embed(enc, fixtures::random_vector(40, 8));
    FAIL() << "length mismatch accepted";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("expected 32, got 40"), std::string::npos) << e.what();
  }
}

TEST(Embed, MatchesManualChainOfModuleForwards) {
  const ModelConfig m = fixtures::tiny_model();
  const auto full = init_model_params<double>(m, 9);
  const ParamStore<double> p = encoder_subset(full.cast<float>()).cast<double>();
  Encoder<double> encoder(p, m);
  for (const auto& w : fixtures::random_windows(10, 32, 10)) {
    const FeatureSequence<double> z = tcn_forward<double>(std::span<const double>(w), p, m.tcn);
    const Matrix<double> tokens = patchify<double>(z, m.temporal_transformer.patch_count);
    const Matrix<double> ct_t =
        transformer_summarize<double>(tokens, p, m.temporal_transformer, "ttrans", m.temporal_transformer.patch_count);
    const FeatureSequence<double> low = freq_conv_forward<double>(spectrum_of(w), p, m.freq_conv, m.spectrum_len());
    const auto [ct_f, unused] =
        freq_summarize<double>(low, reverse_features<double>(low), m.inference_freq_tokens(), p, m);
    const auto e = encoder.embed(w, p);
    ASSERT_EQ(e.size(), static_cast<std::size_t>(ct_t.cols() + ct_f.cols()));
    for (Index j = 0; j < ct_t.cols(); ++j) {
      EXPECT_NEAR(e[static_cast<std::size_t>(j)], ct_t(0, j), 1e-12);
    }
    for (Index j = 0; j < ct_f.cols(); ++j) {
      EXPECT_NEAR(e[static_cast<std::size_t>(ct_t.cols() + j)], ct_f(0, j), 1e-12);
    }
  }
}

TEST(Finetune, ProbeLeavesEncoderBitIdentical) {
  const EncoderHalf enc = split_checkpoint(trained().checkpoint);
  const auto before = serialize(enc);
  const auto ws = fixtures::two_class_set(16, 32, 11);
  FinetuneConfig cfg;
  cfg.epochs = 3;
  const auto r = finetune(enc, ws.all_windows(), ws.labels, 2, cfg);
  EXPECT_EQ(serialize(r.encoder), before);
  EXPECT_EQ(serialize(enc), before);
  EXPECT_EQ(r.head.num_classes(), 2);
  EXPECT_EQ(r.head.input_dim(), enc.model.embedding_dim());
}

TEST(Finetune, FullModeUpdatesEncoder) {
  const EncoderHalf enc = split_checkpoint(trained().checkpoint);
  const auto ws = fixtures::two_class_set(8, 32, 12);
  FinetuneConfig cfg;
  cfg.mode = FinetuneMode::full;
  cfg.batch_size = 4;
  const auto r = finetune(enc, ws.all_windows(), ws.labels, 2, cfg);
  EXPECT_FALSE(r.encoder.params == enc.params);
  EXPECT_EQ(r.encoder.params.size(), enc.params.size());
  cfg.threads = 3;
  const auto threaded = finetune(enc, ws.all_windows(), ws.labels, 2, cfg);
  EXPECT_TRUE(threaded.encoder.params == r.encoder.params);
}

TEST(Finetune, ZeroEpochsGivesInitialization) {
  const EncoderHalf enc = split_checkpoint(trained().checkpoint);
  const auto ws = fixtures::two_class_set(4, 32, 13);
  FinetuneConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 21;
  for (auto mode : {FinetuneMode::probe, FinetuneMode::full}) {
    cfg.mode = mode;
    const auto r = finetune(enc, ws.all_windows(), ws.labels, 2, cfg);
    const LinearHead init = init_linear_head(enc.model.embedding_dim(), 2, 21);
    EXPECT_EQ(r.head.weight, init.weight);
    EXPECT_EQ(r.head.bias, init.bias);
  }
}

TEST(Finetune, SeparableFeaturesLearnedInOneEpoch) {
  // Two Gaussian clusters 6 sigma apart along a random direction, in 16 dims.
  const Index n = 400;
  const Index d = 16;
  Matrix<float> x(n, d);
  std::vector<int> labels(static_cast<std::size_t>(n));
  Philox rng(14, 0);
  Eigen::RowVectorXf dir(d);
  for (Index j = 0; j < d; ++j) {
    dir(j) = static_cast<float>(rng.normal());
  }
  dir.normalize();
  for (Index i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    labels[static_cast<std::size_t>(i)] = c;
    for (Index j = 0; j < d; ++j) {
      x(i, j) = static_cast<float>(rng.normal()) + 5.0f;
    }
    x.row(i) += (c ? 3.0f : -3.0f) * dir;
  }
  const LinearHead head = fit_linear_head(x, labels, 2, FinetuneConfig{});
  const auto p = predict_features(head, x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    correct += p.classes[i] == labels[i];
  }
  EXPECT_GE(static_cast<double>(correct) / static_cast<double>(n), 0.9);
}

TEST(Finetune, LabelChecks) {
  const EncoderHalf enc = split_checkpoint(trained().checkpoint);
  const auto ws = fixtures::random_windows(4, 32, 15);
  const std::vector<int> one_class = {1, 1, 1, 1};
  EXPECT_THROW(finetune(enc, ws, one_class, 2, FinetuneConfig{}), std::invalid_argument);
  const std::vector<int> unlabeled = {0, 1, -1, 0};
  EXPECT_THROW(finetune(enc, ws, unlabeled, 2, FinetuneConfig{}), std::invalid_argument);
  const std::vector<int> short_labels = {0, 1};
  EXPECT_THROW(finetune(enc, ws, short_labels, 2, FinetuneConfig{}), std::invalid_argument);
  EXPECT_THROW(parse_finetune_mode("frozen"), std::invalid_argument);
}

TEST(Predict, TieGoesToLowerClass) {
  LinearHead h{Matrix<float>::Zero(2, 3), Matrix<float>::Zero(1, 3)};
  h.bias << 0.0f, 1.0f, 1.0f;
  Matrix<float> x = Matrix<float>::Random(5, 2);
  const auto p = predict_features(h, x);
  for (int c : p.classes) {
    EXPECT_EQ(c, 1);
  }
  EXPECT_EQ(argmax_lower(Eigen::RowVectorXd::Zero(4)), 0);
}

TEST(Predict, HeadFavoringClassZero) {
  const EncoderHalf enc = split_checkpoint(trained().checkpoint);
  LinearHead h{Matrix<float>::Zero(enc.model.embedding_dim(), 3), Matrix<float>::Zero(1, 3)};
  h.bias(0, 0) = 1.0f;
  const auto p = predict(enc, h, fixtures::random_windows(20, 32, 16));
  EXPECT_EQ(p.classes, std::vector<int>(20, 0));
  EXPECT_EQ(p.scores.rows(), 20);
  EXPECT_EQ(p.scores.cols(), 3);
}

TEST(Predict, BatchEqualsPerWindow) {
  const EncoderHalf enc = split_checkpoint(trained().checkpoint);
  const LinearHead h = init_linear_head(enc.model.embedding_dim(), 4, 17);
  const auto ws = fixtures::random_windows(12, 32, 18);
  const auto batch = predict(enc, h, ws, 3);
  for (std::size_t i = 0; i < ws.size(); ++i) {
    const auto one = predict(enc, h, std::span<const std::vector<double>>(&ws[i], 1));
    EXPECT_EQ(one.classes[0], batch.classes[i]);
    EXPECT_EQ(one.scores.row(0), batch.scores.row(static_cast<Index>(i)));
  }
}

TEST(Predict, ShapeChecks) {
  LinearHead h{Matrix<float>::Zero(4, 2), Matrix<float>::Zero(1, 2)};
  EXPECT_THROW(predict_features(h, Matrix<float>::Zero(3, 5)), std::invalid_argument);
  h.bias = Matrix<float>::Zero(1, 3);
  EXPECT_THROW(predict_features(h, Matrix<float>::Zero(3, 4)), std::invalid_argument);
}

TEST(Artifacts, CheckpointSaveLoadSaveIdentical) {
  const auto dir = std::filesystem::temp_directory_path() / "splitsee_test_pipeline";
  std::filesystem::create_directories(dir);
  const auto path = dir / "ck.spse";
  save_artifact(trained().checkpoint, path);
  const auto bytes = read_file_bytes(path);
  const Checkpoint back = load_checkpoint(path);
  EXPECT_EQ(serialize(back), bytes);
  EXPECT_TRUE(back.params == trained().checkpoint.params);
  EXPECT_TRUE(back.optimizer_state == trained().checkpoint.optimizer_state);
  EXPECT_EQ(back.steps, trained().checkpoint.steps);
  EXPECT_TRUE(load_encoder(path).params == split_checkpoint(back).params);
  std::filesystem::remove_all(dir);
}

TEST(Artifacts, ClassifierAndEncoderRoundTrip) {
  const EncoderHalf enc = split_checkpoint(trained().checkpoint);
  const Classifier c{enc, init_linear_head(enc.model.embedding_dim(), 3, 19)};
  const auto bytes = serialize(c);
  const Classifier back = deserialize_classifier(bytes);
  EXPECT_EQ(serialize(back), bytes);
  EXPECT_EQ(back.head.num_classes(), 3);
  EXPECT_TRUE(back.encoder.params == enc.params);
  EXPECT_EQ(serialize(deserialize_encoder(serialize(enc))), serialize(enc));
  EXPECT_THROW(deserialize_checkpoint(bytes), std::invalid_argument);
}

TEST(Artifacts, HeaderLayout) {
  const auto bytes = serialize(split_checkpoint(trained().checkpoint));
  ASSERT_GT(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SPSE");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  EXPECT_EQ(version, kArtifactVersion);
}

TEST(Artifacts, VersionMismatchRejected) {
  auto bytes = serialize(trained().checkpoint);
  bytes[4] = 9;
  const std::uint32_t crc = crc32_of(std::span<const std::uint8_t>(bytes).first(bytes.size() - 4));
  std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
  try {
    deserialize_checkpoint(bytes);
    FAIL() << "version 9 accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unsupported format version 9"), std::string::npos);
    EXPECT_EQ(e.offset(), 4u);
  }
}

TEST(Artifacts, ConfigSnapshotMustMatchTensors) {
  // A checkpoint whose config claims wider layers than its tensors is rejected.
  Checkpoint ck = trained().checkpoint;
  ck.model.tcn.output_dim = 5;
  ck.model.tcn.channels_per_layer = {4, 5};
  EXPECT_THROW(deserialize_checkpoint(serialize(ck)), std::invalid_argument);
}
