#pragma once

// Central finite differences over every parameter of the tiny model, for
// each of the five pretraining losses separately. Sinkhorn codes are frozen
// at their value for the unperturbed parameters.

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "splitsee/model.hpp"
#include "splitsee/pipeline.hpp"

namespace gradcheck {

inline constexpr std::array<const char*, 5> kTermNames = {"l_tc_w", "l_tc_s", "l_fc_l", "l_fc_h", "l_dc"};

struct Report {
  std::array<double, 5> worst{};         // worst per-tensor relative error
  std::array<std::string, 5> worst_at;  // tensor where it occurred
  std::size_t parameters = 0;
};

inline double term(const splitsee::PretrainLossBreakdown& b, std::size_t k) {
  const double v[] = {b.l_tc_w, b.l_tc_s, b.l_fc_l, b.l_fc_h, b.l_dc};
  return v[k];
}

/// Per-tensor ||a - f|| / max(||a||, ||f||, kFloor). The floor keeps tensors
/// whose exact gradient is zero (an attention key bias shifts every logit of
/// a row equally) from dividing difference-quotient roundoff by itself.
inline constexpr double kFloor = 1e-5;

inline double relative_error(const splitsee::Matrix<double>& analytic, const splitsee::Matrix<double>& numeric) {
  const double scale = std::max({analytic.norm(), numeric.norm(), kFloor});
  return (analytic - numeric).norm() / scale;
}

inline Report run(std::uint64_t seed, double h = 1e-5) {
  using namespace splitsee;
  TrainConfig cfg;
  cfg.model = fixtures::tiny_model();
  cfg.seed = seed;
  ParamStore<double> params = init_model_params<double>(cfg.model, seed);

  std::vector<PretrainSample> batch;
  const auto windows = fixtures::random_windows(4, static_cast<std::size_t>(cfg.model.window_len), seed + 17);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    batch.push_back(prepare_sample(windows[i], i, 0, cfg));
  }
  const BatchDraw draw = draw_batch(cfg.model, seed, 0, 0);

  const auto base = pretrain_batch<double>(params, cfg.model, batch, draw, false);
  const std::optional<std::pair<CodeMatrix, CodeMatrix>> codes{{base.codes_first, base.codes_second}};

  std::array<std::vector<Matrix<double>>, 5> analytic;
  for (std::size_t k = 0; k < 5; ++k) {
    std::array<double, 5> w{};
    w[k] = 1.0;
    analytic[k] = pretrain_batch<double>(params, cfg.model, batch, draw, true, 1, w, codes).grads;
  }

  Report report;
  report.parameters = params.total_elements();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Index rows = params.value(p).rows();
    const Index cols = params.value(p).cols();
    std::array<Matrix<double>, 5> numeric;
    for (auto& m : numeric) {
      m = Matrix<double>::Zero(rows, cols);
    }
    for (Index e = 0; e < rows * cols; ++e) {
      double& slot = params.value(p).data()[e];
      const double orig = slot;
      slot = orig + h;
      const auto up = pretrain_batch<double>(params, cfg.model, batch, draw, false, 1, {1, 1, 1, 1, 1}, codes);
      slot = orig - h;
      const auto down = pretrain_batch<double>(params, cfg.model, batch, draw, false, 1, {1, 1, 1, 1, 1}, codes);
      slot = orig;
      for (std::size_t k = 0; k < 5; ++k) {
        numeric[k].data()[e] = (term(up.breakdown, k) - term(down.breakdown, k)) / (2 * h);
      }
    }
    for (std::size_t k = 0; k < 5; ++k) {
      const Matrix<double> a =
          analytic[k][p].size() == 0 ? Matrix<double>::Zero(rows, cols) : analytic[k][p];
      const double err = relative_error(a, numeric[k]);
      if (err > report.worst[k]) {
        report.worst[k] = err;
        report.worst_at[k] = params.name(p);
      }
    }
  }
  return report;
}

}  // namespace gradcheck
