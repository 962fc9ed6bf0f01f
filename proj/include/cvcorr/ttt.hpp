// Test-time training: per-sample adaptation of the last K encoder layers
// driven by the cycle-consistency loss alone. Each test pair starts from a
// private clone of the base parameters, so samples never contaminate each
// other and evaluation order cannot matter. The ground-truth target mask is
// not an input anywhere in this header.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "cvcorr/train.hpp"

namespace cvcorr {

struct TTTConfig {
  int k = 4;         // adapt the last k encoder layers
  int t = 2;         // gradient steps per test pair (0 = no adaptation)
  double lr = 5e-6;  // plain SGD step size
  double lambda_dice_cycle = 0.0;

  void validate() const {
    if (k < 1) throw ConfigError("ttt: k must be >= 1");
    if (t < 0) throw ConfigError("ttt: t must be >= 0");
    if (!(lr > 0)) throw ConfigError("ttt: lr must be positive");
  }

  // Full-scale defaults per direction; k is clamped to the model depth at
  // adaptation time when the encoder is shallower.
  static TTTConfig preset(Direction d) {
    TTTConfig c;
    if (d == Direction::exo2ego) {
      c.k = 11;
      c.t = 6;
    } else {
      c.k = 4;
      c.t = 2;
    }
    return c;
  }

  static TTTConfig from_ini(const Ini& ini) {
    TTTConfig c;
    c.k = static_cast<int>(ini.get_int("ttt", "k", c.k));
    c.t = static_cast<int>(ini.get_int("ttt", "t", c.t));
    c.lr = ini.get_double("ttt", "lr", c.lr);
    c.lambda_dice_cycle = ini.get_double("ttt", "lambda_dice_cycle", c.lambda_dice_cycle);
    c.validate();
    return c;
  }
};

struct TTTDiagnostics {
  std::vector<double> step_losses;  // cycle loss at each of the t steps
  double wall_ms = 0;
  int k_used = 0;           // after clamping to the encoder depth
  bool non_finite = false;  // adaptation aborted; base params returned
};

// Update mask selecting exactly encoder layers L-k+1 .. L (1-based tags).
inline std::vector<uint8_t> ttt_update_mask(const ModelParams<float>& p, int depth, int k_used) {
  std::vector<uint8_t> mask(p.entries.size(), 0);
  const int first_layer = depth - k_used + 1;
  for (size_t i = 0; i < p.entries.size(); ++i)
    mask[i] = (p.entries[i].component == "encoder" && p.entries[i].layer >= first_layer) ? 1 : 0;
  return mask;
}

// Clone the base weights and take cfg.t SGD steps on the cycle loss of this
// single pair. A non-finite loss aborts the adaptation and hands back the
// base weights unchanged (flagged in diagnostics).
inline ModelParams<float> ttt_adapt(const ModelParams<float>& base, const ModelConfig& mcfg,
                                    const Tensor<float>& source_image,
                                    const Tensor<float>& source_mask,
                                    const Tensor<float>& target_image, const TTTConfig& cfg,
                                    TTTDiagnostics* diag = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const int k_used = std::min(cfg.k, mcfg.depth);
  if (k_used != cfg.k) {
    // warn once per clamp combination, not once per test pair
    static std::set<std::pair<int, int>> warned;
    if (warned.insert({cfg.k, mcfg.depth}).second)
      std::fprintf(stderr, "ttt: k=%d clamped to encoder depth %d\n", cfg.k, mcfg.depth);
  }
  if (diag) {
    diag->step_losses.clear();
    diag->k_used = k_used;
    diag->non_finite = false;
  }

  ModelParams<float> adapted = base.clone();
  if (cfg.t == 0) {
    if (diag)
      diag->wall_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return adapted;
  }

  const std::vector<uint8_t> mask = ttt_update_mask(adapted, mcfg.depth, k_used);
  for (int step = 0; step < cfg.t; ++step) {
    adapted.zero_grad();
    double loss_value = 0;
    {
      Tape<float> tape;
      const auto out =
          forward(adapted, mcfg, source_image, source_mask, target_image, /*want_aux=*/false);
      const Tensor<float> back =
          cycle_predict_source(adapted, mcfg, target_image, out.mask, source_image);
      const Tensor<float> loss =
          cycle_loss(back, source_mask, static_cast<float>(cfg.lambda_dice_cycle));
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        if (diag) {
          diag->non_finite = true;
          diag->step_losses.push_back(loss_value);
          diag->wall_ms =
              std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                  .count();
        }
        return base.clone();
      }
      tape.backward(loss);
    }
    if (diag) diag->step_losses.push_back(loss_value);
    sgd_step(adapted, mask, cfg.lr);
  }
  if (diag)
    diag->wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return adapted;
}

struct TTTPrediction {
  Tensor<float> mask;
  float vis_logit = 0;
  TTTDiagnostics diag;
};

// Adapt on the pair, then predict with the adapted weights. Only the
// source image/mask and the target image of the sample are consumed.
inline TTTPrediction ttt_predict(const ModelParams<float>& base, const ModelConfig& mcfg,
                                 const SamplePair& s, const TTTConfig& cfg) {
  TTTPrediction out;
  const auto t0 = std::chrono::steady_clock::now();
  const ModelParams<float> adapted =
      ttt_adapt(base, mcfg, s.source_image, s.source_mask, s.target_image, cfg, &out.diag);
  const auto fwd =
      forward(adapted, mcfg, s.source_image, s.source_mask, s.target_image, /*want_aux=*/false);
  out.mask = fwd.mask;
  out.vis_logit = fwd.vis_logit.item();
  out.diag.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

}  // namespace cvcorr
