#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <fstream>
#include <vector>

#include "cvcorr/eval.hpp"
#include "doctest.h"

using namespace cvcorr;

namespace {

ModelConfig tiny_model() {
  ModelConfig mc;
  mc.height = 16;
  mc.width = 16;
  mc.patch = 2;
  mc.backbone_depth = 1;
  mc.depth = 3;
  mc.dim = 16;
  mc.heads = 2;
  mc.backbone_channels = 16;
  mc.mask_hidden = 8;
  return mc;
}

std::vector<SamplePair> tiny_data(int count, uint64_t seed = 7) {
  DataConfig dc;
  dc.height = 16;
  dc.width = 16;
  dc.count = count;
  dc.seed = seed;
  dc.difficulty = "easy";
  dc.invisible_rate = 0.0;
  const auto dirs = direction_mix(dc);
  std::vector<SamplePair> data;
  for (int i = 0; i < count; ++i) data.push_back(make_sample(dc, i, dirs[i]));
  return data;
}

bool params_equal(const ModelParams<float>& a, const ModelParams<float>& b) {
  for (size_t i = 0; i < a.entries.size(); ++i) {
    const float* x = a.entries[i].t.ptr();
    const float* y = b.entries[i].t.ptr();
    for (int64_t j = 0; j < a.entries[i].t.size(); ++j)
      if (x[j] != y[j]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("ttt config: validation and presets") {
  TTTConfig c;
  c.k = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TTTConfig{};
  c.t = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TTTConfig{};
  c.lr = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  const TTTConfig e2x = TTTConfig::preset(Direction::ego2exo);
  CHECK(e2x.k == 4);
  CHECK(e2x.t == 2);
  const TTTConfig x2e = TTTConfig::preset(Direction::exo2ego);
  CHECK(x2e.k == 11);
  CHECK(x2e.t == 6);
  CHECK(e2x.lr == 5e-6);
}

TEST_CASE("ttt: t=0 adaptation is a bit-exact no-op") {
  const ModelConfig mc = tiny_model();
  const auto params = init_params<float>(mc, 4);
  const auto data = tiny_data(2);

  TTTConfig cfg;
  cfg.k = 2;
  cfg.t = 0;
  TTTDiagnostics diag;
  const auto adapted = ttt_adapt(params, mc, data[0].source_image, data[0].source_mask,
                                 data[0].target_image, cfg, &diag);
  CHECK(params_equal(adapted, params));
  CHECK(diag.step_losses.empty());
  CHECK_FALSE(diag.non_finite);

  // prediction path equals the plain forward bit for bit
  const auto plain =
      forward(params, mc, data[0].source_image, data[0].source_mask, data[0].target_image, false);
  const auto pred = ttt_predict(params, mc, data[0], cfg);
  const float* a = plain.mask.ptr();
  const float* b = pred.mask.ptr();
  bool same = true;
  for (int64_t i = 0; i < plain.mask.size(); ++i)
    if (a[i] != b[i]) same = false;
  CHECK(same);
  CHECK(pred.vis_logit == plain.vis_logit.item());
}

TEST_CASE("ttt: exactly the last k encoder layers change") {
  const ModelConfig mc = tiny_model();  // depth 3
  const auto params = init_params<float>(mc, 4);
  const auto data = tiny_data(2);

  TTTConfig cfg;
  cfg.k = 2;
  cfg.t = 1;
  cfg.lr = 1e-3;  // large enough that every adapted tensor visibly moves
  const auto adapted = ttt_adapt(params, mc, data[0].source_image, data[0].source_mask,
                                 data[0].target_image, cfg);

  for (size_t i = 0; i < params.entries.size(); ++i) {
    const auto& e = params.entries[i];
    const float* x = e.t.ptr();
    const float* y = adapted.entries[i].t.ptr();
    bool changed = false;
    for (int64_t j = 0; j < e.t.size(); ++j)
      if (x[j] != y[j]) changed = true;
    const bool should_adapt = e.component == "encoder" && e.layer >= 2;  // layers 2..3
    if (!should_adapt) {
      INFO("unexpected change in ", e.component, " layer ", e.layer, " ", e.name);
      CHECK_FALSE(changed);
    }
  }
  // at least the last layer's weights actually moved
  bool any_moved = false;
  for (size_t i = 0; i < params.entries.size(); ++i)
    if (params.entries[i].component == "encoder" && params.entries[i].layer == 3) {
      const float* x = params.entries[i].t.ptr();
      const float* y = adapted.entries[i].t.ptr();
      for (int64_t j = 0; j < params.entries[i].t.size(); ++j)
        if (x[j] != y[j]) any_moved = true;
    }
  CHECK(any_moved);
}

TEST_CASE("ttt: k clamps to the encoder depth") {
  const ModelConfig mc = tiny_model();  // depth 3
  const auto params = init_params<float>(mc, 4);
  const auto data = tiny_data(2);
  const TTTConfig cfg = TTTConfig::preset(Direction::exo2ego);  // k=11
  TTTDiagnostics diag;
  const auto adapted = ttt_adapt(params, mc, data[0].source_image, data[0].source_mask,
                                 data[0].target_image, cfg, &diag);
  CHECK(diag.k_used == 3);
  CHECK(diag.step_losses.size() == 6);
}

TEST_CASE("ttt: diagnostics carry one loss per step and base params stay put") {
  const ModelConfig mc = tiny_model();
  const auto params = init_params<float>(mc, 4);
  const auto backup = params.clone();
  const auto data = tiny_data(2);

  TTTConfig cfg;
  cfg.k = 2;
  cfg.t = 3;
  cfg.lr = 1e-4;
  const auto pred = ttt_predict(params, mc, data[0], cfg);
  CHECK(pred.diag.step_losses.size() == 3);
  for (double v : pred.diag.step_losses) CHECK(std::isfinite(v));
  CHECK(pred.diag.wall_ms > 0);
  CHECK(params_equal(params, backup));
}

TEST_CASE("ttt: adaptation is per-sample isolated (order cannot matter)") {
  const ModelConfig mc = tiny_model();
  const auto params = init_params<float>(mc, 4);
  const auto data = tiny_data(3);

  TTTConfig cfg;
  cfg.k = 1;
  cfg.t = 1;
  cfg.lr = 1e-3;
  // same sample evaluated before and after adapting on a different sample
  const auto first = ttt_predict(params, mc, data[1], cfg);
  (void)ttt_predict(params, mc, data[2], cfg);
  const auto again = ttt_predict(params, mc, data[1], cfg);
  const float* a = first.mask.ptr();
  const float* b = again.mask.ptr();
  bool same = true;
  for (int64_t i = 0; i < first.mask.size(); ++i)
    if (a[i] != b[i]) same = false;
  CHECK(same);
}

TEST_CASE("ttt sweep: t=0 cell equals the baseline and latency grows with t") {
  const ModelConfig mc = tiny_model();
  const auto params = init_params<float>(mc, 4);
  const auto data = tiny_data(8);

  TTTConfig base;
  base.lr = 1e-4;
  const auto cells = ttt_sweep(params, mc, data, {1}, {0, 1, 2}, base);
  REQUIRE_FALSE(cells.empty());

  const EvalReport baseline = evaluate(params, mc, data);
  for (const SweepCell& c : cells) {
    if (c.t != 0) continue;
    const double want = c.direction == Direction::ego2exo ? baseline.mean_iou_ego2exo
                                                          : baseline.mean_iou_exo2ego;
    CHECK(c.mean_iou == want);
  }
  // latency monotone in t per (k, direction)
  for (const SweepCell& a : cells)
    for (const SweepCell& b : cells)
      if (a.k == b.k && a.direction == b.direction && a.t < b.t)
        CHECK(a.mean_latency_ms <= b.mean_latency_ms);

  CHECK_THROWS_AS(ttt_sweep(params, mc, data, {}, {0}, base), ConfigError);

  write_sweep_csv("sweep_test.csv", cells);
  std::ifstream csv("sweep_test.csv");
  REQUIRE(csv.good());
  std::string header;
  std::getline(csv, header);
  CHECK(header == "k,t,direction,mean_iou,mean_latency_ms,n_samples");
  csv.close();
  std::remove("sweep_test.csv");

  const std::string chart = sweep_svg(cells);
  CHECK(chart.find("<polyline") != std::string::npos);
}
