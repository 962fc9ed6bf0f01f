// Evaluation drivers: plain forward evaluation, TTT evaluation, and the
// (K, T) sweep with per-cell latency, feeding the metrics aggregator.
#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cvcorr/metrics.hpp"
#include "cvcorr/svg.hpp"
#include "cvcorr/ttt.hpp"

namespace cvcorr {

inline EvalReport evaluate(const ModelParams<float>& params, const ModelConfig& mcfg,
                           const std::vector<SamplePair>& data) {
  std::vector<PredRecord> preds;
  preds.reserve(data.size());
  for (const SamplePair& s : data) {
    const auto out =
        forward(params, mcfg, s.source_image, s.source_mask, s.target_image, /*want_aux=*/false);
    preds.push_back({out.mask, out.vis_logit.item()});
  }
  return assemble_report(data, preds);
}

inline EvalReport evaluate(const ModelParams<float>& params, const ModelConfig& mcfg,
                           const std::vector<SamplePair>& data, const TTTConfig& ttt) {
  std::vector<PredRecord> preds;
  preds.reserve(data.size());
  for (const SamplePair& s : data) {
    const TTTPrediction p = ttt_predict(params, mcfg, s, ttt);
    preds.push_back({p.mask, p.vis_logit});
  }
  return assemble_report(data, preds);
}

struct SweepCell {
  int k = 0, t = 0;
  Direction direction = Direction::ego2exo;
  double mean_iou = -1;
  double mean_latency_ms = 0;
  int n_samples = 0;
};

// Evaluates every (k, t) cell on the cross-view samples, split by direction.
// mean_iou runs over visible-ground-truth samples; latency is the full
// adapt+predict wall time averaged over every sample of the direction.
inline std::vector<SweepCell> ttt_sweep(const ModelParams<float>& params, const ModelConfig& mcfg,
                                        const std::vector<SamplePair>& data,
                                        const std::vector<int>& k_list,
                                        const std::vector<int>& t_list, const TTTConfig& base) {
  if (k_list.empty() || t_list.empty()) throw ConfigError("ttt_sweep: empty (k, t) grid");
  std::vector<SweepCell> cells;
  for (int k : k_list)
    for (int t : t_list)
      for (Direction d : {Direction::ego2exo, Direction::exo2ego}) {
        TTTConfig cfg = base;
        cfg.k = k;
        cfg.t = t;
        cfg.validate();
        SweepCell cell;
        cell.k = k;
        cell.t = t;
        cell.direction = d;
        double iou_sum = 0, lat_sum = 0;
        int iou_n = 0, lat_n = 0;
        for (const SamplePair& s : data) {
          if (s.direction != d) continue;
          const TTTPrediction p = ttt_predict(params, mcfg, s, cfg);
          lat_sum += p.diag.wall_ms;
          ++lat_n;
          if (s.visible) {
            iou_sum += iou(p.mask, s.target_mask);
            ++iou_n;
          }
        }
        if (lat_n == 0) continue;  // direction absent from the split
        cell.mean_latency_ms = lat_sum / lat_n;
        cell.n_samples = iou_n;
        if (iou_n > 0) cell.mean_iou = iou_sum / iou_n;
        cells.push_back(cell);
      }
  return cells;
}

inline void write_sweep_csv(const std::string& path, const std::vector<SweepCell>& cells) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "k,t,direction,mean_iou,mean_latency_ms,n_samples\n";
  for (const SweepCell& c : cells) {
    std::ostringstream os;
    os.precision(9);
    os << c.k << ',' << c.t << ',' << direction_name(c.direction) << ',' << c.mean_iou << ','
       << c.mean_latency_ms << ',' << c.n_samples;
    out << os.str() << '\n';
  }
}

// IoU against mean latency, one series per (k, direction).
inline std::string sweep_svg(const std::vector<SweepCell>& cells) {
  std::vector<svg::Series> series;
  for (const SweepCell& c : cells) {
    std::ostringstream name;
    name << direction_name(c.direction) << " k=" << c.k;
    svg::Series* s = nullptr;
    for (auto& existing : series)
      if (existing.name == name.str()) s = &existing;
    if (!s) {
      series.push_back({name.str(), {}});
      s = &series.back();
    }
    if (c.mean_iou >= 0) s->points.emplace_back(c.mean_latency_ms, c.mean_iou);
  }
  return svg::line_chart("IoU vs adaptation latency", series, "mean latency per sample (ms)",
                         "mean IoU");
}

}  // namespace cvcorr
