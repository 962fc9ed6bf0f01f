#include "cvcorr/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "cvcorr/svg.hpp"

namespace cvcorr {

namespace {

struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> on;
  int count = 0;
  uint8_t at(int i, int j) const { return on[static_cast<size_t>(i) * w + j]; }
};

Mask binarize(const Tensor<float>& t, float thr) {
  if (t.ndim() != 2) throw ShapeError("metrics: expected a [H,W] mask, got " + shape_str(t.shape()));
  Mask m;
  m.h = t.dim(0);
  m.w = t.dim(1);
  m.on.resize(static_cast<size_t>(m.h) * m.w);
  const float* p = t.ptr();
  for (size_t i = 0; i < m.on.size(); ++i) {
    m.on[i] = p[i] > thr ? 1 : 0;
    m.count += m.on[i];
  }
  return m;
}

// Centroid in pixel-index coordinates; false when empty.
bool centroid(const Mask& m, double* ci, double* cj) {
  if (m.count == 0) return false;
  double si = 0, sj = 0;
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j)
      if (m.at(i, j)) {
        si += i;
        sj += j;
      }
  *ci = si / m.count;
  *cj = sj / m.count;
  return true;
}

std::vector<std::pair<int, int>> boundary(const Mask& m) {
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) {
      if (!m.at(i, j)) continue;
      if (i == 0 || j == 0 || i == m.h - 1 || j == m.w - 1 || !m.at(i - 1, j) || !m.at(i + 1, j) ||
          !m.at(i, j - 1) || !m.at(i, j + 1))
        out.emplace_back(i, j);
    }
  return out;
}

Mask translate(const Mask& m, long di, long dj) {
  Mask out;
  out.h = m.h;
  out.w = m.w;
  out.on.assign(m.on.size(), 0);
  for (int i = 0; i < m.h; ++i)
    for (int j = 0; j < m.w; ++j) {
      if (!m.at(i, j)) continue;
      const long ni = i + di, nj = j + dj;
      if (ni >= 0 && ni < m.h && nj >= 0 && nj < m.w) {
        out.on[static_cast<size_t>(ni) * m.w + nj] = 1;
        ++out.count;
      }
    }
  return out;
}

int match_count(const std::vector<std::pair<int, int>>& from,
                const std::vector<std::pair<int, int>>& to, double tol2) {
  int matched = 0;
  for (const auto& [i, j] : from)
    for (const auto& [u, v] : to) {
      const double d2 = static_cast<double>(i - u) * (i - u) + static_cast<double>(j - v) * (j - v);
      if (d2 <= tol2) {
        ++matched;
        break;
      }
    }
  return matched;
}

std::string cell(double v) {
  if (v < 0) return "";
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

}  // namespace

double iou(const Tensor<float>& pred, const Tensor<float>& gt, float threshold) {
  detail::require_same_shape("iou", pred, gt);
  const Mask p = binarize(pred, threshold), g = binarize(gt, threshold);
  int inter = 0, uni = 0;
  for (size_t i = 0; i < p.on.size(); ++i) {
    inter += p.on[i] & g.on[i];
    uni += p.on[i] | g.on[i];
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / uni;
}

double location_error(const Tensor<float>& pred, const Tensor<float>& gt, float threshold) {
  detail::require_same_shape("location_error", pred, gt);
  const Mask p = binarize(pred, threshold), g = binarize(gt, threshold);
  double pi, pj, gi, gj;
  const bool hp = centroid(p, &pi, &pj), hg = centroid(g, &gi, &gj);
  if (!hp && !hg) return -1;
  if (!hp || !hg) return 1;
  const double di = (pi + 0.5) / p.h - (gi + 0.5) / g.h;
  const double dj = (pj + 0.5) / p.w - (gj + 0.5) / g.w;
  return std::sqrt(di * di + dj * dj) / std::sqrt(2.0);
}

double contour_accuracy(const Tensor<float>& pred, const Tensor<float>& gt, float threshold,
                        double boundary_tol) {
  detail::require_same_shape("contour_accuracy", pred, gt);
  const Mask p = binarize(pred, threshold), g = binarize(gt, threshold);
  double pi, pj, gi, gj;
  if (!centroid(p, &pi, &pj) || !centroid(g, &gi, &gj)) return -1;
  const Mask aligned = translate(p, std::llround(gi - pi), std::llround(gj - pj));
  const auto bp = boundary(aligned), bg = boundary(g);
  if (bp.empty() && bg.empty()) return 1;
  if (bp.empty() || bg.empty()) return 0;
  const double tol2 = boundary_tol * boundary_tol;
  const double precision = static_cast<double>(match_count(bp, bg, tol2)) / bp.size();
  const double recall = static_cast<double>(match_count(bg, bp, tol2)) / bg.size();
  if (precision + recall == 0) return 0;
  return 2 * precision * recall / (precision + recall);
}

double visibility_accuracy(const std::vector<VisRecord>& records) {
  int tp = 0, tn = 0, fp = 0, fn = 0;
  for (const VisRecord& r : records) {
    if (r.visible_gt)
      (r.visible_pred ? tp : fn)++;
    else
      (r.visible_pred ? fp : tn)++;
  }
  if (tp + fn == 0 || tn + fp == 0) {
    std::fprintf(stderr, "visibility_accuracy: single-class ground truth, metric skipped\n");
    return -1;
  }
  const double tpr = static_cast<double>(tp) / (tp + fn);
  const double tnr = static_cast<double>(tn) / (tn + fp);
  return (tpr + tnr) / 2;
}

EvalReport assemble_report(const std::vector<SamplePair>& data,
                           const std::vector<PredRecord>& preds) {
  if (data.size() != preds.size())
    throw UsageError("assemble_report: " + std::to_string(data.size()) + " samples vs " +
                     std::to_string(preds.size()) + " predictions");
  EvalReport rep;
  std::vector<VisRecord> vis;
  for (size_t i = 0; i < data.size(); ++i) {
    const SamplePair& s = data[i];
    SampleRecord r;
    r.index = static_cast<int>(i);
    r.direction = s.direction;
    r.visible_gt = s.visible;
    r.vis_logit = preds[i].vis_logit;
    r.visible_pred = preds[i].vis_logit > 0;
    r.iou = iou(preds[i].mask, s.target_mask);
    r.le = location_error(preds[i].mask, s.target_mask);
    r.ca = contour_accuracy(preds[i].mask, s.target_mask);
    double area = 0;
    const float* g = s.target_mask.ptr();
    for (int64_t k = 0; k < s.target_mask.size(); ++k) area += g[k] > 0.5f ? 1 : 0;
    r.area_frac = area / static_cast<double>(s.target_mask.size());
    rep.samples.push_back(r);
    vis.push_back({r.visible_gt, r.visible_pred});
    if (r.visible_gt) ++rep.n_visible;
  }
  rep.va = visibility_accuracy(vis);

  double sum_e2x = 0, sum_x2e = 0, sum_le = 0, sum_ca = 0;
  int n_e2x = 0, n_x2e = 0, n_le = 0, n_ca = 0;
  for (const SampleRecord& r : rep.samples) {
    if (!r.visible_gt) continue;
    if (r.direction == Direction::ego2exo) {
      sum_e2x += r.iou;
      ++n_e2x;
    } else if (r.direction == Direction::exo2ego) {
      sum_x2e += r.iou;
      ++n_x2e;
    }
    if (r.le >= 0) {
      sum_le += r.le;
      ++n_le;
    }
    if (r.ca >= 0) {
      sum_ca += r.ca;
      ++n_ca;
    }
  }
  if (n_e2x > 0) rep.mean_iou_ego2exo = sum_e2x / n_e2x;
  if (n_x2e > 0) rep.mean_iou_exo2ego = sum_x2e / n_x2e;
  if (n_e2x > 0 && n_x2e > 0)
    rep.miou = (rep.mean_iou_ego2exo + rep.mean_iou_exo2ego) / 2;
  if (n_le > 0) rep.mean_le = sum_le / n_le;
  if (n_ca > 0) rep.mean_ca = sum_ca / n_ca;

  const std::vector<double>& edges = size_bucket_edges();
  rep.buckets.resize(edges.size() + 1);
  std::vector<double> bucket_sum(rep.buckets.size(), 0);
  for (size_t b = 0; b < rep.buckets.size(); ++b) {
    rep.buckets[b].lo = b == 0 ? 0 : edges[b - 1];
    rep.buckets[b].hi = b < edges.size() ? edges[b] : 1.0;
  }
  for (const SampleRecord& r : rep.samples) {
    if (!r.visible_gt) continue;
    size_t b = 0;
    while (b < edges.size() && r.area_frac >= edges[b]) ++b;
    rep.buckets[b].count++;
    bucket_sum[b] += r.iou;
  }
  for (size_t b = 0; b < rep.buckets.size(); ++b)
    if (rep.buckets[b].count > 0) rep.buckets[b].mean_iou = bucket_sum[b] / rep.buckets[b].count;

  return rep;
}

std::string EvalReport::summary() const {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  os << "samples: " << samples.size() << " (visible " << n_visible << ")\n";
  if (va >= 0)
    os << "VA (balanced visibility accuracy): " << va << "\n";
  else
    os << "VA: skipped (single-class ground truth)\n";
  os << "IoU ego2exo: " << mean_iou_ego2exo << "\n";
  os << "IoU exo2ego: " << mean_iou_exo2ego << "\n";
  os << "mIoU (mean of ego2exo and exo2ego): " << miou << "\n";
  os << "LE (centroid distance): " << mean_le << "\n";
  os << "CA (aligned boundary F-measure): " << mean_ca << "\n";
  os << "size buckets (target-mask area fraction):\n";
  for (const SizeBucket& b : buckets) {
    os << "  [" << b.lo * 100 << "%, " << (b.hi >= 1.0 ? 100.0 : b.hi * 100) << "%): n=" << b.count
       << " mean IoU=" << (b.count > 0 ? b.mean_iou : 0.0) << "\n";
  }
  return os.str();
}

std::string EvalReport::size_bucket_svg() const {
  std::vector<std::pair<std::string, double>> bars;
  for (const SizeBucket& b : buckets) {
    std::ostringstream label;
    label.precision(2);
    label << b.lo * 100 << "-" << (b.hi >= 1.0 ? 100.0 : b.hi * 100) << "%";
    bars.emplace_back(label.str(), b.count > 0 ? b.mean_iou : 0.0);
  }
  bars.emplace_back("ego2exo", mean_iou_ego2exo >= 0 ? mean_iou_ego2exo : 0.0);
  bars.emplace_back("exo2ego", mean_iou_exo2ego >= 0 ? mean_iou_exo2ego : 0.0);
  return svg::bar_chart("Mean IoU by target size and direction", bars, "mean IoU", 1.0);
}

void EvalReport::write_csv(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(path + ": cannot open for writing");
  out << "index,direction,visible_gt,visible_pred,vis_logit,iou,le,ca,area_frac\n";
  for (const SampleRecord& r : samples) {
    std::ostringstream os;
    os.precision(9);
    os << r.index << ',' << direction_name(r.direction) << ',' << (r.visible_gt ? 1 : 0) << ','
       << (r.visible_pred ? 1 : 0) << ',' << r.vis_logit << ',' << cell(r.iou) << ',' << cell(r.le)
       << ',' << cell(r.ca) << ',' << r.area_frac;
    out << os.str() << '\n';
  }
}

}  // namespace cvcorr
