// Benchmark metrics over predicted masks and visibility logits, plus the
// aggregated evaluation report. Conventions that the definitions leave open
// (they affect the aggregate numbers, so they are spelled out here):
//   - masks binarize at threshold 0.5, strictly greater-than;
//   - IoU of two empty masks is 1, of exactly one empty mask 0;
//   - location error normalizes centroids to the unit square and divides the
//     distance by sqrt(2); an empty side with a nonempty other side scores
//     the worst case 1; both sides empty is skipped;
//   - contour accuracy translates the prediction by the integer-rounded
//     centroid difference, then scores the boundary F-measure at 1 px
//     tolerance (4-neighbor boundaries, image edge counts as boundary);
//     skipped unless both masks are nonempty;
//   - skipped per-sample values are reported as -1 and excluded from means.
#pragma once

#include <string>
#include <vector>

#include "cvcorr/data.hpp"
#include "cvcorr/tensor.hpp"

namespace cvcorr {

double iou(const Tensor<float>& pred, const Tensor<float>& gt, float threshold = 0.5f);
double location_error(const Tensor<float>& pred, const Tensor<float>& gt,
                      float threshold = 0.5f);
double contour_accuracy(const Tensor<float>& pred, const Tensor<float>& gt,
                        float threshold = 0.5f, double boundary_tol = 1.0);

struct VisRecord {
  bool visible_gt = false;
  bool visible_pred = false;
};

// Balanced accuracy (TPR + TNR) / 2; -1 with a warning when the ground
// truth is single-class.
double visibility_accuracy(const std::vector<VisRecord>& records);

struct SampleRecord {
  int index = 0;
  Direction direction = Direction::ego2exo;
  bool visible_gt = false;
  bool visible_pred = false;
  float vis_logit = 0;
  double iou = -1;
  double le = -1;
  double ca = -1;
  double area_frac = 0;  // gt mask pixels / (H*W)
};

struct SizeBucket {
  double lo = 0, hi = 1;  // area-fraction range [lo, hi)
  int count = 0;
  double mean_iou = -1;
};

// Bucket edges as fractions of the target image area.
inline const std::vector<double>& size_bucket_edges() {
  static const std::vector<double> edges{0.001, 0.005, 0.01, 0.05};
  return edges;
}

struct PredRecord {
  Tensor<float> mask;  // [H,W] probabilities
  float vis_logit = 0;
};

struct EvalReport {
  std::vector<SampleRecord> samples;
  double va = -1;  // -1 = skipped (single-class ground truth)
  double mean_iou_ego2exo = -1, mean_iou_exo2ego = -1, miou = -1;
  double mean_le = -1, mean_ca = -1;
  std::vector<SizeBucket> buckets;
  int n_visible = 0;

  std::string summary() const;
  std::string size_bucket_svg() const;
  void write_csv(const std::string& path) const;
};

// Scores one prediction per sample and aggregates. IoU / LE / CA means run
// over samples whose ground-truth target is visible; mIoU averages the two
// cross-view directions per its definition.
EvalReport assemble_report(const std::vector<SamplePair>& data,
                           const std::vector<PredRecord>& preds);

}  // namespace cvcorr
