#pragma once

// Segmentation losses over soft masks in [0,1].
//
//   bce(p, g)   mean over pixels of -[g log p + (1-g) log(1-p)], with the
//               log arguments floored at 1e-12. Differentiable in both
//               arguments (the target can itself be a model output).
//   dice(p, g)  1 - (2 sum(g p) + eps) / (sum g + sum p + eps), eps = 1e-6.
//               Exactly 0 for a perfect binary match and for two empty
//               masks.
//   mask_loss   bce + lambda_dice * dice.
//   aux_loss    mean of mask_loss over the auxiliary predictions.
//   cycle_loss  bce(p_src, m_src) + lambda * dice; takes only the
//               source-side masks, the target-view mask never enters.
//
// Total objective: mask + lambda_aux * aux + lambda_cycle * cycle.

#include <vector>

#include "cvcorr/tensor.hpp"

namespace cvcorr {

constexpr double kBceFloor = 1e-12;
constexpr double kDiceEps = 1e-6;

struct LossWeights {
  double lambda_dice = 5.0;        // dice weight inside the main mask loss
  double lambda_aux = 1.0;         // weight of the auxiliary-layer term
  double lambda_cycle = 10.0;      // weight of the cycle term
  double lambda_dice_cycle = 0.0;  // dice weight inside the cycle term
};

template <typename S>
Tensor<S> bce(const Tensor<S>& pred, const Tensor<S>& gt) {
  if (pred.shape() != gt.shape())
    throw ShapeError("bce: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(gt.shape()));
  const S floor = static_cast<S>(kBceFloor);
  auto pos_term = mul(gt, log_clamped(pred, floor));
  auto neg_term = mul(one_minus(gt), log_clamped(one_minus(pred), floor));
  return mul_scalar(mean_all(add(pos_term, neg_term)), S(-1));
}

template <typename S>
Tensor<S> dice(const Tensor<S>& pred, const Tensor<S>& gt) {
  if (pred.shape() != gt.shape())
    throw ShapeError("dice: shape mismatch " + shape_str(pred.shape()) + " vs " +
                     shape_str(gt.shape()));
  const S eps = static_cast<S>(kDiceEps);
  auto num = add_scalar(mul_scalar(sum_all(mul(gt, pred)), S(2)), eps);
  auto den = add_scalar(add(sum_all(gt), sum_all(pred)), eps);
  return rsub_scalar(S(1), div(num, den));
}

template <typename S>
Tensor<S> mask_loss(const Tensor<S>& pred, const Tensor<S>& gt, S lambda_dice) {
  return add(bce(pred, gt), mul_scalar(dice(pred, gt), lambda_dice));
}

template <typename S>
Tensor<S> aux_loss(const std::vector<Tensor<S>>& preds, const Tensor<S>& gt, S lambda_dice) {
  if (preds.empty()) throw UsageError("aux_loss: no auxiliary predictions");
  Tensor<S> acc = mask_loss(preds[0], gt, lambda_dice);
  for (size_t i = 1; i < preds.size(); ++i) acc = add(acc, mask_loss(preds[i], gt, lambda_dice));
  return mul_scalar(acc, S(1) / static_cast<S>(preds.size()));
}

// Cycle-consistency term: how well the round trip reproduced the source
// mask. Structurally blind to the target view's ground truth.
template <typename S>
Tensor<S> cycle_loss(const Tensor<S>& pred_source, const Tensor<S>& source_mask,
                     S lambda_dice_cycle) {
  auto b = bce(pred_source, source_mask);
  if (lambda_dice_cycle == S(0)) return b;
  return add(b, mul_scalar(dice(pred_source, source_mask), lambda_dice_cycle));
}

}  // namespace cvcorr
