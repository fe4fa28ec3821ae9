#pragma once

#include "vg/boxes.hpp"
#include "vg/tensor.hpp"

namespace vg {

// Differentiable GIoU between a predicted (cx, cy, w, h) tensor and a fixed
// ground-truth box. relu clamps the overlap so zero-area intersections
// contribute exactly 0 and the value stays continuous at touching boxes.
template <typename T>
Tensor<T> giou_t(Tape<T>& tp, const Tensor<T>& pred, const Box& gt) {
    if (pred.size() != 4) throw DimError("giou_t: prediction must have 4 components, got " + shape_str(pred.shape()));
    validate_box(gt, "giou_t");
    auto cx = select(tp, pred, 0);
    auto cy = select(tp, pred, 1);
    auto w = select(tp, pred, 2);
    auto h = select(tp, pred, 3);
    auto x1 = sub(tp, cx, scale(tp, w, T(0.5)));
    auto x2 = add(tp, cx, scale(tp, w, T(0.5)));
    auto y1 = sub(tp, cy, scale(tp, h, T(0.5)));
    auto y2 = add(tp, cy, scale(tp, h, T(0.5)));
    auto gx1 = Tensor<T>::scalar(static_cast<T>(gt.x1()));
    auto gx2 = Tensor<T>::scalar(static_cast<T>(gt.x2()));
    auto gy1 = Tensor<T>::scalar(static_cast<T>(gt.y1()));
    auto gy2 = Tensor<T>::scalar(static_cast<T>(gt.y2()));

    auto iw = relu(tp, sub(tp, minimum(tp, x2, gx2), maximum(tp, x1, gx1)));
    auto ih = relu(tp, sub(tp, minimum(tp, y2, gy2), maximum(tp, y1, gy1)));
    auto inter = mul(tp, iw, ih);
    auto uni = sub(tp, add_scalar(tp, mul(tp, w, h), static_cast<T>(gt.area())), inter);
    auto iou = div(tp, inter, uni);

    auto cw = sub(tp, maximum(tp, x2, gx2), minimum(tp, x1, gx1));
    auto ch = sub(tp, maximum(tp, y2, gy2), minimum(tp, y1, gy1));
    auto enclosing = mul(tp, cw, ch);
    return sub(tp, iou, div(tp, sub(tp, enclosing, uni), enclosing));
}

// lambda_giou * (1 - GIoU) + lambda_l1 * sum_k |pred_k - gt_k| over the four
// (cx, cy, w, h) components.
template <typename T>
Tensor<T> stage_loss(Tape<T>& tp, const Tensor<T>& pred, const Box& gt, const LossWeights& w) {
    auto giou_term = add_scalar(tp, scale(tp, giou_t(tp, pred, gt), T(-1)), T(1));
    auto gt_t = Tensor<T>::leaf(pred.shape(), {static_cast<T>(gt.cx), static_cast<T>(gt.cy),
                                               static_cast<T>(gt.w), static_cast<T>(gt.h)});
    auto l1_term = sum(tp, abs_(tp, sub(tp, pred, gt_t)));
    return add(tp, scale(tp, giou_term, static_cast<T>(w.lambda_giou)),
               scale(tp, l1_term, static_cast<T>(w.lambda_l1)));
}

// Eq-style multi-stage objective: stage losses summed over all N predicted
// boxes, every stage equally supervised.
template <typename T>
Tensor<T> total_loss(Tape<T>& tp, const std::vector<Tensor<T>>& preds, const Box& gt, const LossWeights& w) {
    if (preds.empty()) throw ContractError("total_loss: no stage predictions");
    auto acc = stage_loss(tp, preds[0], gt, w);
    for (std::size_t i = 1; i < preds.size(); ++i) acc = add(tp, acc, stage_loss(tp, preds[i], gt, w));
    return acc;
}

}  // namespace vg
