#pragma once

#include <vector>

namespace vg {

// Axis-aligned box in normalized center form. Corner accessors derive the
// always-consistent (x1 <= x2, y1 <= y2) form.
struct Box {
    double cx = 0, cy = 0, w = 0, h = 0;

    double x1() const { return cx - w / 2; }
    double x2() const { return cx + w / 2; }
    double y1() const { return cy - h / 2; }
    double y2() const { return cy + h / 2; }
    double area() const { return w * h; }

    static Box from_corners(double x1, double y1, double x2, double y2) {
        return Box{(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1};
    }
};

// Throws ContractError for degenerate (w or h <= 0) boxes.
void validate_box(const Box& b, const char* who);

// Intersection-over-union in [0, 1]; 0 for disjoint boxes.
double iou(const Box& a, const Box& b);

// Generalized IoU in (-1, 1]: IoU minus the enclosing-box area not covered
// by the union, as a fraction of the enclosing area.
double giou(const Box& a, const Box& b);

// Fraction of pairs with iou strictly greater than 0.5, as a percentage.
double accuracy_at_0_5(const std::vector<std::pair<Box, Box>>& pred_gt);

struct LossWeights {
    double lambda_giou = 2.0;
    double lambda_l1 = 5.0;
};

}  // namespace vg
