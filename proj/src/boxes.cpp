#include "vg/boxes.hpp"

#include <algorithm>
#include <string>

#include "vg/error.hpp"

namespace vg {

void validate_box(const Box& b, const char* who) {
    if (!(b.w > 0) || !(b.h > 0))
        throw ContractError(std::string(who) + ": degenerate box w=" + std::to_string(b.w) +
                            " h=" + std::to_string(b.h));
}

double iou(const Box& a, const Box& b) {
    validate_box(a, "iou");
    validate_box(b, "iou");
    // zero-area overlap counts as 0, keeping the value continuous at touch
    const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return inter / uni;
}

double giou(const Box& a, const Box& b) {
    validate_box(a, "giou");
    validate_box(b, "giou");
    const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1()));
    const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1()));
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    const double cw = std::max(a.x2(), b.x2()) - std::min(a.x1(), b.x1());
    const double ch = std::max(a.y2(), b.y2()) - std::min(a.y1(), b.y1());
    const double enclosing = cw * ch;
    return inter / uni - (enclosing - uni) / enclosing;
}

double accuracy_at_0_5(const std::vector<std::pair<Box, Box>>& pred_gt) {
    if (pred_gt.empty()) throw ContractError("accuracy_at_0_5: empty prediction list");
    std::size_t hits = 0;
    for (const auto& [pred, gt] : pred_gt)
        if (iou(pred, gt) > 0.5) ++hits;
    return 100.0 * static_cast<double>(hits) / static_cast<double>(pred_gt.size());
}

}  // namespace vg
