#include "boxmask/geometry.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "boxmask/error.hpp"

namespace boxmask {

void require_valid(const Box& box, const char* what) {
    if (!box.valid()) {
        throw InvalidArgument(std::string(what) + ": degenerate or non-finite box (" + std::to_string(box.x1) +
                              "," + std::to_string(box.y1) + "," + std::to_string(box.x2) + "," +
                              std::to_string(box.y2) + ")");
    }
}

double intersection_area(const Box& a, const Box& b) {
    const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (w <= 0.0 || h <= 0.0) {
        return 0.0;
    }
    return w * h;
}

double iou(const Box& a, const Box& b) {
    require_valid(a, "iou");
    require_valid(b, "iou");
    if (a == b) {
        return 1.0;
    }
    const double inter = intersection_area(a, b);
    if (inter <= 0.0) {
        return 0.0;
    }
    const double uni = a.area() + b.area() - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

std::vector<std::size_t> nms(std::span<const ScoredBox> dets, double iou_thresh) {
    if (!(iou_thresh > 0.0 && iou_thresh <= 1.0)) {
        throw InvalidArgument("nms: iou_thresh must be in (0, 1]");
    }
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

    std::vector<std::size_t> kept;
    std::vector<char> suppressed(dets.size(), 0);
    for (std::size_t oi = 0; oi < order.size(); ++oi) {
        const std::size_t i = order[oi];
        if (suppressed[i]) {
            continue;
        }
        kept.push_back(i);
        for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
            const std::size_t j = order[oj];
            if (!suppressed[j] && dets[j].label == dets[i].label && iou(dets[i].box, dets[j].box) > iou_thresh) {
                suppressed[j] = 1;
            }
        }
    }
    return kept;
}

BoxDelta encode(const Box& proposal, const Box& gt, const DeltaWeights& weights) {
    require_valid(proposal, "encode proposal");
    require_valid(gt, "encode gt");
    const double pw = proposal.width();
    const double ph = proposal.height();
    return BoxDelta{
        weights.wx * (gt.center_x() - proposal.center_x()) / pw,
        weights.wy * (gt.center_y() - proposal.center_y()) / ph,
        weights.ww * std::log(gt.width() / pw),
        weights.wh * std::log(gt.height() / ph),
    };
}

Box decode(const Box& proposal, const BoxDelta& delta, const DeltaWeights& weights) {
    require_valid(proposal, "decode proposal");
    if (!std::isfinite(delta.dx) || !std::isfinite(delta.dy) || !std::isfinite(delta.dw) ||
        !std::isfinite(delta.dh)) {
        throw InvalidArgument("decode: non-finite delta");
    }
    const double pw = proposal.width();
    const double ph = proposal.height();
    const double dx = delta.dx / weights.wx;
    const double dy = delta.dy / weights.wy;
    const double dw = std::min(delta.dw / weights.ww, kDeltaScaleClamp);
    const double dh = std::min(delta.dh / weights.wh, kDeltaScaleClamp);
    const double cx = proposal.center_x() + dx * pw;
    const double cy = proposal.center_y() + dy * ph;
    const double w = pw * std::exp(dw);
    const double h = ph * std::exp(dh);
    return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_box(const Box& box, double width, double height) {
    return Box{std::clamp(box.x1, 0.0, width), std::clamp(box.y1, 0.0, height), std::clamp(box.x2, 0.0, width),
               std::clamp(box.y2, 0.0, height)};
}

Box decode_clipped(const Box& proposal, const BoxDelta& delta, double width, double height,
                   const DeltaWeights& weights) {
    return clip_box(decode(proposal, delta, weights), width, height);
}

} // namespace boxmask
