#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace boxmask {

/// Axis-aligned box in continuous pixel coordinates. (x1, y1) is the
/// top-left corner; a point (x, y) is inside when x1 <= x < x2 and
/// y1 <= y < y2.
struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    double center_x() const { return 0.5 * (x1 + x2); }
    double center_y() const { return 0.5 * (y1 + y2); }
    bool valid() const {
        return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) && x1 < x2 &&
               y1 < y2;
    }
    bool contains(double x, double y) const { return x >= x1 && x < x2 && y >= y1 && y < y2; }

    friend bool operator==(const Box&, const Box&) = default;
};

/// Ground-truth box; label 0 is reserved for background.
struct LabeledBox {
    Box box;
    int label = 1;

    friend bool operator==(const LabeledBox&, const LabeledBox&) = default;
};

struct ScoredBox {
    Box box;
    double score = 0.0;
    int label = 0;
};

/// Center-offset / log-scale regression target.
struct BoxDelta {
    double dx = 0.0;
    double dy = 0.0;
    double dw = 0.0;
    double dh = 0.0;
};

/// Per-coordinate scaling applied to deltas (1,1,1,1 is the raw encoding).
struct DeltaWeights {
    double wx = 1.0;
    double wy = 1.0;
    double ww = 1.0;
    double wh = 1.0;
};

/// Upper bound on dw/dh before exponentiation in decode.
inline const double kDeltaScaleClamp = std::log(1000.0 / 16.0);

/// Throws InvalidArgument for boxes with non-positive area or non-finite
/// coordinates.
void require_valid(const Box& box, const char* what);

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);

/// Greedy class-wise non-maximum suppression. A box is suppressed when its
/// IoU with an already kept box of the same label exceeds `iou_thresh`.
/// Equal scores are ordered by lower input index. Returns kept indices in
/// descending score order.
std::vector<std::size_t> nms(std::span<const ScoredBox> dets, double iou_thresh);

BoxDelta encode(const Box& proposal, const Box& gt, const DeltaWeights& weights = {});

/// Inverse of encode; dw/dh are clamped to kDeltaScaleClamp.
Box decode(const Box& proposal, const BoxDelta& delta, const DeltaWeights& weights = {});

/// decode followed by clipping to [0, width] x [0, height].
Box decode_clipped(const Box& proposal, const BoxDelta& delta, double width, double height,
                   const DeltaWeights& weights = {});

Box clip_box(const Box& box, double width, double height);

} // namespace boxmask
