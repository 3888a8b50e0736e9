#include "boxmask/maskgen.hpp"

#include <string>

#include "boxmask/error.hpp"
#include "boxmask/ops.hpp"

namespace boxmask {
namespace {

std::vector<int> flatten_labels(std::span<const LabelMask> targets, int m, int classes) {
    std::vector<int> labels;
    labels.reserve(targets.size() * static_cast<std::size_t>(m) * m);
    for (const LabelMask& t : targets) {
        if (t.resolution != m || t.num_classes + 1 != classes) {
            throw ShapeMismatch("boxmask_loss: target " + std::to_string(t.resolution) + "x" +
                                std::to_string(t.resolution) + " over " + std::to_string(t.num_classes + 1) +
                                " classes vs logits " + std::to_string(m) + "x" + std::to_string(m) + " over " +
                                std::to_string(classes));
        }
        labels.insert(labels.end(), t.labels.begin(), t.labels.end());
    }
    return labels;
}

} // namespace

LabelMask rasterize_label_map(std::span<const LabeledBox> boxes, const Box& region, int m, int num_classes) {
    if (m < 1) {
        throw InvalidArgument("rasterize_label_map: resolution must be >= 1");
    }
    require_valid(region, "rasterize_label_map region");
    for (const LabeledBox& b : boxes) {
        if (b.label < 1 || b.label > num_classes) {
            throw InvalidArgument("rasterize_label_map: label " + std::to_string(b.label) + " outside [1," +
                                  std::to_string(num_classes) + "]");
        }
    }
    LabelMask mask{m, num_classes, std::vector<int>(static_cast<std::size_t>(m) * m, 0)};
    const double cell_w = region.width() / m;
    const double cell_h = region.height() / m;
    for (int row = 0; row < m; ++row) {
        const double cy = region.y1 + (row + 0.5) * cell_h;
        for (int col = 0; col < m; ++col) {
            const double cx = region.x1 + (col + 0.5) * cell_w;
            const LabeledBox* front = nullptr;
            for (const LabeledBox& b : boxes) {
                if (b.box.contains(cx, cy) && (front == nullptr || b.box.area() < front->box.area())) {
                    front = &b;
                }
            }
            if (front != nullptr) {
                mask.labels[static_cast<std::size_t>(row) * m + col] = front->label;
            }
        }
    }
    return mask;
}

std::vector<LabelMask> build_roi_targets(std::span<const Box> rois, std::span<const LabeledBox> gt, int m,
                                         int num_classes) {
    std::vector<LabelMask> masks;
    masks.reserve(rois.size());
    for (const Box& roi : rois) {
        masks.push_back(rasterize_label_map(gt, roi, m, num_classes));
    }
    return masks;
}

double boxmask_loss(std::span<const Tensor> logits, std::span<const LabelMask> targets) {
    if (logits.size() != targets.size()) {
        throw ShapeMismatch("boxmask_loss: " + std::to_string(logits.size()) + " logit grids for " +
                            std::to_string(targets.size()) + " targets");
    }
    if (logits.empty()) {
        throw InvalidArgument("boxmask_loss: at least one RoI required");
    }
    const Tensor& first = logits.front();
    if (first.rank() != 3 || first.dim(1) != first.dim(2)) {
        throw ShapeMismatch("boxmask_loss: logits must be [L+1, m, m], got " + shape_string(first.shape()));
    }
    const int classes = first.dim(0);
    const int m = first.dim(1);
    Tensor stacked({static_cast<int>(logits.size()), classes, m, m});
    const std::size_t per = first.size();
    for (std::size_t k = 0; k < logits.size(); ++k) {
        if (logits[k].shape() != first.shape()) {
            throw ShapeMismatch("boxmask_loss: logit grid " + std::to_string(k) + " has shape " +
                                shape_string(logits[k].shape()));
        }
        std::copy(logits[k].data(), logits[k].data() + per, stacked.data() + k * per);
    }
    const std::vector<int> labels = flatten_labels(targets, m, classes);
    return ops::softmax_cross_entropy_value(stacked, labels, {}, nullptr);
}

Var boxmask_loss(Graph& g, Var logits, std::span<const LabelMask> targets, std::span<const double> roi_weights) {
    const Tensor& lv = logits->value;
    if (lv.rank() != 4 || lv.dim(2) != lv.dim(3) || static_cast<std::size_t>(lv.dim(0)) != targets.size()) {
        throw ShapeMismatch("boxmask_loss: logits " + shape_string(lv.shape()) + " for " +
                            std::to_string(targets.size()) + " targets");
    }
    if (targets.empty()) {
        throw InvalidArgument("boxmask_loss: at least one RoI required");
    }
    const std::vector<int> labels = flatten_labels(targets, lv.dim(2), lv.dim(1));
    return ops::softmax_cross_entropy(g, logits, labels, roi_weights);
}

} // namespace boxmask
