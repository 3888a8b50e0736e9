#pragma once

#include <span>
#include <vector>

#include "boxmask/autograd.hpp"
#include "boxmask/geometry.hpp"
#include "boxmask/tensor.hpp"

namespace boxmask {

/// Coarse per-RoI class map: an m x m grid of labels in [0, L], where 0 is
/// background. Stored row-major (row = y).
struct LabelMask {
    int resolution = 0;
    int num_classes = 0;
    std::vector<int> labels;

    int at(int row, int col) const { return labels[static_cast<std::size_t>(row) * resolution + col]; }
};

/// Divides `region` into m x m cells and labels each cell with the class of
/// the smallest-area box whose interior contains the cell center. Among
/// boxes of equal area the earlier one in `boxes` wins. Uncovered cells are
/// background (0). Labels must lie in [1, num_classes].
LabelMask rasterize_label_map(std::span<const LabeledBox> boxes, const Box& region, int m, int num_classes);

/// One mask per RoI, rasterized with the RoI as region and every
/// ground-truth box participating.
std::vector<LabelMask> build_roi_targets(std::span<const Box> rois, std::span<const LabeledBox> gt, int m,
                                         int num_classes);

/// Mean per-cell softmax cross-entropy between mask logits ([L+1, m, m] per
/// RoI) and coarse targets, averaged over all RoIs and all m*m cells.
/// Throws ShapeMismatch on disagreeing shapes, InvalidArgument when empty.
double boxmask_loss(std::span<const Tensor> logits, std::span<const LabelMask> targets);

/// Graph form over stacked logits [K, L+1, m, m]. `roi_weights` (size K or
/// empty) restricts the average, e.g. to positive RoIs.
Var boxmask_loss(Graph& g, Var logits, std::span<const LabelMask> targets, std::span<const double> roi_weights = {});

} // namespace boxmask
