#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "boxmask/geometry.hpp"

namespace boxmask {

inline constexpr const char* kEvaluatorVersion = "boxmask-eval/1 (all-point interpolated AP, class-wise greedy matching)";

/// Outcome of matching one frame's detections against its ground truth.
/// `is_tp` and `matched_gt` are indexed like the input detections.
struct FrameMatch {
    std::vector<char> is_tp;
    std::vector<int> matched_gt;  // -1 when unmatched
    std::vector<char> gt_matched;
    int false_negatives = 0;
};

/// Greedy one-to-one matching in descending score order (ties: lower
/// index first). Each detection takes the highest-IoU unmatched GT of its
/// class with IoU >= iou_thresh (ties: lower GT index).
FrameMatch match_detections(std::span<const ScoredBox> dets, std::span<const LabeledBox> gts, double iou_thresh);

struct ScoredOutcome {
    double score = 0.0;
    bool tp = false;
};

/// All-point interpolated area under the precision/recall curve. Outcomes
/// with equal scores form one operating point, so the result does not
/// depend on their order.
double average_precision(std::vector<ScoredOutcome> outcomes, int num_gt);

struct FrameResult {
    std::vector<ScoredBox> detections;
    std::vector<LabeledBox> ground_truth;
};

struct ClassMetrics {
    int label = 0;
    int num_gt = 0;
    double ap = 0.0;
    int tp = 0;
    int fp = 0;
    int fn = 0;
};

struct ThresholdBlock {
    double iou = 0.5;
    double map = 0.0;
    std::vector<ClassMetrics> classes;  // classes with at least one GT instance
};

struct EvalResult {
    std::string evaluator_version = kEvaluatorVersion;
    int num_classes = 0;
    std::vector<int> excluded_classes;  // no GT instances; left out of every mean
    std::vector<ThresholdBlock> blocks;

    const ThresholdBlock* block(double iou) const;
    /// mAP at `iou`, or NaN when that threshold was not evaluated.
    double map_at(double iou) const;
    /// Mean of mAP over 0.50:0.05:0.95, or NaN unless all ten were evaluated.
    double map_coco() const;
};

/// Default threshold list 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();

/// Throws InvalidArgument when no ground truth exists at all.
EvalResult compute_map(std::span<const FrameResult> frames, std::span<const double> thresholds, int num_classes);

nlohmann::json to_json(const EvalResult& result);
EvalResult eval_result_from_json(const nlohmann::json& doc);
std::string to_text(const EvalResult& result);

} // namespace boxmask
