#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "boxmask/autograd.hpp"
#include "boxmask/features.hpp"
#include "boxmask/geometry.hpp"
#include "boxmask/maskgen.hpp"
#include "boxmask/params.hpp"
#include "boxmask/rng.hpp"
#include "boxmask/sampling.hpp"
#include "boxmask/synthvid.hpp"

namespace boxmask {

enum class ProposalMode { oracle_jitter, learned_rpn };

std::string to_string(ProposalMode mode);
ProposalMode parse_proposal_mode(const std::string& text);

struct DetectorConfig {
    int num_classes = 3;
    double lambda_bm = 0.5;
    /// Mask resolution m; 0 means 2 * up_size.
    int mask_size = 0;
    int n_conv = 1;
    int roi_size = 7;
    int up_size = 14;
    ProposalMode proposal_mode = ProposalMode::oracle_jitter;
    bool boxmask_enabled = true;
    /// Restrict the BoxMask loss to positive RoIs.
    bool boxmask_positive_only = false;

    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 10.0;
    int epochs = 7;
    int steps_per_epoch = 900;
    std::vector<int> lr_decay_epochs{4, 6};
    double lr_decay = 0.1;

    double nms_iou = 0.5;
    double score_thresh = 0.05;

    int rois_per_frame = 16;
    double positive_fraction = 0.25;
    double fg_iou = 0.5;
    double jitter = 0.15;
    int heads = 2;
    int head_hidden = 128;
    int mask_hidden = 64;
    int pool_size = 3;
    std::uint64_t seed = 0;

    int resolved_mask_size() const { return mask_size == 0 ? 2 * up_size : mask_size; }
    int total_steps() const { return epochs * steps_per_epoch; }
    /// Throws InvalidArgument naming the first offending field.
    void validate() const;
};

inline constexpr int kBackboneStride = 8;
inline constexpr int kBackboneChannels = 32;
inline constexpr double kAnchorSize = 24.0;
inline const DeltaWeights kRoIDeltaWeights{10.0, 10.0, 5.0, 5.0};

struct LossReport {
    double l_rpn_cls = 0.0;
    double l_rpn_reg = 0.0;
    double l_cls = 0.0;
    double l_reg = 0.0;
    double l_bm = 0.0;
    double l_total = 0.0;
};

/// l_total = l_rpn_cls + l_rpn_reg + l_cls + l_reg + lambda * l_bm.
LossReport compose_losses(double l_cls, double l_reg, double l_bm, double lambda, double l_rpn_cls = 0.0,
                          double l_rpn_reg = 0.0);

/// Throws NonFiniteLoss listing every term when any is NaN or infinite.
void check_finite(const LossReport& report);

/// Proposal boxes with objectness, the RPN assignments p* and regression
/// targets t* (oracle proposals carry objectness 1 and no RPN targets).
struct ProposalSet {
    std::vector<Box> boxes;
    std::vector<double> objectness;
    std::vector<int> assigned;
    std::vector<BoxDelta> targets;
};

/// Each GT box jittered `per_gt` times (every edge moved by up to
/// `jitter` of the box size; the first copy of each GT is exact when
/// jitter is 0) followed by random boxes up to `count`.
/// Throws InvalidArgument when gt is empty.
ProposalSet oracle_proposals(std::span<const LabeledBox> gt, int height, int width, int count, int per_gt,
                             double jitter, Rng& rng);

/// RoIs with their training targets.
struct RoIBatch {
    std::vector<Box> rois;
    std::vector<int> labels;
    /// [K, 4] encoded with kRoIDeltaWeights; zero rows for background.
    Tensor delta_targets;
    std::vector<double> positive;
};

/// Labels each RoI with the class of its highest-IoU GT when that IoU is
/// at least fg_iou, else background.
RoIBatch label_rois(std::span<const Box> rois, std::span<const LabeledBox> gt, double fg_iou);

/// Samples up to `count` RoIs with at most `positive_fraction` positives.
RoIBatch sample_rois(std::span<const Box> candidates, std::span<const LabeledBox> gt, int count,
                     double positive_fraction, double fg_iou, Rng& rng);

struct HeadOutputs {
    Var cls_logits = nullptr;  // [K, L+1]
    Var deltas = nullptr;      // [K, 4]
    Var mask_logits = nullptr; // [K, L+1, m, m], null when not evaluated
};

struct RpnOutputs {
    Var objectness = nullptr; // [A]
    Var deltas = nullptr;     // [A, 4]
    std::vector<Box> anchors;
};

/// Graph nodes of every loss term; `total` is the optimized scalar.
struct LossGraph {
    LossReport report;
    Var total = nullptr;
    Var cls = nullptr;
    Var reg = nullptr;
    Var bm = nullptr;
    Var rpn_cls = nullptr;
    Var rpn_reg = nullptr;
};

struct InferenceOptions {
    /// Also run the BoxMask branch; its output is discarded.
    bool evaluate_boxmask = false;
};

/// Tiny backbone, proposal source, temporal RoI aggregation, detection
/// head and BoxMask head.
class Detector {
public:
    explicit Detector(const DetectorConfig& config);

    const DetectorConfig& config() const { return config_; }
    ParameterStore& parameters() { return store_; }
    const ParameterStore& parameters() const { return store_; }
    TemporalAggregator& aggregator() { return *aggregator_; }

    /// Frame -> [32, H/8, W/8]. Throws for frames smaller than 16 x 16.
    Var backbone(Graph& g, const Image& frame);
    FeatureMap backbone_forward(const Image& frame);

    /// RoIAlign on the target map, support matching and attention at
    /// roi_size, then upsampling to up_size. Returns [K, C, up, up].
    Var aggregate(Graph& g, Var target_fmap, const std::vector<Var>& support_fmaps, std::span<const Box> rois);

    /// Throws ShapeMismatch when the grids are not at up_size.
    HeadOutputs heads(Graph& g, Var grids, bool with_mask);

    RpnOutputs rpn(Graph& g, Var fmap, int height, int width);

    /// Losses for a fixed RoI batch (no proposal sampling).
    LossGraph losses_for_rois(Graph& g, Var target_fmap, const std::vector<Var>& support_fmaps,
                              const RoIBatch& batch, std::span<const LabeledBox> gt);

    /// Full training forward: proposals, RoI sampling and every loss term.
    LossGraph training_losses(Graph& g, const Image& target, std::span<const Image* const> supports,
                              std::span<const LabeledBox> gt, Rng& rng);

    /// Inference proposals; `gt` is used only in oracle mode.
    std::vector<Box> inference_proposals(Graph& g, Var target_fmap, int height, int width,
                                         std::span<const LabeledBox> gt, std::uint64_t stream);

    /// Detections for frame `target`; support frames per `plan`.
    std::vector<ScoredBox> infer(const VideoClip& clip, int target, const SamplingPlan& plan,
                                 const InferenceOptions& options = {});

    /// Detections for every frame, with backbone features computed once.
    std::vector<std::vector<ScoredBox>> infer_clip(const VideoClip& clip, const SamplingPlan& plan,
                                                   const InferenceOptions& options = {});

private:
    std::vector<ScoredBox> detect(Graph& g, Var target_fmap, const std::vector<Var>& support_fmaps,
                                  std::span<const Box> proposals, int height, int width,
                                  const InferenceOptions& options);
    std::vector<ScoredBox> infer_with_features(const VideoClip& clip, int target, const SamplingPlan& plan,
                                               const std::vector<Tensor>& features, const InferenceOptions& options);
    Parameter& add_param(const std::string& name, std::vector<int> shape, int fan_in);

    DetectorConfig config_;
    ParameterStore store_;
    std::unique_ptr<TemporalAggregator> aggregator_;
};

/// SGD with momentum and L2 weight decay: v = mu v + (g + wd w); w -= lr v.
class SgdMomentum {
public:
    SgdMomentum(double momentum, double weight_decay, double grad_clip)
        : momentum_(momentum), weight_decay_(weight_decay), grad_clip_(grad_clip) {}

    /// Returns the gradient norm before clipping.
    double step(ParameterStore& store, double learning_rate);

private:
    double momentum_;
    double weight_decay_;
    double grad_clip_;
};

/// Step schedule: learning_rate divided by 1/lr_decay at each decay epoch.
double learning_rate_at(const DetectorConfig& config, int step);

/// Draws (clip, target, supports) per step from a seeded stream and applies
/// one SGD update.
class Trainer {
public:
    Trainer(Detector& detector, const Dataset& dataset, const SamplingPlan& plan);

    /// One update; returns the pre-update losses.
    LossReport step();
    int steps_done() const { return step_; }

private:
    Detector& detector_;
    const Dataset& dataset_;
    SamplingPlan plan_;
    SgdMomentum optimizer_;
    Rng rng_;
    int step_ = 0;
};

} // namespace boxmask
