#pragma once

// Small shared scenes and helpers for detector-level tests.

#include <vector>

#include "boxmask/detector.hpp"
#include "boxmask/ops.hpp"
#include "boxmask/synthvid.hpp"
#include "oracles.hpp"

namespace fixture {

using namespace boxmask;

/// One 32x32 clip with a single object; frame 0 is the target, frame 2 the
/// support.
inline VideoClip tiny_clip(std::uint64_t seed = 1) {
    SceneSpec spec;
    spec.height = 32;
    spec.width = 32;
    spec.length = 3;
    spec.object_count = 1;
    spec.min_size = 12;
    spec.max_size = 16;
    spec.seed = seed;
    return generate_clip(spec);
}

/// Two RoIs: a shifted copy of the GT (positive) and a background corner.
inline RoIBatch micro_batch(const VideoClip& clip) {
    const Box& g = clip.annotations[0][0].box;
    const std::vector<Box> rois{Box{g.x1 + 1.0, g.y1 - 0.5, g.x2 + 0.5, g.y2 + 1.0}, Box{0.5, 0.5, 9.5, 8.5}};
    return label_rois(rois, clip.annotations[0], 0.5);
}

/// Micro-batch l_total with gradients reaching every detector parameter.
inline Var micro_loss(Detector& det, const VideoClip& clip, const RoIBatch& batch, Graph& g) {
    Var tf = det.backbone(g, clip.frames[0]);
    const std::vector<Var> sf{det.backbone(g, clip.frames[2])};
    return det.losses_for_rois(g, tf, sf, batch, clip.annotations[0]).total;
}

/// RPN objectness and regression terms for a fixed anchor sample.
inline Var rpn_loss(Detector& det, const VideoClip& clip, Graph& g) {
    Rng rng(5, "rpn-check");
    const Image* support = &clip.frames[2];
    const LossGraph lg = det.training_losses(g, clip.frames[0], std::span<const Image* const>(&support, 1),
                                             clip.annotations[0], rng);
    return ops::weighted_sum(g, {{lg.rpn_cls, 1.0}, {lg.rpn_reg, 1.0}});
}

/// Gradient checks for every parameter of a default-width detector on the
/// micro-batch; in RPN mode the RPN tensors are checked on the RPN terms.
inline std::vector<oracle::GradCheck> detector_gradient_checks(ProposalMode mode, std::size_t max_coords) {
    DetectorConfig cfg;
    cfg.proposal_mode = mode;
    cfg.seed = 3;
    Detector det(cfg);
    const VideoClip clip = tiny_clip();
    const RoIBatch batch = micro_batch(clip);
    std::vector<Parameter*> main;
    std::vector<Parameter*> rpn;
    for (Parameter* p : det.parameters().all()) {
        (p->name.rfind("rpn.", 0) == 0 ? rpn : main).push_back(p);
    }
    auto checks = oracle::gradient_check(
        main, [&](Graph& g) { return micro_loss(det, clip, batch, g); }, 1e-3, max_coords);
    if (!rpn.empty()) {
        auto more = oracle::gradient_check(
            rpn, [&](Graph& g) { return rpn_loss(det, clip, g); }, 1e-3, max_coords);
        checks.insert(checks.end(), more.begin(), more.end());
    }
    return checks;
}

/// Mean l_total over a fixed set of sampled RoI batches on one clip,
/// evaluated without updating anything.
inline double fixed_loss(Detector& det, const VideoClip& clip, int frames = 4) {
    double sum = 0.0;
    for (int t = 0; t < frames; ++t) {
        const int target = t % clip.length();
        Rng rng(100 + t, "fixed-loss");
        const Image* support = &clip.frames[(target + 1) % clip.length()];
        Graph g(false);
        sum += det.training_losses(g, clip.frames[target], std::span<const Image* const>(&support, 1),
                                   clip.annotations[target], rng)
                   .report.l_total;
    }
    return sum / frames;
}

inline double fixed_rpn_loss(Detector& det, const VideoClip& clip) {
    Rng rng(7, "fixed-rpn");
    const Image* support = &clip.frames[1];
    Graph g(false);
    const LossReport r = det.training_losses(g, clip.frames[0], std::span<const Image* const>(&support, 1),
                                             clip.annotations[0], rng)
                             .report;
    return r.l_rpn_cls + r.l_rpn_reg;
}

} // namespace fixture
