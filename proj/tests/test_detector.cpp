#include "doctest.h"

#include <cmath>
#include <limits>

#include "boxmask/detector.hpp"
#include "boxmask/error.hpp"
#include "fixtures.hpp"

using namespace boxmask;

namespace {

Dataset one_scene(std::uint64_t seed, int length = 6) {
    SceneSpec spec;
    spec.length = length;
    return generate_dataset(spec, 1, seed, "scene");
}

bool same_detections(const std::vector<ScoredBox>& a, const std::vector<ScoredBox>& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].label != b[i].label || a[i].score != b[i].score || a[i].box.x1 != b[i].box.x1 ||
            a[i].box.y1 != b[i].box.y1 || a[i].box.x2 != b[i].box.x2 || a[i].box.y2 != b[i].box.y2) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_SUITE("detector") {

TEST_CASE("backbone maps 64x64 frames to 8x8x32") {
    Detector det(DetectorConfig{});
    const VideoClip clip = generate_clip(SceneSpec{});
    const FeatureMap f = det.backbone_forward(clip.frames[0]);
    CHECK(f.channels() == 32);
    CHECK(f.height() == 8);
    CHECK(f.width() == 8);
    CHECK(f.stride == 8);
}

TEST_CASE("zero input gives zero features") {
    Detector det(DetectorConfig{});
    Image frame{64, 64, std::vector<float>(64 * 64 * 3, 0.0f)};
    const FeatureMap f = det.backbone_forward(frame);
    CHECK(std::all_of(f.values.values().begin(), f.values.values().end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("frames below 16x16 are rejected") {
    Detector det(DetectorConfig{});
    Image frame{12, 40, std::vector<float>(12 * 40 * 3, 0.5f)};
    CHECK_THROWS_AS(det.backbone_forward(frame), InvalidArgument);
}

TEST_CASE("backbone output is deterministic") {
    const VideoClip clip = generate_clip(SceneSpec{});
    DetectorConfig cfg;
    cfg.seed = 5;
    Detector a(cfg);
    Detector b(cfg);
    const Tensor fa = a.backbone_forward(clip.frames[1]).values;
    const Tensor fb = b.backbone_forward(clip.frames[1]).values;
    CHECK(std::equal(fa.values().begin(), fa.values().end(), fb.values().begin()));
}

TEST_CASE("mask logits are (L+1) x 2up x 2up") {
    for (auto [roi, up, m] : {std::tuple{7, 14, 28}, std::tuple{7, 7, 14}}) {
        DetectorConfig cfg;
        cfg.roi_size = roi;
        cfg.up_size = up;
        Detector det(cfg);
        Graph g(false);
        const HeadOutputs out = det.heads(g, g.constant(Tensor({2, 32, up, up}, 0.1)), true);
        CHECK(out.mask_logits->value.shape() == std::vector<int>{2, 4, m, m});
        CHECK(out.cls_logits->value.shape() == std::vector<int>{2, 4});
        CHECK(out.deltas->value.shape() == std::vector<int>{2, 4});
    }
}

TEST_CASE("heads reject grids at the wrong resolution") {
    Detector det(DetectorConfig{});
    Graph g(false);
    CHECK_THROWS_AS(det.heads(g, g.constant(Tensor({1, 32, 7, 7})), false), ShapeMismatch);
}

TEST_CASE("config validation names the offending field") {
    DetectorConfig cfg;
    cfg.mask_size = 20;
    CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("mask_size"), InvalidArgument);
    cfg = DetectorConfig{};
    cfg.lambda_bm = -1.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    CHECK_THROWS_AS(Detector{cfg}, InvalidArgument);
}

TEST_CASE("zero-jitter oracle proposals contain the ground truth exactly") {
    const std::vector<LabeledBox> gt{{Box{3, 4, 20, 30}, 1}, {Box{30, 30, 55, 50}, 2}};
    Rng rng(0);
    const ProposalSet p = oracle_proposals(gt, 64, 64, 16, 3, 0.0, rng);
    CHECK(p.boxes.size() == 16u);
    for (const LabeledBox& g : gt) {
        const bool found = std::any_of(p.boxes.begin(), p.boxes.end(), [&](const Box& b) {
            return b.x1 == g.box.x1 && b.y1 == g.box.y1 && b.x2 == g.box.x2 && b.y2 == g.box.y2;
        });
        CHECK(found);
    }
    CHECK_THROWS_AS(oracle_proposals({}, 64, 64, 16, 3, 0.1, rng), InvalidArgument);
}

TEST_CASE("background-only RoIs contribute exactly zero regression loss") {
    Detector det(DetectorConfig{});
    const VideoClip clip = fixture::tiny_clip();
    const std::vector<Box> rois{Box{0, 0, 3, 3}, Box{29, 29, 32, 32}};
    const std::vector<LabeledBox> far{{Box{12, 12, 24, 24}, 1}};
    const RoIBatch batch = label_rois(rois, far, 0.5);
    CHECK(batch.positive == std::vector<double>{0.0, 0.0});
    Graph g;
    Var tf = det.backbone(g, clip.frames[0]);
    const LossGraph lg = det.losses_for_rois(g, tf, {}, batch, far);
    CHECK(lg.report.l_reg == 0.0);
    CHECK(lg.report.l_cls > 0.0);
    CHECK_THROWS_AS(det.losses_for_rois(g, tf, {}, RoIBatch{}, far), InvalidArgument);
}

TEST_CASE("loss composition with lambda 0.5") {
    const LossReport r = compose_losses(0.2, 0.3, 1.0, 0.5);
    CHECK(std::abs(r.l_total - 1.0) <= 1e-12);
    CHECK(std::abs(r.l_total - r.l_cls - r.l_reg - 0.5 * r.l_bm) <= 1e-9);
}

TEST_CASE("reported total equals the composed terms") {
    Detector det(DetectorConfig{});
    const VideoClip clip = fixture::tiny_clip();
    Graph g(false);
    Var tf = det.backbone(g, clip.frames[0]);
    const LossGraph lg = det.losses_for_rois(g, tf, {}, fixture::micro_batch(clip), clip.annotations[0]);
    const LossReport& r = lg.report;
    CHECK(std::abs(r.l_total - r.l_cls - r.l_reg - 0.5 * r.l_bm) <= 1e-9);
    CHECK(r.l_bm > 0.0);
    CHECK(r.l_cls >= 0.0);
    CHECK(r.l_reg >= 0.0);
}

TEST_CASE("lambda 0 reproduces the baseline loss and detection gradients") {
    DetectorConfig with;
    with.lambda_bm = 0.0;
    DetectorConfig without;
    without.boxmask_enabled = false;
    Detector a(with);
    Detector b(without);
    const VideoClip clip = fixture::tiny_clip();
    const RoIBatch batch = fixture::micro_batch(clip);
    Graph ga;
    Graph gb;
    Var la = fixture::micro_loss(a, clip, batch, ga);
    Var lb = fixture::micro_loss(b, clip, batch, gb);
    CHECK(la->value[0] == lb->value[0]);
    a.parameters().zero_grad();
    b.parameters().zero_grad();
    ga.backward(la);
    gb.backward(lb);
    for (Parameter* p : b.parameters().all()) {
        const Parameter& q = a.parameters().at(p->name);
        CHECK_MESSAGE(std::equal(p->grad.values().begin(), p->grad.values().end(), q.grad.values().begin()), p->name);
    }
}

TEST_CASE("every parameter passes a finite-difference check") {
    const auto checks = fixture::detector_gradient_checks(ProposalMode::oracle_jitter, 6);
    CHECK(checks.size() > 20u);
    for (const auto& c : checks) {
        INFO(c.name, " rel=", c.rel_error);
        CHECK(c.rel_error <= 1e-4);
    }
}

TEST_CASE("fifty steps on one scene lower the loss") {
    const Dataset ds = one_scene(2);
    DetectorConfig cfg;
    cfg.seed = 2;
    Detector det(cfg);
    const double before = fixture::fixed_loss(det, ds.clips[0]);
    Trainer trainer(det, ds, SamplingPlan{});
    for (int i = 0; i < 50; ++i) {
        trainer.step();
    }
    CHECK(fixture::fixed_loss(det, ds.clips[0]) < before);
}

TEST_CASE("training is deterministic") {
    const Dataset ds = one_scene(3);
    DetectorConfig cfg;
    cfg.seed = 4;
    Detector a(cfg);
    Detector b(cfg);
    Trainer ta(a, ds, SamplingPlan{});
    Trainer tb(b, ds, SamplingPlan{});
    for (int i = 0; i < 5; ++i) {
        const LossReport ra = ta.step();
        const LossReport rb = tb.step();
        CHECK(ra.l_total == rb.l_total);
        CHECK(ra.l_bm == rb.l_bm);
    }
    const auto da = a.infer(ds.clips[0], 2, SamplingPlan{});
    const auto db = b.infer(ds.clips[0], 2, SamplingPlan{});
    CHECK(same_detections(da, db));
}

TEST_CASE("RPN loss decreases over 100 steps") {
    const Dataset ds = one_scene(6);
    DetectorConfig cfg;
    cfg.proposal_mode = ProposalMode::learned_rpn;
    cfg.seed = 6;
    Detector det(cfg);
    const double before = fixture::fixed_rpn_loss(det, ds.clips[0]);
    Trainer trainer(det, ds, SamplingPlan{});
    for (int i = 0; i < 100; ++i) {
        trainer.step();
    }
    CHECK(fixture::fixed_rpn_loss(det, ds.clips[0]) < before);
}

TEST_CASE("RPN parameters pass a finite-difference check") {
    const auto checks = fixture::detector_gradient_checks(ProposalMode::learned_rpn, 4);
    int rpn = 0;
    for (const auto& c : checks) {
        if (c.name.rfind("rpn.", 0) == 0) {
            ++rpn;
            INFO(c.name, " rel=", c.rel_error);
            CHECK(c.rel_error <= 1e-4);
        }
    }
    CHECK(rpn == 6);
}

TEST_CASE("a score threshold of one yields no detections") {
    DetectorConfig cfg;
    cfg.score_thresh = 1.0;
    Detector det(cfg);
    const Dataset ds = one_scene(1);
    for (const auto& frame : det.infer_clip(ds.clips[0], SamplingPlan{})) {
        CHECK(frame.empty());
    }
}

TEST_CASE("running the BoxMask branch at inference changes nothing") {
    const Dataset ds = one_scene(8);
    DetectorConfig cfg;
    cfg.seed = 8;
    Detector det(cfg);
    Trainer trainer(det, ds, SamplingPlan{});
    for (int i = 0; i < 10; ++i) {
        trainer.step();
    }
    const auto off = det.infer_clip(ds.clips[0], SamplingPlan{});
    const auto on = det.infer_clip(ds.clips[0], SamplingPlan{}, InferenceOptions{true});
    REQUIRE(off.size() == on.size());
    std::size_t total = 0;
    for (std::size_t t = 0; t < off.size(); ++t) {
        CHECK(same_detections(off[t], on[t]));
        total += off[t].size();
    }
    CHECK(total > 0u);
    CHECK(same_detections(det.infer(ds.clips[0], 3, SamplingPlan{}), off[3]));
}

TEST_CASE("inference rejects empty clips") {
    Detector det(DetectorConfig{});
    CHECK_THROWS_AS(det.infer(VideoClip{}, 0, SamplingPlan{}), InvalidArgument);
    CHECK_THROWS_AS(det.infer_clip(VideoClip{}, SamplingPlan{}), InvalidArgument);
}

TEST_CASE("non-finite losses are reported with every term") {
    LossReport r = compose_losses(0.1, 0.2, 0.3, 0.5);
    CHECK_NOTHROW(check_finite(r));
    r.l_bm = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(check_finite(r), doctest::Contains("l_bm"), NonFiniteLoss);
}

TEST_CASE("learning rate follows the step schedule") {
    DetectorConfig cfg;
    cfg.steps_per_epoch = 10;
    CHECK(learning_rate_at(cfg, 0) == 0.01);
    CHECK(learning_rate_at(cfg, 39) == 0.01);
    CHECK(learning_rate_at(cfg, 40) == doctest::Approx(0.001));
    CHECK(learning_rate_at(cfg, 65) == doctest::Approx(0.0001));
}

TEST_CASE("RoI sampling respects count and positive fraction") {
    const std::vector<LabeledBox> gt{{Box{10, 10, 30, 30}, 1}};
    Rng rng(1);
    const ProposalSet p = oracle_proposals(gt, 64, 64, 64, 8, 0.15, rng);
    const RoIBatch b = sample_rois(p.boxes, gt, 16, 0.25, 0.5, rng);
    CHECK(b.rois.size() == 16u);
    const double pos = std::accumulate(b.positive.begin(), b.positive.end(), 0.0);
    CHECK(pos <= 4.0);
    CHECK(pos >= 1.0);
    CHECK(b.delta_targets.shape() == std::vector<int>{16, 4});
    for (std::size_t k = 0; k < b.rois.size(); ++k) {
        CHECK((b.labels[k] > 0) == (b.positive[k] > 0.0));
    }
}

}
