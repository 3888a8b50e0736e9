#include "doctest.h"

#include <cmath>

#include "boxmask/error.hpp"
#include "boxmask/eval.hpp"
#include "boxmask/rng.hpp"
#include "oracles.hpp"

using namespace boxmask;

namespace {

Box random_box(Rng& rng) {
    const double x = rng.uniform(0, 80);
    const double y = rng.uniform(0, 80);
    return Box{x, y, x + rng.uniform(4, 30), y + rng.uniform(4, 30)};
}

std::vector<FrameResult> random_frames(Rng& rng, int count, int classes) {
    std::vector<FrameResult> frames(count);
    for (FrameResult& f : frames) {
        const int n = static_cast<int>(rng.below(4));
        for (int i = 0; i < n; ++i) {
            f.ground_truth.push_back({random_box(rng), 1 + static_cast<int>(rng.below(classes))});
        }
        for (const LabeledBox& g : f.ground_truth) {
            if (rng.uniform() < 0.8) {
                const Box b{g.box.x1 + rng.uniform(-1.5, 1.5), g.box.y1 + rng.uniform(-1.5, 1.5), g.box.x2 + rng.uniform(-1.5, 1.5),
                            g.box.y2 + rng.uniform(-1.5, 1.5)};
                f.detections.push_back({b, rng.uniform(), g.label});
            }
        }
        const int fp = static_cast<int>(rng.below(3));
        for (int i = 0; i < fp; ++i) {
            f.detections.push_back({random_box(rng), rng.uniform(), 1 + static_cast<int>(rng.below(classes))});
        }
    }
    return frames;
}

} // namespace

TEST_SUITE("eval") {

TEST_CASE("perfect detections are all true positives") {
    const std::vector<LabeledBox> gts{{Box{0, 0, 10, 10}, 1}, {Box{20, 20, 30, 35}, 2}};
    const std::vector<ScoredBox> dets{{gts[0].box, 1.0, 1}, {gts[1].box, 1.0, 2}};
    const FrameMatch m = match_detections(dets, gts, 0.5);
    CHECK(m.is_tp == std::vector<char>{1, 1});
    CHECK(m.matched_gt == std::vector<int>{0, 1});
    CHECK(m.false_negatives == 0);
}

TEST_CASE("two detections on one ground truth give TP then FP") {
    const std::vector<LabeledBox> gts{{Box{0, 0, 10, 10}, 1}};
    const std::vector<ScoredBox> dets{{Box{0, 0, 10, 9}, 0.8, 1}, {Box{0, 0, 10, 10}, 0.9, 1}};
    const FrameMatch m = match_detections(dets, gts, 0.5);
    CHECK(m.is_tp == std::vector<char>{0, 1});
    CHECK(m.false_negatives == 0);
}

TEST_CASE("wrong class never matches") {
    const std::vector<LabeledBox> gts{{Box{0, 0, 10, 10}, 1}};
    const std::vector<ScoredBox> dets{{Box{0, 0, 10, 10}, 0.9, 2}};
    const FrameMatch m = match_detections(dets, gts, 0.5);
    CHECK(m.is_tp == std::vector<char>{0});
    CHECK(m.false_negatives == 1);
}

TEST_CASE("matching equals the greedy search oracle on random 50-box scenes") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed, "match");
        std::vector<LabeledBox> gts;
        std::vector<ScoredBox> dets;
        for (int i = 0; i < 25; ++i) {
            gts.push_back({random_box(rng), 1 + static_cast<int>(rng.below(2))});
        }
        for (int i = 0; i < 25; ++i) {
            const LabeledBox& g = gts[rng.below(gts.size())];
            const Box b = rng.uniform() < 0.7 ? Box{g.box.x1 + rng.uniform(-1.5, 1.5), g.box.y1 + rng.uniform(-1.5, 1.5),
                                                    g.box.x2 + rng.uniform(-1.5, 1.5), g.box.y2 + rng.uniform(-1.5, 1.5)}
                                              : random_box(rng);
            dets.push_back({b, std::round(rng.uniform() * 20.0) / 20.0, 1 + static_cast<int>(rng.below(2))});
        }
        const double thresh = rng.uniform(0.3, 0.8);
        const FrameMatch m = match_detections(dets, gts, thresh);
        const auto expect = oracle::match(dets, gts, thresh);
        CHECK(m.matched_gt == expect);
        int unmatched = 0;
        std::vector<bool> used(gts.size(), false);
        for (std::size_t d = 0; d < dets.size(); ++d) {
            CHECK((m.is_tp[d] != 0) == (expect[d] >= 0));
            if (expect[d] >= 0) {
                used[expect[d]] = true;
            }
        }
        for (bool u : used) {
            unmatched += u ? 0 : 1;
        }
        CHECK(m.false_negatives == unmatched);
    }
}

TEST_CASE("hand-derived AP cases") {
    CHECK(average_precision({{1.0, true}}, 1) == 1.0);
    CHECK(average_precision({{0.9, false}, {0.8, true}}, 1) == 0.5);
    CHECK(average_precision({{0.9, true}, {0.8, false}}, 1) == 1.0);
    CHECK(average_precision({}, 3) == 0.0);
    CHECK(average_precision({{0.9, false}}, 1) == 0.0);
}

TEST_CASE("AP equals the explicit PR-curve oracle for distinct scores") {
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(30));
        std::vector<ScoredOutcome> outcomes;
        std::vector<std::pair<double, bool>> ranked;
        int tps = 0;
        for (int i = 0; i < n; ++i) {
            const bool tp = rng.uniform() < 0.5;
            tps += tp ? 1 : 0;
            outcomes.push_back({1.0 - (i + rng.uniform() * 0.5) / n, tp});
        }
        for (const auto& o : outcomes) {
            ranked.emplace_back(o.score, o.tp);
        }
        const int num_gt = tps + static_cast<int>(rng.below(3));
        if (num_gt == 0) {
            continue;
        }
        CHECK(average_precision(outcomes, num_gt) ==
              doctest::Approx(oracle::average_precision(ranked, num_gt)).epsilon(1e-12));
    }
}

TEST_CASE("removing a false positive never lowers AP") {
    Rng rng(22);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<ScoredOutcome> outcomes;
        const int n = 2 + static_cast<int>(rng.below(20));
        int tps = 0;
        for (int i = 0; i < n; ++i) {
            outcomes.push_back({rng.uniform(), rng.uniform() < 0.5});
            tps += outcomes.back().tp ? 1 : 0;
        }
        const int num_gt = std::max(1, tps);
        const double before = average_precision(outcomes, num_gt);
        for (std::size_t i = 0; i < outcomes.size(); ++i) {
            if (!outcomes[i].tp) {
                auto reduced = outcomes;
                reduced.erase(reduced.begin() + static_cast<std::ptrdiff_t>(i));
                CHECK(average_precision(reduced, num_gt) >= before - 1e-15);
            }
        }
    }
}

TEST_CASE("equal scores form one operating point") {
    CHECK(average_precision({{0.5, false}, {0.5, true}}, 1) == average_precision({{0.5, true}, {0.5, false}}, 1));
}

TEST_CASE("perfect detections give mAP 1 and empty detections give 0") {
    Rng rng(23);
    auto frames = random_frames(rng, 20, 3);
    std::vector<FrameResult> perfect = frames;
    std::vector<FrameResult> empty = frames;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        perfect[i].detections.clear();
        for (const LabeledBox& g : frames[i].ground_truth) {
            perfect[i].detections.push_back({g.box, 1.0, g.label});
        }
        empty[i].detections.clear();
    }
    const auto thresholds = coco_thresholds();
    const EvalResult p = compute_map(perfect, thresholds, 3);
    const EvalResult e = compute_map(empty, thresholds, 3);
    CHECK(p.map_coco() == 1.0);
    CHECK(p.map_at(0.5) == 1.0);
    CHECK(e.map_coco() == 0.0);
    CHECK(std::isnan(p.map_at(0.3)));
}

TEST_CASE("classes without ground truth are excluded from the mean") {
    std::vector<FrameResult> frames(1);
    frames[0].ground_truth = {{Box{0, 0, 10, 10}, 1}};
    frames[0].detections = {{Box{0, 0, 10, 10}, 0.9, 1}, {Box{30, 30, 40, 40}, 0.8, 3}};
    const std::vector<double> t{0.5};
    const EvalResult r = compute_map(frames, t, 3);
    CHECK(r.map_at(0.5) == 1.0);
    CHECK(r.excluded_classes == std::vector<int>{2, 3});
    CHECK(r.blocks[0].classes.size() == 1u);
}

TEST_CASE("evaluation rejects a set without ground truth") {
    std::vector<FrameResult> frames(2);
    const std::vector<double> t{0.5};
    CHECK_THROWS_AS(compute_map(frames, t, 3), InvalidArgument);
}

TEST_CASE("result does not depend on frame order") {
    Rng rng(24);
    auto frames = random_frames(rng, 30, 3);
    const auto thresholds = coco_thresholds();
    const EvalResult a = compute_map(frames, thresholds, 3);
    std::reverse(frames.begin(), frames.end());
    std::swap(frames[3], frames[17]);
    const EvalResult b = compute_map(frames, thresholds, 3);
    CHECK(to_json(a) == to_json(b));
    CHECK(a.map_coco() > 0.0);
}

TEST_CASE("json round trip and text report") {
    Rng rng(25);
    const auto frames = random_frames(rng, 15, 3);
    const std::vector<double> t{0.5};
    const EvalResult r = compute_map(frames, t, 3);
    const EvalResult back = eval_result_from_json(nlohmann::json::parse(to_json(r).dump()));
    CHECK(to_json(back) == to_json(r));
    const std::string text = to_text(r);
    CHECK(text.find(kEvaluatorVersion) != std::string::npos);
    std::size_t blocks = 0;
    for (std::size_t pos = text.find("[IoU"); pos != std::string::npos; pos = text.find("[IoU", pos + 1)) {
        ++blocks;
    }
    CHECK(blocks == 1u);
    CHECK(r.blocks.size() == 1u);
}

}
