#include "boxmask/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "boxmask/error.hpp"

namespace boxmask {

FrameMatch match_detections(std::span<const ScoredBox> dets, std::span<const LabeledBox> gts, double iou_thresh) {
    FrameMatch out;
    out.is_tp.assign(dets.size(), 0);
    out.matched_gt.assign(dets.size(), -1);
    out.gt_matched.assign(gts.size(), 0);

    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

    for (std::size_t i : order) {
        int best = -1;
        double best_iou = -1.0;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (out.gt_matched[j] || gts[j].label != dets[i].label) {
                continue;
            }
            const double o = iou(dets[i].box, gts[j].box);
            if (o >= iou_thresh && o > best_iou) {
                best_iou = o;
                best = static_cast<int>(j);
            }
        }
        if (best >= 0) {
            out.gt_matched[best] = 1;
            out.is_tp[i] = 1;
            out.matched_gt[i] = best;
        }
    }
    out.false_negatives = static_cast<int>(std::count(out.gt_matched.begin(), out.gt_matched.end(), 0));
    return out;
}

double average_precision(std::vector<ScoredOutcome> outcomes, int num_gt) {
    if (num_gt <= 0) {
        throw InvalidArgument("average_precision: class has no ground truth");
    }
    std::sort(outcomes.begin(), outcomes.end(),
              [](const ScoredOutcome& a, const ScoredOutcome& b) { return a.score > b.score; });
    std::vector<double> recall;
    std::vector<double> precision;
    int tp = 0;
    int fp = 0;
    for (std::size_t i = 0; i < outcomes.size();) {
        std::size_t j = i;
        while (j < outcomes.size() && outcomes[j].score == outcomes[i].score) {
            (outcomes[j].tp ? tp : fp) += 1;
            ++j;
        }
        recall.push_back(static_cast<double>(tp) / num_gt);
        precision.push_back(static_cast<double>(tp) / (tp + fp));
        i = j;
    }
    // precision envelope: max precision at any recall >= r
    for (std::size_t i = precision.size(); i-- > 1;) {
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return std::clamp(ap, 0.0, 1.0);
}

const ThresholdBlock* EvalResult::block(double iou) const {
    for (const ThresholdBlock& b : blocks) {
        if (std::abs(b.iou - iou) < 1e-9) {
            return &b;
        }
    }
    return nullptr;
}

double EvalResult::map_at(double iou) const {
    const ThresholdBlock* b = block(iou);
    return b ? b->map : std::nan("");
}

double EvalResult::map_coco() const {
    double total = 0.0;
    for (double t : coco_thresholds()) {
        const ThresholdBlock* b = block(t);
        if (b == nullptr) {
            return std::nan("");
        }
        total += b->map;
    }
    return total / 10.0;
}

std::vector<double> coco_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) {
        t.push_back(0.5 + 0.05 * i);
    }
    return t;
}

EvalResult compute_map(std::span<const FrameResult> frames, std::span<const double> thresholds, int num_classes) {
    if (thresholds.empty()) {
        throw InvalidArgument("compute_map: no IoU thresholds given");
    }
    if (num_classes < 1) {
        throw InvalidArgument("compute_map: num_classes must be >= 1");
    }
    std::vector<int> gt_count(num_classes + 1, 0);
    for (const FrameResult& f : frames) {
        for (const LabeledBox& g : f.ground_truth) {
            if (g.label < 1 || g.label > num_classes) {
                throw InvalidArgument("compute_map: ground-truth label " + std::to_string(g.label) + " out of range");
            }
            ++gt_count[g.label];
        }
    }
    if (std::accumulate(gt_count.begin(), gt_count.end(), 0) == 0) {
        throw InvalidArgument("compute_map: no ground-truth instances");
    }

    EvalResult result;
    result.num_classes = num_classes;
    for (int c = 1; c <= num_classes; ++c) {
        if (gt_count[c] == 0) {
            result.excluded_classes.push_back(c);
        }
    }

    for (double thr : thresholds) {
        if (!(thr > 0.0 && thr <= 1.0)) {
            throw InvalidArgument("compute_map: IoU threshold must lie in (0, 1]");
        }
        std::vector<std::vector<ScoredOutcome>> outcomes(num_classes + 1);
        std::vector<int> fn(num_classes + 1, 0);
        for (const FrameResult& f : frames) {
            const FrameMatch m = match_detections(f.detections, f.ground_truth, thr);
            for (std::size_t i = 0; i < f.detections.size(); ++i) {
                const int label = f.detections[i].label;
                if (label >= 1 && label <= num_classes) {
                    outcomes[label].push_back({f.detections[i].score, m.is_tp[i] != 0});
                }
            }
            for (std::size_t j = 0; j < f.ground_truth.size(); ++j) {
                if (!m.gt_matched[j]) {
                    ++fn[f.ground_truth[j].label];
                }
            }
        }
        ThresholdBlock block{thr, 0.0, {}};
        for (int c = 1; c <= num_classes; ++c) {
            if (gt_count[c] == 0) {
                continue;
            }
            ClassMetrics cm{c, gt_count[c], 0.0, 0, 0, fn[c]};
            for (const ScoredOutcome& o : outcomes[c]) {
                (o.tp ? cm.tp : cm.fp) += 1;
            }
            cm.ap = average_precision(outcomes[c], gt_count[c]);
            block.map += cm.ap;
            block.classes.push_back(cm);
        }
        block.map /= static_cast<double>(block.classes.size());
        result.blocks.push_back(std::move(block));
    }
    return result;
}

nlohmann::json to_json(const EvalResult& result) {
    nlohmann::json doc;
    doc["evaluator_version"] = result.evaluator_version;
    doc["num_classes"] = result.num_classes;
    doc["excluded_classes"] = result.excluded_classes;
    doc["thresholds"] = nlohmann::json::array();
    nlohmann::json blocks = nlohmann::json::array();
    for (const ThresholdBlock& b : result.blocks) {
        doc["thresholds"].push_back(b.iou);
        nlohmann::json jb;
        jb["iou"] = b.iou;
        jb["map"] = b.map;
        jb["classes"] = nlohmann::json::array();
        for (const ClassMetrics& c : b.classes) {
            jb["classes"].push_back(
                {{"label", c.label}, {"num_gt", c.num_gt}, {"ap", c.ap}, {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}});
        }
        blocks.push_back(jb);
    }
    doc["blocks"] = blocks;
    nlohmann::json summary;
    for (auto [key, value] : {std::pair{"map50", result.map_at(0.5)}, std::pair{"map75", result.map_at(0.75)},
                              std::pair{"map50_95", result.map_coco()}}) {
        summary[key] = std::isnan(value) ? nlohmann::json(nullptr) : nlohmann::json(value);
    }
    doc["summary"] = summary;
    return doc;
}

EvalResult eval_result_from_json(const nlohmann::json& doc) {
    EvalResult r;
    r.evaluator_version = doc.at("evaluator_version").get<std::string>();
    r.num_classes = doc.at("num_classes").get<int>();
    r.excluded_classes = doc.at("excluded_classes").get<std::vector<int>>();
    for (const auto& jb : doc.at("blocks")) {
        ThresholdBlock b;
        b.iou = jb.at("iou").get<double>();
        b.map = jb.at("map").get<double>();
        for (const auto& jc : jb.at("classes")) {
            b.classes.push_back(ClassMetrics{jc.at("label").get<int>(), jc.at("num_gt").get<int>(),
                                             jc.at("ap").get<double>(), jc.at("tp").get<int>(),
                                             jc.at("fp").get<int>(), jc.at("fn").get<int>()});
        }
        r.blocks.push_back(std::move(b));
    }
    return r;
}

std::string to_text(const EvalResult& result) {
    std::ostringstream os;
    char line[160];
    os << "# evaluator: " << result.evaluator_version << "\n";
    os << "# classes without ground truth are excluded from every mean:";
    if (result.excluded_classes.empty()) {
        os << " none";
    }
    for (int c : result.excluded_classes) {
        os << ' ' << c;
    }
    os << "\n";
    for (const ThresholdBlock& b : result.blocks) {
        std::snprintf(line, sizeof line, "\n[IoU %.2f]  mAP = %.4f\n", b.iou, b.map);
        os << line;
        os << "  class   num_gt      AP     TP     FP     FN\n";
        for (const ClassMetrics& c : b.classes) {
            std::snprintf(line, sizeof line, "  %5d  %7d  %.4f  %5d  %5d  %5d\n", c.label, c.num_gt, c.ap, c.tp, c.fp,
                          c.fn);
            os << line;
        }
    }
    os << "\nsummary:";
    for (auto [name, value] : {std::pair{"mAP@0.5", result.map_at(0.5)}, std::pair{"mAP@0.75", result.map_at(0.75)},
                               std::pair{"mAP@[0.5:0.95]", result.map_coco()}}) {
        if (!std::isnan(value)) {
            std::snprintf(line, sizeof line, "  %s = %.4f", name, value);
            os << line;
        }
    }
    os << "\n";
    return os.str();
}

} // namespace boxmask
