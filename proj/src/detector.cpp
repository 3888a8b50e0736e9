#include "boxmask/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "boxmask/error.hpp"
#include "boxmask/ops.hpp"

namespace boxmask {
namespace {

constexpr int kRpnSamples = 32;
constexpr int kRpnPreNms = 64;
constexpr int kTrainCandidatesPerGt = 8;
constexpr int kTrainCandidates = 64;
constexpr int kInferPerGt = 3;
constexpr double kRpnNms = 0.7;
constexpr double kRpnPositiveIou = 0.5;
constexpr double kRpnNegativeIou = 0.3;

Tensor image_tensor(const Image& frame) {
    Tensor t({1, 3, frame.height, frame.width});
    const std::size_t plane = static_cast<std::size_t>(frame.height) * frame.width;
    for (std::size_t p = 0; p < plane; ++p) {
        for (int c = 0; c < 3; ++c) {
            t[c * plane + p] = frame.pixels[p * 3 + c];
        }
    }
    return t;
}

// [1, C, h, w] -> [h*w, C].
Var channels_last(Graph& g, Var x) {
    const Tensor& xv = x->value;
    const int channels = xv.dim(1);
    const int plane = xv.dim(2) * xv.dim(3);
    Tensor out({plane, channels});
    for (int c = 0; c < channels; ++c) {
        for (int p = 0; p < plane; ++p) {
            out[static_cast<std::size_t>(p) * channels + c] = xv[static_cast<std::size_t>(c) * plane + p];
        }
    }
    return g.record(std::move(out), {x}, [x, channels, plane](const Tensor& dout) {
        Tensor& dx = x->grad_buffer();
        for (int c = 0; c < channels; ++c) {
            for (int p = 0; p < plane; ++p) {
                dx[static_cast<std::size_t>(c) * plane + p] += dout[static_cast<std::size_t>(p) * channels + c];
            }
        }
    });
}

void shuffle(std::vector<std::size_t>& items, Rng& rng) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::swap(items[i - 1], items[rng.below(i)]);
    }
}

Box jittered(const Box& b, double jitter, int height, int width, Rng& rng) {
    const double w = b.width();
    const double h = b.height();
    Box out{b.x1 + rng.uniform(-jitter, jitter) * w, b.y1 + rng.uniform(-jitter, jitter) * h,
            b.x2 + rng.uniform(-jitter, jitter) * w, b.y2 + rng.uniform(-jitter, jitter) * h};
    out = clip_box(out, width, height);
    if (out.width() < 1.0 || out.height() < 1.0) {
        return b;
    }
    return out;
}

Box random_box(int height, int width, Rng& rng) {
    const double side = std::min(height, width);
    const double lo = std::max(4.0, 0.15 * side);
    const double hi = std::max(lo + 1.0, 0.6 * side);
    const double w = std::min<double>(rng.uniform(lo, hi), width);
    const double h = std::min<double>(rng.uniform(lo, hi), height);
    const double x = rng.uniform(0.0, width - w);
    const double y = rng.uniform(0.0, height - h);
    return Box{x, y, x + w, y + h};
}

// GT moved by 30-80% of its size: mostly overlapping background.
Box shifted_box(const Box& b, int height, int width, Rng& rng) {
    const double angle = rng.uniform(0.0, 2.0 * 3.141592653589793);
    const double amount = rng.uniform(0.3, 0.8);
    const double dx = std::cos(angle) * amount * b.width();
    const double dy = std::sin(angle) * amount * b.height();
    Box out = clip_box(Box{b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy}, width, height);
    if (out.width() < 1.0 || out.height() < 1.0) {
        return random_box(height, width, rng);
    }
    return out;
}

std::vector<Box> anchors_for(int fh, int fw) {
    std::vector<Box> anchors;
    for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw; ++x) {
            const double cx = (x + 0.5) * kBackboneStride;
            const double cy = (y + 0.5) * kBackboneStride;
            anchors.push_back(Box{cx - kAnchorSize / 2, cy - kAnchorSize / 2, cx + kAnchorSize / 2,
                                  cy + kAnchorSize / 2});
        }
    }
    return anchors;
}

// Decoded anchors, NMS at kRpnNms, best `keep` by objectness.
std::vector<Box> rpn_proposals(const RpnOutputs& out, int height, int width, int keep) {
    std::vector<ScoredBox> scored;
    const Tensor& obj = out.objectness->value;
    const Tensor& del = out.deltas->value;
    for (std::size_t a = 0; a < out.anchors.size(); ++a) {
        const BoxDelta d{del[a * 4], del[a * 4 + 1], del[a * 4 + 2], del[a * 4 + 3]};
        if (!std::isfinite(d.dx) || !std::isfinite(d.dy) || !std::isfinite(d.dw) || !std::isfinite(d.dh)) {
            continue;
        }
        const Box b = decode_clipped(out.anchors[a], d, width, height);
        if (b.width() < 1.0 || b.height() < 1.0) {
            continue;
        }
        scored.push_back(ScoredBox{b, 1.0 / (1.0 + std::exp(-obj[a])), 0});
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
    if (static_cast<int>(scored.size()) > kRpnPreNms) {
        scored.resize(kRpnPreNms);
    }
    std::vector<Box> boxes;
    for (std::size_t i : nms(scored, kRpnNms)) {
        if (static_cast<int>(boxes.size()) == keep) {
            break;
        }
        boxes.push_back(scored[i].box);
    }
    return boxes;
}

} // namespace

std::string to_string(ProposalMode mode) { return mode == ProposalMode::oracle_jitter ? "oracle" : "rpn"; }

ProposalMode parse_proposal_mode(const std::string& text) {
    if (text == "oracle" || text == "oracle_jitter") {
        return ProposalMode::oracle_jitter;
    }
    if (text == "rpn" || text == "learned_rpn") {
        return ProposalMode::learned_rpn;
    }
    throw InvalidArgument("unknown proposal mode '" + text + "' (expected oracle or rpn)");
}

void DetectorConfig::validate() const {
    auto fail = [](const std::string& msg) { throw InvalidArgument("detector config: " + msg); };
    if (num_classes < 1) fail("num_classes must be >= 1");
    if (!(lambda_bm >= 0.0) || !std::isfinite(lambda_bm)) fail("lambda_bm must be finite and >= 0");
    if (n_conv < 1) fail("n_conv must be >= 1");
    if (roi_size < 1 || up_size < roi_size) fail("need 1 <= roi_size <= up_size");
    if (pool_size < 1 || pool_size > roi_size) fail("pool_size must lie in [1, roi_size]");
    const int m = resolved_mask_size();
    if (m % 2 != 0) fail("mask_size must be even");
    if (m != 2 * up_size) {
        fail("mask_size " + std::to_string(m) + " does not match 2 * up_size = " + std::to_string(2 * up_size));
    }
    if (!(learning_rate > 0.0) || momentum < 0.0 || momentum >= 1.0 || weight_decay < 0.0 || grad_clip < 0.0) {
        fail("invalid optimizer settings");
    }
    if (epochs < 1 || steps_per_epoch < 1) fail("epochs and steps_per_epoch must be >= 1");
    if (!(nms_iou > 0.0 && nms_iou <= 1.0)) fail("nms_iou must lie in (0, 1]");
    if (rois_per_frame < 1) fail("rois_per_frame must be >= 1");
    if (!(positive_fraction > 0.0 && positive_fraction <= 1.0)) fail("positive_fraction must lie in (0, 1]");
    if (!(fg_iou > 0.0 && fg_iou <= 1.0)) fail("fg_iou must lie in (0, 1]");
    if (jitter < 0.0 || jitter >= 0.5) fail("jitter must lie in [0, 0.5)");
    if (heads < 1 || kBackboneChannels % heads != 0) fail("heads must divide the channel count");
    if (head_hidden < 1 || mask_hidden < 1) fail("hidden sizes must be >= 1");
}

LossReport compose_losses(double l_cls, double l_reg, double l_bm, double lambda, double l_rpn_cls,
                          double l_rpn_reg) {
    LossReport r{l_rpn_cls, l_rpn_reg, l_cls, l_reg, l_bm, 0.0};
    double total = 0.0;
    total += 1.0 * l_cls;
    total += 1.0 * l_reg;
    total += lambda * l_bm;
    total += 1.0 * l_rpn_cls;
    total += 1.0 * l_rpn_reg;
    r.l_total = total;
    return r;
}

void check_finite(const LossReport& r) {
    const double terms[] = {r.l_rpn_cls, r.l_rpn_reg, r.l_cls, r.l_reg, r.l_bm, r.l_total};
    if (std::all_of(std::begin(terms), std::end(terms), [](double v) { return std::isfinite(v); })) {
        return;
    }
    std::ostringstream os;
    os << "non-finite loss: l_rpn_cls=" << r.l_rpn_cls << " l_rpn_reg=" << r.l_rpn_reg << " l_cls=" << r.l_cls
       << " l_reg=" << r.l_reg << " l_bm=" << r.l_bm << " l_total=" << r.l_total;
    throw NonFiniteLoss(os.str());
}

ProposalSet oracle_proposals(std::span<const LabeledBox> gt, int height, int width, int count, int per_gt,
                             double jitter, Rng& rng) {
    if (gt.empty()) {
        throw InvalidArgument("oracle proposals need at least one ground-truth box");
    }
    ProposalSet set;
    for (const LabeledBox& b : gt) {
        for (int i = 0; i < per_gt && static_cast<int>(set.boxes.size()) < count; ++i) {
            set.boxes.push_back(jitter == 0.0 ? b.box : jittered(b.box, jitter, height, width, rng));
        }
    }
    std::size_t next_gt = 0;
    while (static_cast<int>(set.boxes.size()) < count) {
        if (set.boxes.size() % 2 == 0) {
            set.boxes.push_back(shifted_box(gt[next_gt++ % gt.size()].box, height, width, rng));
        } else {
            set.boxes.push_back(random_box(height, width, rng));
        }
    }
    set.objectness.assign(set.boxes.size(), 1.0);
    return set;
}

RoIBatch label_rois(std::span<const Box> rois, std::span<const LabeledBox> gt, double fg_iou) {
    RoIBatch batch;
    batch.rois.assign(rois.begin(), rois.end());
    batch.delta_targets = Tensor({static_cast<int>(rois.size()), 4});
    for (std::size_t k = 0; k < rois.size(); ++k) {
        double best = 0.0;
        int best_gt = -1;
        for (std::size_t j = 0; j < gt.size(); ++j) {
            const double o = iou(rois[k], gt[j].box);
            if (o > best) {
                best = o;
                best_gt = static_cast<int>(j);
            }
        }
        if (best_gt >= 0 && best >= fg_iou) {
            batch.labels.push_back(gt[best_gt].label);
            batch.positive.push_back(1.0);
            const BoxDelta d = encode(rois[k], gt[best_gt].box, kRoIDeltaWeights);
            batch.delta_targets[k * 4] = d.dx;
            batch.delta_targets[k * 4 + 1] = d.dy;
            batch.delta_targets[k * 4 + 2] = d.dw;
            batch.delta_targets[k * 4 + 3] = d.dh;
        } else {
            batch.labels.push_back(0);
            batch.positive.push_back(0.0);
        }
    }
    return batch;
}

RoIBatch sample_rois(std::span<const Box> candidates, std::span<const LabeledBox> gt, int count,
                     double positive_fraction, double fg_iou, Rng& rng) {
    const RoIBatch all = label_rois(candidates, gt, fg_iou);
    std::vector<std::size_t> pos;
    std::vector<std::size_t> neg;
    for (std::size_t k = 0; k < all.labels.size(); ++k) {
        (all.labels[k] > 0 ? pos : neg).push_back(k);
    }
    shuffle(pos, rng);
    shuffle(neg, rng);
    const std::size_t n_pos =
        std::min(pos.size(), static_cast<std::size_t>(std::floor(count * positive_fraction)));
    const std::size_t n_neg = std::min(neg.size(), static_cast<std::size_t>(count) - n_pos);
    std::vector<std::size_t> chosen(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_pos));
    chosen.insert(chosen.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg));
    if (chosen.empty()) {
        throw InvalidArgument("RoI sampling produced no RoIs");
    }
    RoIBatch out;
    out.delta_targets = Tensor({static_cast<int>(chosen.size()), 4});
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const std::size_t k = chosen[i];
        out.rois.push_back(all.rois[k]);
        out.labels.push_back(all.labels[k]);
        out.positive.push_back(all.positive[k]);
        for (int d = 0; d < 4; ++d) {
            out.delta_targets[i * 4 + d] = all.delta_targets[k * 4 + d];
        }
    }
    return out;
}

Detector::Detector(const DetectorConfig& config) : config_(config) {
    config_.validate();
    const int c = kBackboneChannels;
    const int l1 = config_.num_classes + 1;
    const int channels[] = {3, 16, 32, 32, 32};
    for (int i = 0; i < 4; ++i) {
        const std::string p = "backbone.conv" + std::to_string(i + 1);
        add_param(p + ".w", {channels[i + 1], channels[i], 3, 3}, channels[i] * 9);
        add_param(p + ".b", {channels[i + 1]}, 0);
    }
    if (config_.proposal_mode == ProposalMode::learned_rpn) {
        add_param("rpn.conv.w", {c, c, 3, 3}, c * 9);
        add_param("rpn.conv.b", {c}, 0);
        add_param("rpn.obj.w", {1, c, 1, 1}, c);
        add_param("rpn.obj.b", {1}, 0);
        add_param("rpn.delta.w", {4, c, 1, 1}, c);
        add_param("rpn.delta.b", {4}, 0);
        for (double& v : store_.at("rpn.delta.w").value.values()) {
            v *= 0.1;
        }
    }
    aggregator_ = std::make_unique<TemporalAggregator>(store_, "aggregator.", c, config_.heads, config_.seed);
    const int pooled = c * config_.pool_size * config_.pool_size;
    add_param("head.fc1.w", {config_.head_hidden, pooled}, pooled);
    add_param("head.fc1.b", {config_.head_hidden}, 0);
    add_param("head.fc2.w", {config_.head_hidden, config_.head_hidden}, config_.head_hidden);
    add_param("head.fc2.b", {config_.head_hidden}, 0);
    add_param("head.cls.w", {l1, config_.head_hidden}, config_.head_hidden);
    add_param("head.cls.b", {l1}, 0);
    add_param("head.reg.w", {4, config_.head_hidden}, config_.head_hidden);
    add_param("head.reg.b", {4}, 0);
    for (const char* name : {"head.cls.w", "head.reg.w"}) {
        for (double& v : store_.at(name).value.values()) {
            v *= 0.1;
        }
    }
    if (config_.boxmask_enabled) {
        const int h = config_.mask_hidden;
        for (int i = 0; i < config_.n_conv; ++i) {
            const int in = i == 0 ? c : h;
            const std::string p = "boxmask.conv" + std::to_string(i + 1);
            add_param(p + ".w", {h, in, 3, 3}, in * 9);
            add_param(p + ".b", {h}, 0);
        }
        add_param("boxmask.deconv.w", {h, h, 2, 2}, h * 4);
        add_param("boxmask.deconv.b", {h}, 0);
        add_param("boxmask.pred.w", {l1, h, 1, 1}, h);
        add_param("boxmask.pred.b", {l1}, 0);
    }
}

Parameter& Detector::add_param(const std::string& name, std::vector<int> shape, int fan_in) {
    if (fan_in == 0) {
        return store_.add(name, Tensor(std::move(shape)));
    }
    return store_.add(name, uniform_init(std::move(shape), fan_in, config_.seed, name));
}

Var Detector::backbone(Graph& g, const Image& frame) {
    if (frame.height < 16 || frame.width < 16) {
        throw InvalidArgument("backbone: frame " + std::to_string(frame.width) + "x" + std::to_string(frame.height) +
                              " is smaller than 16x16");
    }
    Var x = g.constant(image_tensor(frame));
    for (int i = 1; i <= 4; ++i) {
        const std::string p = "backbone.conv" + std::to_string(i);
        x = ops::conv2d(g, x, g.parameter(store_.at(p + ".w")), g.parameter(store_.at(p + ".b")), i < 4 ? 2 : 1, 1);
        if (i < 4) {
            x = ops::relu(g, x);
        }
    }
    return ops::select(g, x, 0);
}

FeatureMap Detector::backbone_forward(const Image& frame) {
    Graph g(false);
    return FeatureMap{backbone(g, frame)->value, kBackboneStride, -1};
}

Var Detector::aggregate(Graph& g, Var target_fmap, const std::vector<Var>& support_fmaps,
                        std::span<const Box> rois) {
    Var grids = ops::roi_align(g, target_fmap, rois, config_.roi_size, kBackboneStride);
    std::vector<Var> matched;
    for (Var s : support_fmaps) {
        matched.push_back(match_support_features(g, grids, s));
    }
    Var out = aggregator_->forward(g, grids, matched);
    return config_.up_size == config_.roi_size ? out : ops::upsample_bilinear(g, out, config_.up_size);
}

HeadOutputs Detector::heads(Graph& g, Var grids, bool with_mask) {
    const Tensor& gv = grids->value;
    if (gv.rank() != 4 || gv.dim(1) != kBackboneChannels || gv.dim(2) != config_.up_size ||
        gv.dim(3) != config_.up_size) {
        throw ShapeMismatch("heads: expected grids [K, " + std::to_string(kBackboneChannels) + ", " +
                            std::to_string(config_.up_size) + ", " + std::to_string(config_.up_size) + "], got " +
                            shape_string(gv.shape()));
    }
    auto p = [&](const std::string& name) { return g.parameter(store_.at(name)); };
    HeadOutputs out;
    Var h = ops::adaptive_avg_pool(g, grids, config_.pool_size);
    h = ops::relu(g, ops::linear(g, h, p("head.fc1.w"), p("head.fc1.b")));
    h = ops::relu(g, ops::linear(g, h, p("head.fc2.w"), p("head.fc2.b")));
    out.cls_logits = ops::linear(g, h, p("head.cls.w"), p("head.cls.b"));
    out.deltas = ops::linear(g, h, p("head.reg.w"), p("head.reg.b"));
    if (with_mask) {
        if (!config_.boxmask_enabled) {
            throw InvalidArgument("heads: BoxMask branch requested but disabled");
        }
        Var m = grids;
        for (int i = 1; i <= config_.n_conv; ++i) {
            const std::string q = "boxmask.conv" + std::to_string(i);
            m = ops::relu(g, ops::conv2d(g, m, p(q + ".w"), p(q + ".b"), 1, 1));
        }
        m = ops::relu(g, ops::conv_transpose2x2(g, m, p("boxmask.deconv.w"), p("boxmask.deconv.b")));
        out.mask_logits = ops::conv2d(g, m, p("boxmask.pred.w"), p("boxmask.pred.b"), 1, 0);
    }
    return out;
}

RpnOutputs Detector::rpn(Graph& g, Var fmap, int height, int width) {
    if (config_.proposal_mode != ProposalMode::learned_rpn) {
        throw InvalidArgument("rpn: detector was built for oracle proposals");
    }
    (void)height;
    (void)width;
    auto p = [&](const std::string& name) { return g.parameter(store_.at(name)); };
    const Tensor& fv = fmap->value;
    Tensor batched = fv;
    batched.reshape({1, fv.dim(0), fv.dim(1), fv.dim(2)});
    Var x = g.record(std::move(batched), {fmap}, [fmap](const Tensor& dout) {
        Tensor& d = fmap->grad_buffer();
        for (std::size_t i = 0; i < dout.size(); ++i) {
            d[i] += dout[i];
        }
    });
    Var h = ops::relu(g, ops::conv2d(g, x, p("rpn.conv.w"), p("rpn.conv.b"), 1, 1));
    RpnOutputs out;
    Var obj = ops::conv2d(g, h, p("rpn.obj.w"), p("rpn.obj.b"), 1, 0);
    out.objectness = channels_last(g, obj);
    out.deltas = channels_last(g, ops::conv2d(g, h, p("rpn.delta.w"), p("rpn.delta.b"), 1, 0));
    out.anchors = anchors_for(fv.dim(1), fv.dim(2));
    return out;
}

LossGraph Detector::losses_for_rois(Graph& g, Var target_fmap, const std::vector<Var>& support_fmaps,
                                    const RoIBatch& batch, std::span<const LabeledBox> gt) {
    if (batch.rois.empty()) {
        throw InvalidArgument("compute_losses: no RoIs");
    }
    const int k = static_cast<int>(batch.rois.size());
    Var grids = aggregate(g, target_fmap, support_fmaps, batch.rois);
    const HeadOutputs out = heads(g, grids, config_.boxmask_enabled);
    LossGraph lg;
    lg.cls = ops::softmax_cross_entropy(g, out.cls_logits, batch.labels);
    lg.reg = ops::smooth_l1(g, out.deltas, batch.delta_targets, batch.positive, 1.0, k);
    if (out.mask_logits != nullptr) {
        const std::vector<LabelMask> targets =
            build_roi_targets(batch.rois, gt, config_.resolved_mask_size(), config_.num_classes);
        const bool any_positive = std::any_of(batch.positive.begin(), batch.positive.end(),
                                              [](double v) { return v > 0.0; });
        if (!config_.boxmask_positive_only) {
            lg.bm = boxmask_loss(g, out.mask_logits, targets);
        } else if (any_positive) {
            lg.bm = boxmask_loss(g, out.mask_logits, targets, batch.positive);
        } else {
            lg.bm = g.constant(Tensor({1}, 0.0));
        }
    }
    std::vector<std::pair<Var, double>> terms{{lg.cls, 1.0}, {lg.reg, 1.0}};
    if (lg.bm != nullptr) {
        terms.emplace_back(lg.bm, config_.lambda_bm);
    }
    lg.total = ops::weighted_sum(g, terms);
    lg.report = compose_losses(lg.cls->value[0], lg.reg->value[0], lg.bm ? lg.bm->value[0] : 0.0,
                               config_.lambda_bm);
    lg.report.l_total = lg.total->value[0];
    return lg;
}

LossGraph Detector::training_losses(Graph& g, const Image& target, std::span<const Image* const> supports,
                                    std::span<const LabeledBox> gt, Rng& rng) {
    Var tf = backbone(g, target);
    std::vector<Var> sf;
    for (const Image* s : supports) {
        sf.push_back(backbone(g, *s));
    }
    Var rpn_cls = nullptr;
    Var rpn_reg = nullptr;
    std::vector<Box> candidates;
    if (config_.proposal_mode == ProposalMode::oracle_jitter) {
        candidates = oracle_proposals(gt, target.height, target.width, kTrainCandidates, kTrainCandidatesPerGt,
                                      config_.jitter, rng)
                         .boxes;
    } else {
        const RpnOutputs r = rpn(g, tf, target.height, target.width);
        const std::size_t a_count = r.anchors.size();
        std::vector<int> assigned(a_count, -1);
        std::vector<int> best_gt(a_count, -1);
        std::vector<double> best_iou(a_count, 0.0);
        for (std::size_t a = 0; a < a_count; ++a) {
            for (std::size_t j = 0; j < gt.size(); ++j) {
                const double o = iou(r.anchors[a], gt[j].box);
                if (o > best_iou[a]) {
                    best_iou[a] = o;
                    best_gt[a] = static_cast<int>(j);
                }
            }
            assigned[a] = best_iou[a] >= kRpnPositiveIou ? 1 : (best_iou[a] < kRpnNegativeIou ? 0 : -1);
        }
        for (std::size_t j = 0; j < gt.size(); ++j) {
            std::size_t best = 0;
            double best_o = -1.0;
            for (std::size_t a = 0; a < a_count; ++a) {
                const double o = iou(r.anchors[a], gt[j].box);
                if (o > best_o) {
                    best_o = o;
                    best = a;
                }
            }
            if (best_o > 0.0) {
                assigned[best] = 1;
                best_gt[best] = static_cast<int>(j);
            }
        }
        std::vector<std::size_t> pos;
        std::vector<std::size_t> neg;
        for (std::size_t a = 0; a < a_count; ++a) {
            if (assigned[a] == 1) {
                pos.push_back(a);
            } else if (assigned[a] == 0) {
                neg.push_back(a);
            }
        }
        shuffle(pos, rng);
        shuffle(neg, rng);
        const std::size_t n_pos = std::min<std::size_t>(pos.size(), kRpnSamples / 2);
        const std::size_t n_neg = std::min<std::size_t>(neg.size(), kRpnSamples - n_pos);
        std::vector<double> p_star(a_count, 0.0);
        std::vector<double> weights(a_count, 0.0);
        std::vector<double> reg_weights(a_count, 0.0);
        Tensor reg_targets({static_cast<int>(a_count), 4});
        for (std::size_t i = 0; i < n_pos; ++i) {
            const std::size_t a = pos[i];
            p_star[a] = 1.0;
            weights[a] = 1.0;
            reg_weights[a] = 1.0;
            const BoxDelta d = encode(r.anchors[a], gt[best_gt[a]].box);
            reg_targets[a * 4] = d.dx;
            reg_targets[a * 4 + 1] = d.dy;
            reg_targets[a * 4 + 2] = d.dw;
            reg_targets[a * 4 + 3] = d.dh;
        }
        for (std::size_t i = 0; i < n_neg; ++i) {
            weights[neg[i]] = 1.0;
        }
        const double normalizer = std::max<double>(1.0, static_cast<double>(n_pos + n_neg));
        rpn_cls = ops::bce_with_logits(g, r.objectness, p_star, weights, normalizer);
        rpn_reg = ops::smooth_l1(g, r.deltas, reg_targets, reg_weights, 1.0 / 9.0, normalizer);
        candidates = rpn_proposals(r, target.height, target.width, 2 * config_.rois_per_frame);
        for (const LabeledBox& b : gt) {
            candidates.push_back(b.box);
        }
    }
    const RoIBatch batch =
        sample_rois(candidates, gt, config_.rois_per_frame, config_.positive_fraction, config_.fg_iou, rng);
    LossGraph lg = losses_for_rois(g, tf, sf, batch, gt);
    if (rpn_cls != nullptr) {
        lg.rpn_cls = rpn_cls;
        lg.rpn_reg = rpn_reg;
        std::vector<std::pair<Var, double>> terms{{lg.cls, 1.0}, {lg.reg, 1.0}};
        if (lg.bm != nullptr) {
            terms.emplace_back(lg.bm, config_.lambda_bm);
        }
        terms.emplace_back(rpn_cls, 1.0);
        terms.emplace_back(rpn_reg, 1.0);
        lg.total = ops::weighted_sum(g, terms);
        lg.report = compose_losses(lg.cls->value[0], lg.reg->value[0], lg.bm ? lg.bm->value[0] : 0.0,
                                   config_.lambda_bm, rpn_cls->value[0], rpn_reg->value[0]);
        lg.report.l_total = lg.total->value[0];
    }
    return lg;
}

std::vector<Box> Detector::inference_proposals(Graph& g, Var target_fmap, int height, int width,
                                               std::span<const LabeledBox> gt, std::uint64_t stream) {
    if (config_.proposal_mode == ProposalMode::learned_rpn) {
        return rpn_proposals(rpn(g, target_fmap, height, width), height, width, config_.rois_per_frame);
    }
    if (gt.empty()) {
        return {};
    }
    Rng rng(mix_seed(config_.seed, stream), "inference-proposals");
    return oracle_proposals(gt, height, width, config_.rois_per_frame, kInferPerGt, config_.jitter, rng).boxes;
}

std::vector<ScoredBox> Detector::detect(Graph& g, Var target_fmap, const std::vector<Var>& support_fmaps,
                                        std::span<const Box> proposals, int height, int width,
                                        const InferenceOptions& options) {
    if (proposals.empty()) {
        return {};
    }
    Var grids = aggregate(g, target_fmap, support_fmaps, proposals);
    const HeadOutputs out = heads(g, grids, options.evaluate_boxmask);
    const Tensor& logits = out.cls_logits->value;
    const Tensor& deltas = out.deltas->value;
    const int l1 = config_.num_classes + 1;
    std::vector<ScoredBox> candidates;
    for (std::size_t k = 0; k < proposals.size(); ++k) {
        double mx = logits[k * l1];
        for (int c = 1; c < l1; ++c) {
            mx = std::max(mx, logits[k * l1 + c]);
        }
        double z = 0.0;
        for (int c = 0; c < l1; ++c) {
            z += std::exp(logits[k * l1 + c] - mx);
        }
        const BoxDelta d{deltas[k * 4], deltas[k * 4 + 1], deltas[k * 4 + 2], deltas[k * 4 + 3]};
        const Box box = decode_clipped(proposals[k], d, width, height, kRoIDeltaWeights);
        if (box.width() < 1.0 || box.height() < 1.0) {
            continue;
        }
        for (int c = 1; c < l1; ++c) {
            const double score = std::exp(logits[k * l1 + c] - mx) / z;
            if (score > config_.score_thresh) {
                candidates.push_back(ScoredBox{box, score, c});
            }
        }
    }
    std::vector<ScoredBox> kept;
    for (std::size_t i : nms(candidates, config_.nms_iou)) {
        kept.push_back(candidates[i]);
    }
    return kept;
}

std::vector<ScoredBox> Detector::infer_with_features(const VideoClip& clip, int target, const SamplingPlan& plan,
                                                     const std::vector<Tensor>& features,
                                                     const InferenceOptions& options) {
    Graph g(false);
    Var tf = g.constant(features[target]);
    std::vector<Var> sf;
    for (int s : sample_support(clip.length(), target, plan)) {
        sf.push_back(g.constant(features[s]));
    }
    std::span<const LabeledBox> gt;
    if (target < static_cast<int>(clip.annotations.size())) {
        gt = clip.annotations[target];
    }
    const std::vector<Box> proposals = inference_proposals(g, tf, clip.height, clip.width, gt,
                                                           mix_seed(clip.seed, static_cast<std::uint64_t>(target)));
    return detect(g, tf, sf, proposals, clip.height, clip.width, options);
}

std::vector<ScoredBox> Detector::infer(const VideoClip& clip, int target, const SamplingPlan& plan,
                                       const InferenceOptions& options) {
    if (clip.length() == 0) {
        throw InvalidArgument("infer: empty clip");
    }
    if (target < 0 || target >= clip.length()) {
        throw InvalidArgument("infer: target frame out of range");
    }
    const std::vector<int> supports = sample_support(clip.length(), target, plan);
    std::vector<Tensor> features(clip.length());
    features[target] = backbone_forward(clip.frames[target]).values;
    for (int s : supports) {
        if (features[s].empty()) {
            features[s] = backbone_forward(clip.frames[s]).values;
        }
    }
    return infer_with_features(clip, target, plan, features, options);
}

std::vector<std::vector<ScoredBox>> Detector::infer_clip(const VideoClip& clip, const SamplingPlan& plan,
                                                         const InferenceOptions& options) {
    if (clip.length() == 0) {
        throw InvalidArgument("infer: empty clip");
    }
    std::vector<Tensor> features;
    for (const Image& frame : clip.frames) {
        features.push_back(backbone_forward(frame).values);
    }
    std::vector<std::vector<ScoredBox>> out;
    for (int t = 0; t < clip.length(); ++t) {
        out.push_back(infer_with_features(clip, t, plan, features, options));
    }
    return out;
}

double SgdMomentum::step(ParameterStore& store, double learning_rate) {
    double sq = 0.0;
    for (const Parameter* p : store.all()) {
        for (double v : p->grad.values()) {
            sq += v * v;
        }
    }
    const double norm = std::sqrt(sq);
    const double scale = (grad_clip_ > 0.0 && norm > grad_clip_) ? grad_clip_ / norm : 1.0;
    for (Parameter* p : store.all()) {
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double g = scale * p->grad[i] + weight_decay_ * p->value[i];
            p->velocity[i] = momentum_ * p->velocity[i] + g;
            p->value[i] -= learning_rate * p->velocity[i];
        }
    }
    return norm;
}

double learning_rate_at(const DetectorConfig& config, int step) {
    const int epoch = step / config.steps_per_epoch;
    double lr = config.learning_rate;
    for (int e : config.lr_decay_epochs) {
        if (epoch >= e) {
            lr *= config.lr_decay;
        }
    }
    return lr;
}

Trainer::Trainer(Detector& detector, const Dataset& dataset, const SamplingPlan& plan)
    : detector_(detector),
      dataset_(dataset),
      plan_(plan),
      optimizer_(detector.config().momentum, detector.config().weight_decay, detector.config().grad_clip),
      rng_(detector.config().seed, "trainer") {
    if (dataset.clips.empty()) {
        throw InvalidArgument("trainer: dataset has no clips");
    }
}

LossReport Trainer::step() {
    const VideoClip* clip = nullptr;
    int target = 0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const VideoClip& c = dataset_.clips[rng_.below(dataset_.clips.size())];
        if (c.length() == 0) {
            continue;
        }
        const int t = static_cast<int>(rng_.below(static_cast<std::uint64_t>(c.length())));
        if (!c.annotations[t].empty()) {
            clip = &c;
            target = t;
            break;
        }
    }
    if (clip == nullptr) {
        throw InvalidArgument("trainer: no annotated frames in dataset");
    }
    const std::vector<int> support_ids = sample_training_support(clip->length(), target, plan_, rng_);
    std::vector<const Image*> supports;
    for (int s : support_ids) {
        supports.push_back(&clip->frames[s]);
    }
    Graph g;
    const LossGraph lg = detector_.training_losses(g, clip->frames[target], supports, clip->annotations[target], rng_);
    check_finite(lg.report);
    detector_.parameters().zero_grad();
    g.backward(lg.total);
    optimizer_.step(detector_.parameters(), learning_rate_at(detector_.config(), step_));
    ++step_;
    return lg.report;
}

} // namespace boxmask
